"""Synthetic cohorts with known biological ages.

Every chunk carries an "apparent age" ``BA + gender_effect * gender +
chunk offset``; the informative features are fixed affine images of the
standardized apparent age plus noise, the rest are pure noise. Only CA is
written to the ``ca_label`` field. This affine model is a stand-in for how
tissue morphology tracks biological age, not a model of real MRI.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from bioage.core import ChunkSample


@dataclass(frozen=True)
class GroupSpec:
    label: str
    count: int
    aging_shift_mean: float = 0.0
    aging_shift_sd: float = 0.0


DEFAULT_GROUPS = (
    GroupSpec("typical", 405, 0.0, 1.0),
    GroupSpec("mild", 110, 4.0, 1.5),
    GroupSpec("moderate", 49, 8.0, 2.0),
    GroupSpec("severe", 6, 14.0, 2.0),
)


@dataclass(frozen=True)
class CohortSpec:
    groups: tuple[GroupSpec, ...] = DEFAULT_GROUPS
    ca_range: tuple[float, float] = (48.0, 97.0)
    chunks_per_patient: int = 14
    feature_dim: int = 16
    informative_dims: int = 4
    feature_noise_sd: float = 0.1
    chunk_offset_sd: float = 1.5
    gender_effect: float = 3.0
    scans_per_patient: int = 1
    seed: int = 0
    # seeds the feature loadings; cohorts sharing it live in the same "world"
    loading_seed: int = 0
    id_prefix: str = "p"

    def __post_init__(self):
        groups = tuple(g if isinstance(g, GroupSpec) else GroupSpec(**g) for g in self.groups)
        object.__setattr__(self, "groups", groups)
        object.__setattr__(self, "ca_range", tuple(float(v) for v in self.ca_range))
        if not groups:
            raise ValueError("at least one group is required")
        labels = [g.label for g in groups]
        if len(set(labels)) != len(labels):
            raise ValueError("group labels must be unique")
        if any(g.count <= 0 for g in groups):
            raise ValueError("group counts must be positive")
        if any(g.aging_shift_sd < 0 for g in groups):
            raise ValueError("aging_shift_sd must be nonnegative")
        lo, hi = self.ca_range
        if not 0 < lo < hi:
            raise ValueError("ca_range must satisfy 0 < lo < hi")
        if self.chunks_per_patient < 1 or self.scans_per_patient < 1:
            raise ValueError("chunks_per_patient and scans_per_patient must be >= 1")
        if not 1 <= self.informative_dims <= self.feature_dim:
            raise ValueError("informative_dims must be in [1, feature_dim]")
        if self.feature_noise_sd < 0 or self.chunk_offset_sd < 0:
            raise ValueError("noise levels must be nonnegative")

    @property
    def n_patients(self) -> int:
        return sum(g.count for g in self.groups)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["groups"] = [asdict(g) for g in self.groups]
        d["ca_range"] = list(self.ca_range)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "CohortSpec":
        d = dict(d)
        if "groups" in d:
            d["groups"] = tuple(GroupSpec(**g) for g in d["groups"])
        if "ca_range" in d:
            d["ca_range"] = tuple(d["ca_range"])
        return cls(**d)


@dataclass(frozen=True)
class TruthRecord:
    patient_id: str
    true_ba: float
    group_label: str


def feature_loadings(spec: CohortSpec) -> tuple[np.ndarray, np.ndarray]:
    """Per-dimension (loading, intercept) of the informative features."""
    rng = np.random.default_rng(np.random.SeedSequence([spec.loading_seed, 0x10AD]))
    k = spec.informative_dims
    loadings = rng.uniform(0.5, 1.5, size=k) * rng.choice([-1.0, 1.0], size=k)
    intercepts = rng.normal(0.0, 1.0, size=k)
    return loadings, intercepts


def _age_scale(spec: CohortSpec) -> tuple[float, float]:
    lo, hi = spec.ca_range
    return 0.5 * (lo + hi), (hi - lo) / math.sqrt(12.0)


def generate(spec: CohortSpec) -> tuple[list[ChunkSample], dict[str, TruthRecord]]:
    """Draw a cohort. Each patient has its own RNG stream derived from
    ``(seed, patient index)``, so generation order does not matter."""
    loadings, intercepts = feature_loadings(spec)
    center, scale = _age_scale(spec)
    lo, hi = spec.ca_range
    n_total = spec.n_patients
    width = len(str(n_total - 1))
    k_inf = spec.informative_dims
    dataset: list[ChunkSample] = []
    truth: dict[str, TruthRecord] = {}

    index = 0
    for group in spec.groups:
        for _ in range(group.count):
            rng = np.random.default_rng(np.random.SeedSequence([spec.seed, index]))
            pid = f"{spec.id_prefix}{index:0{width}d}"
            ca = float(rng.uniform(lo, hi))
            shift = float(rng.normal(group.aging_shift_mean, group.aging_shift_sd)) if group.aging_shift_sd else group.aging_shift_mean
            ba = ca + shift
            gender = int(rng.integers(0, 2))
            truth[pid] = TruthRecord(pid, ba, group.label)
            for scan in range(spec.scans_per_patient):
                k = spec.chunks_per_patient
                offsets = rng.normal(0.0, spec.chunk_offset_sd, size=k) if spec.chunk_offset_sd else np.zeros(k)
                apparent = ba + spec.gender_effect * gender + offsets
                u = (apparent - center) / scale
                feats = np.empty((k, spec.feature_dim))
                feats[:, :k_inf] = u[:, None] * loadings + intercepts
                if spec.feature_noise_sd:
                    feats[:, :k_inf] += rng.normal(0.0, spec.feature_noise_sd, size=(k, k_inf))
                feats[:, k_inf:] = rng.normal(0.0, 1.0, size=(k, spec.feature_dim - k_inf))
                for i in range(k):
                    dataset.append(
                        ChunkSample(
                            patient_id=pid,
                            scan_id=f"s{scan}",
                            chunk_index=i,
                            gender=gender,
                            ca_label=ca,
                            features=tuple(float(v) for v in feats[i]),
                            group_label=group.label,
                        )
                    )
            index += 1
    return dataset, truth


def age_balance(
    dataset: Sequence[ChunkSample], bins: int, seed: int = 0, tolerance: float = 2.0
) -> tuple[list[ChunkSample], list[ChunkSample]]:
    """Subsample patients so no equal-width CA bin holds more than
    ``tolerance`` times the smallest nonempty bin.

    Returns ``(balanced, remainder)``; together they partition ``dataset``.
    """
    if bins < 1:
        raise ValueError("bins must be >= 1")
    ages: dict[str, list[float]] = {}
    for s in dataset:
        ages.setdefault(s.patient_id, []).append(s.ca_label)
    if not ages:
        return [], []
    ids = sorted(ages)
    ca = np.array([np.mean(ages[p]) for p in ids])
    bin_of = _age_bins(ca, bins)
    members = [[p for p, b in zip(ids, bin_of) if b == j] for j in range(bins)]
    nonempty = [len(m) for m in members if m]
    cap = int(math.floor(min(nonempty) * tolerance))
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xBA1]))
    keep: set[str] = set()
    for m in members:
        if len(m) <= cap:
            keep.update(m)
        else:
            chosen = rng.choice(len(m), size=cap, replace=False)
            keep.update(m[i] for i in chosen)
    balanced = [s for s in dataset if s.patient_id in keep]
    remainder = [s for s in dataset if s.patient_id not in keep]
    return balanced, remainder


def _age_bins(ca: np.ndarray, bins: int) -> np.ndarray:
    lo, hi = float(ca.min()), float(ca.max())
    if hi == lo:
        return np.zeros(ca.size, dtype=int)
    idx = np.floor((ca - lo) / (hi - lo) * bins).astype(int)
    return np.clip(idx, 0, bins - 1)
