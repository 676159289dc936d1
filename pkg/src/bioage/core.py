"""Domain types shared across the package and the regression metric suite."""

from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np


class DataFormatError(ValueError):
    """Input data violates a structural invariant (ragged chunks, NaNs, ...)."""


@dataclass(frozen=True)
class ChunkSample:
    """Feature vector of one chunk of one scan.

    ``group_label`` is carried for reporting only; nothing that trains or
    flags ever reads it.
    """

    patient_id: str
    scan_id: str
    chunk_index: int
    gender: int
    ca_label: float
    features: tuple[float, ...]
    group_label: str = ""

    @property
    def key(self) -> tuple[str, str, int]:
        return (self.patient_id, self.scan_id, self.chunk_index)


@dataclass(frozen=True)
class PatientEstimate:
    patient_id: str
    ca_label: float
    predicted_age: float
    chunk_spread: float
    deviation: float
    chunk_predictions: tuple[float, ...]

    @property
    def signed_deviation(self) -> float:
        return self.predicted_age - self.ca_label


@dataclass(frozen=True)
class MetricsReport:
    mae: float
    sd: float
    bias: float
    rmse: float
    corr: float | None  # None when either input is constant
    n: int

    def to_dict(self) -> dict:
        return {
            "mae": self.mae,
            "sd": self.sd,
            "bias": self.bias,
            "rmse": self.rmse,
            "corr": self.corr,
            "n": self.n,
        }


def _as_finite_vector(values: Sequence[float], name: str) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64).reshape(-1)
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    return arr


def compute_metrics(predictions: Sequence[float], labels: Sequence[float]) -> MetricsReport:
    """MAE, SD, bias, RMSE and Pearson correlation of predictions vs labels.

    Errors are signed as ``prediction - label``. SD is the population (1/N)
    standard deviation of the signed errors, so ``rmse**2 == bias**2 + sd**2``.
    """
    pred = _as_finite_vector(predictions, "predictions")
    lab = _as_finite_vector(labels, "labels")
    if pred.size != lab.size:
        raise ValueError(f"length mismatch: {pred.size} predictions vs {lab.size} labels")
    if pred.size == 0:
        raise ValueError("cannot compute metrics on empty input")

    err = pred - lab
    bias = float(err.mean())
    sd = float(np.sqrt(np.mean((err - bias) ** 2)))
    rmse = float(np.sqrt(np.mean(err**2)))
    mae = float(np.mean(np.abs(err)))

    pc = pred - pred.mean()
    lc = lab - lab.mean()
    denom = math.sqrt(float(np.dot(pc, pc)) * float(np.dot(lc, lc)))
    if denom == 0.0:
        corr = None
    else:
        corr = float(np.clip(np.dot(pc, lc) / denom, -1.0, 1.0))
    return MetricsReport(mae=mae, sd=sd, bias=bias, rmse=rmse, corr=corr, n=int(pred.size))


def validate_dataset(dataset: Iterable[ChunkSample]) -> tuple[int, int]:
    """Check the dataset invariants; returns ``(feature_dim, chunks_per_scan)``."""
    dims: set[int] = set()
    scans: dict[tuple[str, str], set[int]] = defaultdict(set)
    n = 0
    for s in dataset:
        n += 1
        dims.add(len(s.features))
        if not all(math.isfinite(v) for v in s.features):
            raise DataFormatError(f"non-finite feature in {s.key}")
        if not math.isfinite(s.ca_label) or s.ca_label <= 0:
            raise DataFormatError(f"invalid ca_label {s.ca_label!r} in {s.key}")
        if s.gender not in (0, 1):
            raise DataFormatError(f"gender must be 0 or 1, got {s.gender!r} in {s.key}")
        seen = scans[(s.patient_id, s.scan_id)]
        if s.chunk_index in seen:
            raise DataFormatError(f"duplicate chunk {s.key}")
        seen.add(s.chunk_index)
    if n == 0:
        raise DataFormatError("empty dataset")
    if len(dims) != 1:
        raise DataFormatError(f"inconsistent feature dimensions: {sorted(dims)}")
    index_sets = {frozenset(v) for v in scans.values()}
    if len(index_sets) != 1:
        raise DataFormatError("ragged chunk counts across scans")
    # the shared index set may have gaps after drop_chunks
    (indices,) = index_sets
    return dims.pop(), len(indices)


def group_chunks(dataset: Iterable[ChunkSample]) -> dict[str, list[ChunkSample]]:
    """Group samples by patient, each group ordered by (scan_id, chunk_index).

    The returned dict iterates in sorted patient_id order.
    """
    dataset = list(dataset)
    validate_dataset(dataset)
    groups: dict[str, list[ChunkSample]] = defaultdict(list)
    for s in dataset:
        groups[s.patient_id].append(s)
    return {
        pid: sorted(groups[pid], key=lambda s: (s.scan_id, s.chunk_index))
        for pid in sorted(groups)
    }


def drop_chunks(dataset: Iterable[ChunkSample], excluded: Iterable[int]) -> list[ChunkSample]:
    """Remove the given chunk indices from every scan (e.g. skull-dominated end chunks)."""
    excluded = set(excluded)
    return [s for s in dataset if s.chunk_index not in excluded]


def canonical_order(samples: Iterable[ChunkSample]) -> list[ChunkSample]:
    return sorted(samples, key=lambda s: s.key)


def patient_labels(groups: dict[str, list[ChunkSample]]) -> dict[str, str]:
    return {pid: chunks[0].group_label for pid, chunks in groups.items()}


def patient_ca(chunks: Sequence[ChunkSample]) -> float:
    """Chronological age of a patient: mean over its chunks (scans weigh equally)."""
    return math.fsum(c.ca_label for c in chunks) / len(chunks)


@dataclass
class Cohort:
    """Patients grouped for the cleaning engine, in sorted patient_id order."""

    groups: dict[str, list[ChunkSample]]
    labels: dict[str, str] = field(default_factory=dict)

    @classmethod
    def from_samples(cls, dataset: Iterable[ChunkSample]) -> "Cohort":
        groups = group_chunks(dataset)
        return cls(groups=groups, labels=patient_labels(groups))

    @property
    def patient_ids(self) -> list[str]:
        return list(self.groups)

    def __len__(self) -> int:
        return len(self.groups)

    def subset(self, ids: Iterable[str]) -> "Cohort":
        ids = sorted(ids)
        return Cohort(
            groups={p: self.groups[p] for p in ids},
            labels={p: self.labels.get(p, "") for p in ids},
        )

    def samples(self) -> list[ChunkSample]:
        return [s for chunks in self.groups.values() for s in chunks]
