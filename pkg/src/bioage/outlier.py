"""Outlier decision rules: patient-dependent and fixed thresholds, and R sweeps."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Mapping, Sequence

import numpy as np

from bioage.core import PatientEstimate

PATIENT_DEPENDENT = "patient-dependent"
FIXED = "fixed"


@dataclass(frozen=True)
class ThresholdPolicy:
    mode: str = PATIENT_DEPENDENT
    r: float = 1.96
    sigma_floor: float = 0.0

    def __post_init__(self):
        if self.mode not in (PATIENT_DEPENDENT, FIXED):
            raise ValueError(f"unknown threshold mode {self.mode!r}")
        if not self.r > 0:
            raise ValueError("r must be positive")
        if not self.sigma_floor >= 0:
            raise ValueError("sigma_floor must be nonnegative")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class OutlierDecision:
    patient_id: str
    deviation: float
    threshold: float
    flagged: bool


def thresholds(estimates: Sequence[PatientEstimate], policy: ThresholdPolicy) -> np.ndarray:
    if len(estimates) == 0:
        raise ValueError("no estimates to threshold")
    if policy.mode == FIXED:
        # mean absolute deviation of the cohort, shared by all patients
        gamma = math.fsum(e.deviation for e in estimates) / len(estimates)
        return np.full(len(estimates), gamma)
    if any(len(e.chunk_predictions) < 2 for e in estimates):
        raise ValueError(
            "patient-dependent thresholds need at least two chunk predictions per patient; "
            "use the fixed mode for whole-volume input"
        )
    spread = np.array([e.chunk_spread for e in estimates])
    return np.maximum(policy.r * spread, policy.sigma_floor)


def detect(estimates: Sequence[PatientEstimate], policy: ThresholdPolicy) -> list[OutlierDecision]:
    """Flag patients whose deviation strictly exceeds their threshold."""
    gamma = thresholds(estimates, policy)
    return [
        OutlierDecision(e.patient_id, e.deviation, float(g), bool(e.deviation > g))
        for e, g in zip(estimates, gamma)
    ]


@dataclass(frozen=True)
class SweepRow:
    r: float | None  # None for the fixed-threshold comparison row
    cohort_label: str
    flagged_count: int
    cohort_size: int

    @property
    def r_text(self) -> str:
        return FIXED if self.r is None else repr(self.r)


def sweep_r(
    estimates: Sequence[PatientEstimate],
    r_values: Sequence[float],
    labels: Mapping[str, str] | None = None,
    *,
    sigma_floor: float = 0.0,
    include_fixed: bool = False,
) -> list[SweepRow]:
    """Flag counts per cohort label for each R in ``r_values``.

    Labels default to a single cohort named ``"all"``.
    """
    if len(r_values) == 0:
        raise ValueError("empty r list")
    r_values = [float(r) for r in r_values]
    if any(r <= 0 for r in r_values) or any(b <= a for a, b in zip(r_values, r_values[1:])):
        raise ValueError("r values must be positive and strictly ascending")
    if len(estimates) == 0:
        raise ValueError("no estimates to sweep")

    group_of = [labels.get(e.patient_id, "") if labels else "all" for e in estimates]
    groups = sorted(set(group_of))
    sizes = {g: group_of.count(g) for g in groups}

    def rows_for(r, decisions):
        counts = dict.fromkeys(groups, 0)
        for g, d in zip(group_of, decisions):
            counts[g] += d.flagged
        return [SweepRow(r, g, counts[g], sizes[g]) for g in groups]

    rows = []
    for r in r_values:
        rows += rows_for(r, detect(estimates, ThresholdPolicy(PATIENT_DEPENDENT, r, sigma_floor)))
    if include_fixed:
        rows += rows_for(None, detect(estimates, ThresholdPolicy(FIXED)))
    return rows
