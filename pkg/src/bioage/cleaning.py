"""Iterative data cleaning.

Each iteration splits the pool (stratified by age), trains a fresh regressor
on one side, and flags patients on the other side whose aggregated deviation
exceeds their threshold. Flagged patients stay in the pool. Once a streak of
iterations brings no first-time flags, every patient flagged in at least
``removal_min_flags`` iterations is removed and a final model is trained on
the rest.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from bioage import regressor
from bioage.aggregate import ChunkPredictor, aggregate_cohort
from bioage.core import (
    ChunkSample,
    Cohort,
    MetricsReport,
    PatientEstimate,
    compute_metrics,
    patient_ca,
)
from bioage.outlier import OutlierDecision, ThresholdPolicy, detect
from bioage.regressor import RegressorConfig

log = logging.getLogger(__name__)

Trainer = Callable[[Sequence[ChunkSample], RegressorConfig], ChunkPredictor]

_TAG_ITERATION = 0
_TAG_FINAL = 1
_STREAM_SPLIT = 0
_STREAM_TRAIN = 1


class EmptyRetainedPoolError(RuntimeError):
    def __init__(self, message: str, ledger: "FlagLedger"):
        super().__init__(message)
        self.ledger = ledger


def derive_seed(master: int, *keys: int) -> int:
    """64-bit seed derived from a master seed and integer keys."""
    state = np.random.SeedSequence([int(master), *map(int, keys)]).generate_state(2, np.uint32)
    return (int(state[0]) << 32) | int(state[1])


@dataclass(frozen=True)
class CleaningConfig:
    validation_fraction: float = 0.2
    stop_streak: int = 3
    max_iterations: int = 50
    removal_min_flags: int = 2
    age_bins: int = 10
    seed: int = 0
    threshold_policy: ThresholdPolicy = field(default_factory=ThresholdPolicy)
    regressor_config: RegressorConfig = field(default_factory=RegressorConfig)
    # any flag (not just a first-time flag) resets the stopping streak
    strict_streak: bool = False

    def __post_init__(self):
        if not 0 < self.validation_fraction < 1:
            raise ValueError("validation_fraction must be in (0, 1)")
        for name in ("stop_streak", "max_iterations", "removal_min_flags", "age_bins"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be a positive integer")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")

    def to_dict(self) -> dict:
        return {
            "validation_fraction": self.validation_fraction,
            "stop_streak": self.stop_streak,
            "max_iterations": self.max_iterations,
            "removal_min_flags": self.removal_min_flags,
            "age_bins": self.age_bins,
            "seed": self.seed,
            "strict_streak": self.strict_streak,
            "threshold_policy": self.threshold_policy.to_dict(),
            "regressor_config": self.regressor_config.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CleaningConfig":
        d = dict(d)
        if "threshold_policy" in d:
            d["threshold_policy"] = ThresholdPolicy(**d["threshold_policy"])
        if "regressor_config" in d:
            d["regressor_config"] = RegressorConfig.from_dict(d["regressor_config"])
        return cls(**d)


@dataclass
class FlagLedger:
    counts: dict[str, int]
    per_iteration: list[tuple[str, ...]] = field(default_factory=list)

    @classmethod
    def for_pool(cls, patient_ids) -> "FlagLedger":
        return cls(counts=dict.fromkeys(sorted(patient_ids), 0))

    def record(self, flagged: Sequence[str]) -> list[str]:
        """Count one iteration's flags; returns the first-time flagged ids."""
        flagged = sorted(set(flagged))
        new = [p for p in flagged if self.counts[p] == 0]
        for p in flagged:
            self.counts[p] += 1
        self.per_iteration.append(tuple(flagged))
        return new

    @property
    def ever_flagged(self) -> set[str]:
        return {p for p, c in self.counts.items() if c > 0}

    def removed(self, min_flags: int) -> list[str]:
        return sorted(p for p, c in self.counts.items() if c >= min_flags)


@dataclass(frozen=True)
class IterationRecord:
    iteration: int
    n_train: int
    n_validation: int
    validation_ids: tuple[str, ...]
    decisions: tuple[OutlierDecision, ...]
    flagged: tuple[str, ...]
    newly_flagged: tuple[str, ...]
    cumulative_flagged: dict[str, int]  # distinct patients flagged so far, per cohort label
    metrics: MetricsReport
    streak: int = 0

    def to_dict(self) -> dict:
        return {
            "iteration": self.iteration,
            "n_train": self.n_train,
            "n_validation": self.n_validation,
            "validation_ids": list(self.validation_ids),
            "flagged": list(self.flagged),
            "newly_flagged": list(self.newly_flagged),
            "cumulative_flagged": dict(self.cumulative_flagged),
            "metrics": self.metrics.to_dict(),
            "streak": self.streak,
        }


@dataclass
class CleaningReport:
    config: CleaningConfig
    iterations: list[IterationRecord]
    termination_reason: str  # "streak" or "max-iterations"
    ledger: FlagLedger
    removed: list[str]
    retained: list[str]
    cohort_sizes: dict[str, int]
    removed_by_label: dict[str, int]
    final_model: ChunkPredictor | None = None

    def removal_fraction(self, label: str) -> float:
        size = self.cohort_sizes.get(label, 0)
        return self.removed_by_label.get(label, 0) / size if size else 0.0

    def to_dict(self) -> dict:
        return {
            "config": self.config.to_dict(),
            "termination_reason": self.termination_reason,
            "n_iterations": len(self.iterations),
            "iterations": [it.to_dict() for it in self.iterations],
            "flag_counts": dict(self.ledger.counts),
            "removed": list(self.removed),
            "retained": list(self.retained),
            "cohort_sizes": dict(self.cohort_sizes),
            "removed_by_label": dict(self.removed_by_label),
        }

    def flags_table(self, labels: Mapping[str, str]) -> list[tuple]:
        """Rows ``(iteration, patient_id, deviation, threshold, cohort_label)``."""
        return [
            (it.iteration, d.patient_id, d.deviation, d.threshold, labels.get(d.patient_id, ""))
            for it in self.iterations
            for d in it.decisions
            if d.flagged
        ]


def stratified_split(
    ages: Mapping[str, float],
    validation_fraction: float,
    age_bins: int,
    rng: np.random.Generator,
) -> tuple[list[str], list[str]]:
    """Split patients into (train, validation) independently within
    equal-width CA bins spanning [min CA, max CA].

    Each bin gets ``floor(fraction * bin size)`` validation slots; the slots
    still missing from ``round(fraction * N)`` (clamped to [1, N - 1]) go to
    bins drawn at random, weighted by their fractional remainders.
    """
    if len(ages) < 2:
        raise ValueError("need at least two patients to split")
    if not 0 < validation_fraction < 1:
        raise ValueError("validation_fraction must be in (0, 1)")
    ids = sorted(ages)
    ca = np.array([ages[p] for p in ids], dtype=np.float64)
    lo, hi = float(ca.min()), float(ca.max())
    if hi > lo:
        bin_of = np.clip(np.floor((ca - lo) / (hi - lo) * age_bins).astype(int), 0, age_bins - 1)
    else:
        bin_of = np.zeros(len(ids), dtype=int)
    members = [[p for p, b in zip(ids, bin_of) if b == j] for j in range(age_bins)]

    n = len(ids)
    total = min(max(int(math.floor(validation_fraction * n + 0.5)), 1), n - 1)
    quotas = [validation_fraction * len(m) for m in members]
    take = [int(math.floor(q)) for q in quotas]
    extra = total - sum(take)
    if extra > 0:
        # leftover slots go to bins drawn with probability ~ fractional remainder,
        # so sparse bins are not starved of validation turns
        rem = np.array([q - t for q, t in zip(quotas, take)])
        open_bins = np.flatnonzero((rem > 0) & (np.array(take) < [len(m) for m in members]))
        k = min(extra, open_bins.size)
        if k:
            w = rem[open_bins] / rem[open_bins].sum()
            for j in rng.choice(open_bins, size=k, replace=False, p=w):
                take[j] += 1
    elif extra < 0:
        # clamping to N - 1 left a surplus
        for j in np.flatnonzero(np.array(take) > 0)[::-1]:
            if extra == 0:
                break
            take[j] -= 1
            extra += 1

    train: list[str] = []
    val: list[str] = []
    for m, k in zip(members, take):
        if not m:
            continue
        perm = rng.permutation(len(m))
        val += [m[i] for i in perm[:k]]
        train += [m[i] for i in perm[k:]]
    return sorted(train), sorted(val)


def _pool_ages(pool: Cohort) -> dict[str, float]:
    return {p: patient_ca(chunks) for p, chunks in pool.groups.items()}


def iteration_estimates(
    pool: Cohort,
    config: CleaningConfig,
    iteration: int,
    trainer: Trainer = regressor.train,
) -> tuple[list[str], list[str], list[PatientEstimate]]:
    """Split, train from scratch and estimate the validation side, using the
    seeds iteration ``iteration`` of :func:`run_cleaning` would use."""
    if len(pool) == 0:
        raise ValueError("empty pool")
    split_rng = np.random.default_rng(derive_seed(config.seed, _TAG_ITERATION, iteration, _STREAM_SPLIT))
    train_ids, val_ids = stratified_split(
        _pool_ages(pool), config.validation_fraction, config.age_bins, split_rng
    )
    reg_cfg = config.regressor_config.with_seed(
        derive_seed(config.seed, _TAG_ITERATION, iteration, _STREAM_TRAIN)
    )
    model = trainer(pool.subset(train_ids).samples(), reg_cfg)
    estimates = aggregate_cohort(model, pool.subset(val_ids).groups)
    return train_ids, val_ids, estimates


def run_iteration(
    pool: Cohort,
    ledger: FlagLedger,
    config: CleaningConfig,
    iteration: int,
    trainer: Trainer = regressor.train,
) -> IterationRecord:
    """One split / train / validate / flag round. Updates ``ledger`` in place."""
    train_ids, val_ids, estimates = iteration_estimates(pool, config, iteration, trainer)
    decisions = detect(estimates, config.threshold_policy)
    flagged = [d.patient_id for d in decisions if d.flagged]
    new = ledger.record(flagged)

    cumulative = dict.fromkeys(sorted(set(pool.labels.values())), 0)
    for p in ledger.ever_flagged:
        cumulative[pool.labels.get(p, "")] += 1
    metrics = compute_metrics(
        [e.predicted_age for e in estimates], [e.ca_label for e in estimates]
    )
    return IterationRecord(
        iteration=iteration,
        n_train=len(train_ids),
        n_validation=len(val_ids),
        validation_ids=tuple(val_ids),
        decisions=tuple(decisions),
        flagged=tuple(sorted(flagged)),
        newly_flagged=tuple(new),
        cumulative_flagged=cumulative,
        metrics=metrics,
    )


def run_cleaning(
    pool: Cohort,
    config: CleaningConfig,
    trainer: Trainer = regressor.train,
) -> CleaningReport:
    if len(pool) == 0:
        raise ValueError("empty pool")
    ledger = FlagLedger.for_pool(pool.patient_ids)
    records: list[IterationRecord] = []
    streak = 0
    reason = "max-iterations"
    for t in range(1, config.max_iterations + 1):
        rec = run_iteration(pool, ledger, config, t, trainer)
        resets = rec.flagged if config.strict_streak else rec.newly_flagged
        streak = 0 if resets else streak + 1
        rec = IterationRecord(**{**rec.__dict__, "streak": streak})
        records.append(rec)
        log.info(
            "iteration %d: %d flagged (%d new), streak %d",
            t, len(rec.flagged), len(rec.newly_flagged), streak,
        )
        if streak >= config.stop_streak:
            reason = "streak"
            break

    removed = ledger.removed(config.removal_min_flags)
    removed_set = set(removed)
    retained = [p for p in pool.patient_ids if p not in removed_set]
    if not retained:
        raise EmptyRetainedPoolError("every patient was removed; nothing left to train on", ledger)

    labels = sorted(set(pool.labels.values()))
    sizes = {g: 0 for g in labels}
    removed_by = {g: 0 for g in labels}
    for p in pool.patient_ids:
        g = pool.labels.get(p, "")
        sizes[g] += 1
        removed_by[g] += p in removed_set

    final_cfg = config.regressor_config.with_seed(derive_seed(config.seed, _TAG_FINAL))
    final_model = trainer(pool.subset(retained).samples(), final_cfg)
    return CleaningReport(
        config=config,
        iterations=records,
        termination_reason=reason,
        ledger=ledger,
        removed=removed,
        retained=retained,
        cohort_sizes=sizes,
        removed_by_label=removed_by,
        final_model=final_model,
    )


@dataclass
class Evaluation:
    """Signed per-patient deviations and metrics, grouped by cohort label."""

    deviations: dict[str, list[tuple[str, float]]]
    metrics: dict[str, MetricsReport]

    def mean_deviation(self, label: str) -> float:
        return float(np.mean([d for _, d in self.deviations[label]]))

    def to_dict(self) -> dict:
        return {
            "deviations": {g: [[p, d] for p, d in rows] for g, rows in self.deviations.items()},
            "metrics": {g: m.to_dict() for g, m in self.metrics.items()},
        }


def evaluate_final(model: ChunkPredictor, test: Cohort) -> Evaluation:
    if len(test) == 0:
        raise ValueError("empty test cohort")
    estimates = aggregate_cohort(model, test.groups)
    deviations: dict[str, list[tuple[str, float]]] = {}
    for e in estimates:
        deviations.setdefault(test.labels.get(e.patient_id, ""), []).append(
            (e.patient_id, e.signed_deviation)
        )
    metrics = {}
    by_id = {e.patient_id: e for e in estimates}
    for g in sorted(deviations):
        es = [by_id[p] for p, _ in deviations[g]]
        metrics[g] = compute_metrics([e.predicted_age for e in es], [e.ca_label for e in es])
    metrics["all"] = compute_metrics(
        [e.predicted_age for e in estimates], [e.ca_label for e in estimates]
    )
    return Evaluation(deviations=dict(sorted(deviations.items())), metrics=metrics)
