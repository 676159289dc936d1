"""Per-patient consolidation of chunk predictions."""

from __future__ import annotations

import math
from typing import Iterable, Mapping, Protocol, Sequence

import numpy as np

from bioage.core import ChunkSample, PatientEstimate, patient_ca


class ChunkPredictor(Protocol):
    def predict_samples(self, samples: Sequence[ChunkSample]) -> np.ndarray: ...


def aggregate_patient(
    chunk_predictions: Sequence[float], ca_label: float, patient_id: str = ""
) -> PatientEstimate:
    """Mean chunk prediction, its sample standard deviation (K - 1
    denominator, 0 when K == 1) and the absolute deviation from ``ca_label``."""
    preds = np.asarray(chunk_predictions, dtype=np.float64).reshape(-1)
    if preds.size == 0:
        raise ValueError("empty chunk prediction vector")
    if not np.all(np.isfinite(preds)) or not math.isfinite(ca_label):
        raise ValueError("non-finite chunk predictions or label")
    k = preds.size
    # fsum keeps the result independent of chunk order
    mean = math.fsum(preds.tolist()) / k
    if k == 1 or np.all(preds == preds[0]):
        spread = 0.0
    else:
        spread = math.sqrt(math.fsum(((preds - mean) ** 2).tolist()) / (k - 1))
    return PatientEstimate(
        patient_id=patient_id,
        ca_label=float(ca_label),
        predicted_age=mean,
        chunk_spread=spread,
        deviation=abs(mean - ca_label),
        chunk_predictions=tuple(float(p) for p in preds),
    )


def aggregate_cohort(
    model: ChunkPredictor,
    patients: Mapping[str, Sequence[ChunkSample]],
    exclude_chunks: Iterable[int] = (),
) -> list[PatientEstimate]:
    """Estimate every patient, in sorted patient_id order.

    All chunks of all scans of a patient are pooled. Chunk indices in
    ``exclude_chunks`` are skipped entirely.
    """
    if not patients:
        raise ValueError("empty cohort")
    excluded = set(exclude_chunks)
    ids = sorted(patients)
    pools = []
    for pid in ids:
        chunks = sorted(
            (c for c in patients[pid] if c.chunk_index not in excluded),
            key=lambda c: (c.scan_id, c.chunk_index),
        )
        if not chunks:
            raise ValueError(f"patient {pid} has no chunks left after exclusion")
        pools.append(chunks)
    flat = [c for chunks in pools for c in chunks]
    preds = np.asarray(model.predict_samples(flat), dtype=np.float64)

    out = []
    offset = 0
    for pid, chunks in zip(ids, pools):
        k = len(chunks)
        out.append(aggregate_patient(preds[offset : offset + k], patient_ca(chunks), pid))
        offset += k
    return out


def cohort_vectors(estimates: Sequence[PatientEstimate]):
    """The (predicted age, chunk spread, deviation) vectors of a cohort."""
    return (
        np.array([e.predicted_age for e in estimates]),
        np.array([e.chunk_spread for e in estimates]),
        np.array([e.deviation for e in estimates]),
    )
