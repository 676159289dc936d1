import numpy as np
import pytest

from bioage.core import ChunkSample


def make_sample(pid="p0", chunk=0, ca=60.0, features=(0.0,), gender=0, scan="s0", label=""):
    return ChunkSample(pid, scan, chunk, gender, float(ca), tuple(float(f) for f in features), label)


class LookupOracle:
    """Predicts each chunk's own CA label exactly (or plus a fixed offset)."""

    def __init__(self, offset=0.0):
        self.offset = offset

    def predict_samples(self, samples):
        return np.array([s.ca_label + self.offset for s in samples])


def oracle_trainer(samples, config):
    return LookupOracle()


@pytest.fixture
def affine_samples():
    """Labels exactly 2 * f0 + 5 with a random second feature and gender."""
    rng = np.random.default_rng(123)
    out = []
    for i in range(60):
        x0 = rng.uniform(20, 40)
        out.append(make_sample(f"p{i:02d}", 0, 2 * x0 + 5, (x0, rng.normal()), int(rng.integers(0, 2))))
    return out
