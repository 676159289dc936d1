import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from bioage.aggregate import aggregate_cohort, aggregate_patient, cohort_vectors
from bioage.core import group_chunks
from bioage.regressor import constant_model, train_ridge
from bioage.synth import CohortSpec, GroupSpec, generate

from conftest import make_sample

chunk_lists = st.lists(st.floats(20, 110, allow_nan=False), min_size=2, max_size=20)


def brute_force(chunks, label):
    k = len(chunks)
    mean = sum(chunks) / k
    sd = math.sqrt(sum((c - mean) ** 2 for c in chunks) / (k - 1)) if k > 1 else 0.0
    return mean, sd, abs(mean - label)


class TestAggregatePatient:
    def test_constant_chunks(self):
        e = aggregate_patient([52, 52, 52], 52)
        assert (e.predicted_age, e.chunk_spread, e.deviation) == (52.0, 0.0, 0.0)

    def test_hand_computed(self):
        e = aggregate_patient([50, 52, 54], 60)
        assert e.predicted_age == pytest.approx(52.0)
        assert e.chunk_spread == pytest.approx(2.0)
        assert e.deviation == pytest.approx(8.0)

    def test_single_chunk(self):
        e = aggregate_patient([57.5], 50)
        assert (e.predicted_age, e.chunk_spread, e.deviation) == (57.5, 0.0, 7.5)

    @pytest.mark.parametrize("bad", [[], [1.0, float("nan")]])
    def test_rejects(self, bad):
        with pytest.raises(ValueError):
            aggregate_patient(bad, 50)

    @given(chunk_lists, st.floats(20, 110))
    def test_matches_brute_force(self, chunks, label):
        e = aggregate_patient(chunks, label)
        mean, sd, dev = brute_force(chunks, label)
        assert e.predicted_age == pytest.approx(mean, rel=1e-9)
        assert e.chunk_spread == pytest.approx(sd, rel=1e-9, abs=1e-9)
        assert e.deviation == pytest.approx(dev, rel=1e-9, abs=1e-9)
        assert e.chunk_spread >= 0 and e.deviation >= 0
        assert (e.chunk_spread == 0) == (len(set(chunks)) == 1)

    @given(chunk_lists, st.randoms(use_true_random=False))
    def test_permutation_invariant(self, chunks, rnd):
        shuffled = list(chunks)
        rnd.shuffle(shuffled)
        a, b = aggregate_patient(chunks, 60), aggregate_patient(shuffled, 60)
        assert b.predicted_age == pytest.approx(a.predicted_age, rel=1e-12)
        assert b.chunk_spread == pytest.approx(a.chunk_spread, rel=1e-9, abs=1e-9)

    @given(chunk_lists, st.floats(-30, 30))
    def test_shift(self, chunks, c):
        a = aggregate_patient(chunks, 60)
        b = aggregate_patient([x + c for x in chunks], 60)
        assert b.predicted_age == pytest.approx(a.predicted_age + c, rel=1e-9, abs=1e-9)
        assert b.chunk_spread == pytest.approx(a.chunk_spread, rel=1e-6, abs=1e-7)


def small_cohort(n=3, k=4, seed=5):
    spec = CohortSpec(
        groups=(GroupSpec("typical", n, 0.0, 1.0),), chunks_per_patient=k, feature_dim=3,
        informative_dims=2, seed=seed,
    )
    return generate(spec)[0]


class TestAggregateCohort:
    def test_single_patient(self):
        ds = small_cohort(n=1)
        model = train_ridge(ds, 1.0)
        (e,) = aggregate_cohort(model, group_chunks(ds))
        ref = aggregate_patient(model.predict_samples(ds), ds[0].ca_label, ds[0].patient_id)
        assert e == ref

    def test_constant_model(self):
        ds = small_cohort(n=5)
        est = aggregate_cohort(constant_model(4, 70.0), group_chunks(ds))
        _, sigma, dev = cohort_vectors(est)
        assert np.all(sigma == 0)
        np.testing.assert_allclose(dev, [abs(70.0 - e.ca_label) for e in est])

    def test_equals_per_patient_loop(self):
        ds = small_cohort(n=3, k=6)
        model = train_ridge(ds, 1.0)
        groups = group_chunks(ds)
        est = aggregate_cohort(model, groups)
        for e, pid in zip(est, sorted(groups)):
            chunks = groups[pid]
            preds = [float(model.predict_samples([c])[0]) for c in chunks]
            mean, sd, dev = brute_force(preds, chunks[0].ca_label)
            assert e.patient_id == pid
            assert e.predicted_age == pytest.approx(mean, rel=1e-12)
            assert e.chunk_spread == pytest.approx(sd, rel=1e-9)
            assert e.deviation == pytest.approx(dev, rel=1e-9, abs=1e-9)

    def test_chunk_order_in_mapping_is_irrelevant(self):
        ds = small_cohort(n=3)
        model = train_ridge(ds, 1.0)
        groups = group_chunks(ds)
        reversed_groups = {p: list(reversed(c)) for p, c in reversed(list(groups.items()))}
        assert aggregate_cohort(model, groups) == aggregate_cohort(model, reversed_groups)

    def test_multi_scan_pools_chunks(self):
        ds = [make_sample("a", i, 60, (float(i),), scan=s) for s in ("s0", "s1") for i in range(2)]
        model = constant_model(2, 0.0)
        model.weights[0][0, 0] = 1.0
        (e,) = aggregate_cohort(model, group_chunks(ds))
        assert len(e.chunk_predictions) == 4
        assert e.predicted_age == pytest.approx(0.5)

    def test_exclusion_mask(self):
        ds = small_cohort(n=2, k=6)
        model = train_ridge(ds, 1.0)
        est = aggregate_cohort(model, group_chunks(ds), exclude_chunks={0, 5})
        assert all(len(e.chunk_predictions) == 4 for e in est)

    def test_empty(self):
        with pytest.raises(ValueError):
            aggregate_cohort(constant_model(2, 1.0), {})
