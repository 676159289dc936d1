import numpy as np
import pytest

from bioage.core import DataFormatError
from bioage.regressor import (
    RegressorConfig,
    RegressorModel,
    SingularSystemError,
    TrainingDivergedError,
    constant_model,
    design_matrix,
    gradient_check,
    init_model,
    predict,
    train,
    train_ridge,
)
from bioage.synth import CohortSpec, GroupSpec, generate

from conftest import make_sample

FAST = RegressorConfig(hidden_layer_sizes=(16,), epochs=300, batch_size=16, learning_rate=1e-2, l2_weight=0.0)


def gauss_solve(a, b):
    """Plain Gaussian elimination with partial pivoting."""
    a = [list(map(float, row)) + [float(v)] for row, v in zip(a, b)]
    n = len(a)
    for col in range(n):
        piv = max(range(col, n), key=lambda r: abs(a[r][col]))
        a[col], a[piv] = a[piv], a[col]
        for r in range(col + 1, n):
            f = a[r][col] / a[col][col]
            for c in range(col, n + 1):
                a[r][c] -= f * a[col][c]
    x = [0.0] * n
    for r in range(n - 1, -1, -1):
        x[r] = (a[r][n] - sum(a[r][c] * x[c] for c in range(r + 1, n))) / a[r][r]
    return np.array(x)


class TestRidge:
    def test_recovers_exact_line(self, affine_samples):
        m = train_ridge(affine_samples, 0.0)
        assert m.weights[0][:, 0] == pytest.approx([2.0, 0.0, 0.0], abs=1e-6)
        assert m.biases[0][0] == pytest.approx(5.0, abs=1e-6)

    def test_affine_training_mae(self, affine_samples):
        m = train_ridge(affine_samples, 0.0)
        pred = m.predict_samples(affine_samples)
        assert np.mean(np.abs(pred - [s.ca_label for s in affine_samples])) < 1e-6

    def test_huge_penalty_gives_mean(self, affine_samples):
        m = train_ridge(affine_samples, 1e15)
        assert np.abs(m.weights[0]).max() < 1e-9
        assert m.biases[0][0] == pytest.approx(np.mean([s.ca_label for s in affine_samples]), abs=1e-6)

    def test_matches_gaussian_elimination(self):
        rng = np.random.default_rng(7)
        samples = [
            make_sample(f"p{i}", 0, 60 + rng.normal(0, 5), tuple(rng.normal(size=3)), int(rng.integers(0, 2)))
            for i in range(50)
        ]
        lam = 0.3
        m = train_ridge(samples, lam)
        x = design_matrix(samples)
        y = np.array([s.ca_label for s in samples])
        a = np.hstack([np.ones((50, 1)), x])
        penalty = np.diag([0.0] + [lam] * x.shape[1])
        coef = gauss_solve(a.T @ a + penalty, a.T @ y)
        resid_oracle = y - a @ coef
        resid = y - m.predict_samples(samples)
        np.testing.assert_allclose(resid, resid_oracle, atol=1e-8)

    def test_singular_without_penalty(self):
        samples = [make_sample(f"p{i}", 0, 50 + i, (float(i), float(i)), i % 2) for i in range(10)]
        with pytest.raises(SingularSystemError):
            train_ridge(samples, 0.0)
        train_ridge(samples, 1e-3)

    def test_order_invariant(self, affine_samples):
        a = train_ridge(affine_samples, 0.5)
        b = train_ridge(affine_samples[::-1], 0.5)
        np.testing.assert_array_equal(a.predict_samples(affine_samples), b.predict_samples(affine_samples))


class TestPredict:
    def test_zero_weight_model(self):
        m = constant_model(3, 42.5)
        assert predict(m, make_sample(features=(1.0, -7.0))) == 42.5
        assert predict(m, make_sample(features=(100.0, 3.0), gender=1)) == 42.5

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError, match="dimension"):
            predict(constant_model(3, 1.0), make_sample(features=(1.0,)))


class TestNetwork:
    def test_affine_recovery(self, affine_samples):
        cfg = RegressorConfig(hidden_layer_sizes=(16, 8), epochs=1000, batch_size=16)
        m = train(affine_samples, cfg)
        labels = np.array([s.ca_label for s in affine_samples])
        err = np.abs(m.predict_samples(affine_samples) - labels)
        assert err.mean() < 0.5
        assert err.max() < 1.0

    def test_single_sample_fit(self):
        s = make_sample(ca=63.0, features=(0.3, -1.2))
        m = train([s], RegressorConfig(hidden_layer_sizes=(8,), epochs=500))
        assert predict(m, s) == pytest.approx(63.0, abs=0.1)

    def test_deterministic(self, affine_samples):
        a = train(affine_samples, FAST)
        b = train(list(reversed(affine_samples)), FAST)
        assert a.dumps() == b.dumps()

    def test_seed_changes_model(self, affine_samples):
        assert train(affine_samples, FAST).dumps() != train(affine_samples, FAST.with_seed(1)).dumps()

    def test_loss_trace(self, affine_samples):
        m = train(affine_samples, FAST)
        assert len(m.loss_trace) == FAST.epochs
        assert np.all(np.isfinite(m.loss_trace))
        assert m.loss_trace[-1] <= m.loss_trace[0]

    def test_divergence_is_an_error(self, affine_samples):
        cfg = RegressorConfig(hidden_layer_sizes=(4,), epochs=3, learning_rate=1e306)
        with np.errstate(all="ignore"), pytest.raises(TrainingDivergedError):
            train(affine_samples, cfg)

    def test_rejects_bad_samples(self):
        with pytest.raises(ValueError):
            train([], FAST)
        with pytest.raises(DataFormatError):
            train([make_sample(features=(float("inf"),))], FAST)

    def test_gender_offset_is_learned(self):
        # apparent age = BA + 3 * gender; flipping gender at fixed features
        # must move the prediction toward the other gender's regime
        spec = CohortSpec(
            groups=(GroupSpec("typical", 120),), chunks_per_patient=4, feature_dim=2,
            informative_dims=1, feature_noise_sd=0.0, chunk_offset_sd=0.0, gender_effect=3.0,
        )
        ds, _ = generate(spec)
        m = train(ds, RegressorConfig(hidden_layer_sizes=(16,), epochs=150, batch_size=32))
        inner = [s for s in ds if 60 < s.ca_label < 85]
        from dataclasses import replace

        diffs = [
            predict(m, replace(s, gender=1 - s.gender)) - predict(m, s) for s in inner
        ]
        signs = np.array([-1 if s.gender == 0 else 1 for s in inner])
        shift = np.array(diffs) * signs
        assert np.mean(shift) == pytest.approx(3.0, abs=1.0)

    def test_config_validation(self):
        for bad in (dict(loss="mse"), dict(kind="cnn"), dict(learning_rate=0), dict(epochs=0),
                    dict(hidden_layer_sizes=(0,)), dict(l2_weight=-1), dict(seed=-1)):
            with pytest.raises(ValueError):
                RegressorConfig(**bad)


class TestPersistence:
    def test_round_trip_is_bit_exact(self, affine_samples):
        m = train(affine_samples, FAST)
        loaded = RegressorModel.loads(m.dumps())
        np.testing.assert_array_equal(loaded.predict_samples(affine_samples), m.predict_samples(affine_samples))
        assert loaded.dumps() == m.dumps()

    def test_rejects_unknown_schema(self, affine_samples):
        d = train_ridge(affine_samples, 1.0).to_dict()
        d["schema_version"] = 99
        with pytest.raises(DataFormatError):
            RegressorModel.from_dict(d)


def _random_samples(rng, n, d):
    return [
        make_sample(f"p{i}", 0, float(rng.uniform(40, 90)), tuple(rng.normal(size=d)), int(rng.integers(0, 2)))
        for i in range(n)
    ]


class TestGradientCheck:
    def test_linear_model(self):
        rng = np.random.default_rng(1)
        samples = _random_samples(rng, 20, 3)
        model = init_model(4, RegressorConfig(hidden_layer_sizes=(), seed=3))
        model.output_shift, model.output_scale = 65.0, 15.0
        rep = gradient_check(model, samples, 1e-4, l2_weight=0.01)
        assert rep.passed, rep
        assert rep.n_samples_used == 20

    def test_kink_samples_are_excluded(self):
        model = constant_model(2, 0.0)
        model.weights[0][:] = [[1.0], [0.0]]
        at_kink = make_sample("a", 0, 50.0, (50.0,))
        away = make_sample("b", 0, 50.0, (53.0,))
        rep = gradient_check(model, [at_kink, away], 1e-4)
        assert rep.n_samples_excluded == 1 and rep.n_samples_used == 1
        assert rep.passed

    def test_two_hidden_layer_net(self):
        rng = np.random.default_rng(2)
        samples = _random_samples(rng, 20, 4)
        model = init_model(5, RegressorConfig(hidden_layer_sizes=(8, 6), seed=11))
        model.output_shift, model.output_scale = 65.0, 15.0
        rep = gradient_check(model, samples, 1e-4, l2_weight=1e-3)
        assert rep.passed, rep
        assert rep.max_rel_discrepancy < 1e-4

    def test_detects_a_wrong_gradient(self, monkeypatch):
        from bioage import regressor

        rng = np.random.default_rng(4)
        samples = _random_samples(rng, 15, 3)
        model = init_model(4, RegressorConfig(hidden_layer_sizes=(5,), seed=2))
        model.output_shift, model.output_scale = 65.0, 15.0
        real = regressor.loss_and_gradients

        def off_by_one_percent(*args, **kwargs):
            loss, gw, gb, resid, pre = real(*args, **kwargs)
            if gw is not None:
                gw = [g * 1.01 for g in gw]
            return loss, gw, gb, resid, pre

        monkeypatch.setattr(regressor, "loss_and_gradients", off_by_one_percent)
        rep = gradient_check(model, samples, 1e-4)
        assert not rep.passed and rep.max_rel_discrepancy == pytest.approx(0.01, rel=0.05)

    def test_trained_model(self, affine_samples):
        m = train(affine_samples, RegressorConfig(hidden_layer_sizes=(8, 4), epochs=20, l2_weight=1e-4))
        rep = gradient_check(m, affine_samples[:20])
        assert rep.passed, rep
