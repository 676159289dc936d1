"""Age regressors: a gender-conditioned ReLU network trained with Adam on MAE,
and a closed-form ridge solver used as a deterministic oracle.

Both produce a :class:`RegressorModel`; a ridge model is simply a network
without hidden layers. Gender is appended to the feature vector as the last
input column.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from bioage.core import ChunkSample, DataFormatError, canonical_order

MODEL_SCHEMA_VERSION = 1


class TrainingDivergedError(RuntimeError):
    pass


class SingularSystemError(np.linalg.LinAlgError):
    pass


@dataclass(frozen=True)
class RegressorConfig:
    kind: str = "mlp"  # "mlp" or "ridge"
    hidden_layer_sizes: tuple[int, ...] = (64, 32)
    learning_rate: float = 1e-3
    epochs: int = 200
    batch_size: int = 256
    l2_weight: float = 1e-5
    seed: int = 0
    loss: str = "mae"

    def __post_init__(self):
        object.__setattr__(self, "hidden_layer_sizes", tuple(int(h) for h in self.hidden_layer_sizes))
        if self.kind not in ("mlp", "ridge"):
            raise ValueError(f"unknown regressor kind {self.kind!r}")
        if self.loss != "mae":
            raise ValueError("only the mean-absolute-error loss is supported")
        if any(h <= 0 for h in self.hidden_layer_sizes):
            raise ValueError("hidden layer sizes must be positive")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.epochs <= 0 or self.batch_size <= 0:
            raise ValueError("epochs and batch_size must be positive")
        if not self.l2_weight >= 0:
            raise ValueError("l2_weight must be nonnegative")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden_layer_sizes"] = list(self.hidden_layer_sizes)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RegressorConfig":
        return cls(**d)

    def with_seed(self, seed: int) -> "RegressorConfig":
        return RegressorConfig(**{**self.to_dict(), "seed": int(seed)})


@dataclass
class RegressorModel:
    """Feedforward predictor with fixed input/output standardization.

    ``weights[l]`` has shape ``(layer_sizes[l], layer_sizes[l + 1])``.
    Prediction in years is ``output_shift + output_scale * net(x_std)`` with
    ``x_std = (x - input_shift) / input_scale``.
    """

    layer_sizes: list[int]
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    input_shift: np.ndarray
    input_scale: np.ndarray
    output_shift: float = 0.0
    output_scale: float = 1.0
    config: dict = field(default_factory=dict)
    loss_trace: list[float] = field(default_factory=list)

    @property
    def input_dim(self) -> int:
        return self.layer_sizes[0]

    @property
    def n_parameters(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def forward(self, x_std: np.ndarray) -> np.ndarray:
        a = x_std
        last = len(self.weights) - 1
        for l, (w, b) in enumerate(zip(self.weights, self.biases)):
            a = a @ w + b
            if l < last:
                a = np.maximum(a, 0.0)
        return a[:, 0]

    def standardize(self, x: np.ndarray) -> np.ndarray:
        return (x - self.input_shift) / self.input_scale

    def predict_array(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.input_dim:
            raise ValueError(
                f"input dimension mismatch: model expects {self.input_dim - 1} features + gender, "
                f"got array of shape {x.shape}"
            )
        return self.output_shift + self.output_scale * self.forward(self.standardize(x))

    def predict_samples(self, samples: Sequence[ChunkSample]) -> np.ndarray:
        return self.predict_array(design_matrix(samples))

    # -- persistence -------------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "schema_version": MODEL_SCHEMA_VERSION,
            "layer_sizes": list(self.layer_sizes),
            "weights": [w.ravel(order="C").tolist() for w in self.weights],
            "biases": [b.tolist() for b in self.biases],
            "input_shift": self.input_shift.tolist(),
            "input_scale": self.input_scale.tolist(),
            "output_shift": self.output_shift,
            "output_scale": self.output_scale,
            "config": self.config,
            "loss_trace": list(self.loss_trace),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RegressorModel":
        if d.get("schema_version") != MODEL_SCHEMA_VERSION:
            raise DataFormatError(f"unsupported model schema {d.get('schema_version')!r}")
        sizes = [int(s) for s in d["layer_sizes"]]
        weights = [
            np.asarray(w, dtype=np.float64).reshape(sizes[l], sizes[l + 1])
            for l, w in enumerate(d["weights"])
        ]
        return cls(
            layer_sizes=sizes,
            weights=weights,
            biases=[np.asarray(b, dtype=np.float64) for b in d["biases"]],
            input_shift=np.asarray(d["input_shift"], dtype=np.float64),
            input_scale=np.asarray(d["input_scale"], dtype=np.float64),
            output_shift=float(d["output_shift"]),
            output_scale=float(d["output_scale"]),
            config=dict(d.get("config", {})),
            loss_trace=[float(v) for v in d.get("loss_trace", [])],
        )

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"

    @classmethod
    def loads(cls, text: str) -> "RegressorModel":
        return cls.from_dict(json.loads(text))


def design_matrix(samples: Sequence[ChunkSample]) -> np.ndarray:
    """Stack features with gender appended as the last column."""
    if len(samples) == 0:
        raise ValueError("no samples")
    x = np.array([s.features + (float(s.gender),) for s in samples], dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise DataFormatError("non-finite feature values")
    return x


def _labels(samples: Sequence[ChunkSample]) -> np.ndarray:
    y = np.array([s.ca_label for s in samples], dtype=np.float64)
    if not np.all(np.isfinite(y)):
        raise DataFormatError("non-finite labels")
    return y


def predict(model: RegressorModel, sample: ChunkSample) -> float:
    """Predicted age in years for a single chunk."""
    return float(model.predict_samples([sample])[0])


def constant_model(input_dim: int, value: float) -> RegressorModel:
    """Zero-weight linear model that predicts ``value`` for every input."""
    return RegressorModel(
        layer_sizes=[input_dim, 1],
        weights=[np.zeros((input_dim, 1))],
        biases=[np.array([float(value)])],
        input_shift=np.zeros(input_dim),
        input_scale=np.ones(input_dim),
    )


# -- loss and gradients ------------------------------------------------------


def loss_and_gradients(
    weights: Sequence[np.ndarray],
    biases: Sequence[np.ndarray],
    x: np.ndarray,
    t: np.ndarray,
    l2_weight: float,
    *,
    need_grad: bool = True,
):
    """Mean absolute error of the network output against ``t`` plus an L2
    penalty on the weight matrices (biases are not penalized).

    The absolute-value subgradient at zero residual is taken as 0.
    Returns ``(loss, grad_w, grad_b, residual, pre_activations)``.
    """
    acts = [x]
    pre = []
    a = x
    last = len(weights) - 1
    for l, (w, b) in enumerate(zip(weights, biases)):
        z = a @ w + b
        pre.append(z)
        a = np.maximum(z, 0.0) if l < last else z
        acts.append(a)
    resid = acts[-1][:, 0] - t
    n = t.shape[0]
    loss = float(np.mean(np.abs(resid)))
    if l2_weight:
        loss += l2_weight * sum(float(np.sum(w * w)) for w in weights)
    if not need_grad:
        return loss, None, None, resid, pre

    delta = (np.sign(resid) / n)[:, None]
    grad_w = [None] * len(weights)
    grad_b = [None] * len(weights)
    for l in range(last, -1, -1):
        grad_w[l] = acts[l].T @ delta
        if l2_weight:
            grad_w[l] = grad_w[l] + 2.0 * l2_weight * weights[l]
        grad_b[l] = delta.sum(axis=0)
        if l > 0:
            delta = (delta @ weights[l].T) * (pre[l - 1] > 0)
    return loss, grad_w, grad_b, resid, pre


def _init_network(sizes: Sequence[int], rng: np.random.Generator):
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        limit = math.sqrt(6.0 / fan_in)
        weights.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return weights, biases


def _scalers(x: np.ndarray, y: np.ndarray):
    shift = x.mean(axis=0)
    scale = x.std(axis=0)
    scale[scale < 1e-12] = 1.0
    y_shift = float(y.mean())
    y_scale = float(y.std())
    if y_scale < 1e-12:
        y_scale = 1.0
    return shift, scale, y_shift, y_scale


# -- training ----------------------------------------------------------------


def train(samples: Sequence[ChunkSample], config: RegressorConfig) -> RegressorModel:
    """Fit a regressor on the chunk samples' CA labels.

    Samples are put into canonical (patient, scan, chunk) order first, so the
    result depends only on the sample set and the config.
    """
    if len(samples) == 0:
        raise ValueError("cannot train on zero samples")
    if config.kind == "ridge":
        return train_ridge(samples, config.l2_weight, config=config)
    return _train_mlp(canonical_order(samples), config)


def _train_mlp(samples: list[ChunkSample], config: RegressorConfig) -> RegressorModel:
    x_raw = design_matrix(samples)
    y = _labels(samples)
    shift, scale, y_shift, y_scale = _scalers(x_raw, y)
    x = (x_raw - shift) / scale
    t = (y - y_shift) / y_scale

    rng = np.random.default_rng(config.seed)
    sizes = [x.shape[1], *config.hidden_layer_sizes, 1]
    weights, biases = _init_network(sizes, rng)
    params = [*weights, *biases]
    m = [np.zeros_like(p) for p in params]
    v = [np.zeros_like(p) for p in params]
    beta1, beta2, eps = 0.9, 0.999, 1e-8
    lr = config.learning_rate
    n = x.shape[0]
    bs = min(config.batch_size, n)
    nw = len(weights)
    step = 0
    trace: list[float] = []

    for epoch in range(config.epochs):
        order = rng.permutation(n)
        abs_sum = 0.0
        for start in range(0, n, bs):
            idx = order[start : start + bs]
            _, gw, gb, resid, _ = loss_and_gradients(weights, biases, x[idx], t[idx], config.l2_weight)
            abs_sum += float(np.sum(np.abs(resid)))
            step += 1
            c1 = 1.0 - beta1**step
            c2 = 1.0 - beta2**step
            for i, g in enumerate((*gw, *gb)):
                m[i] *= beta1
                m[i] += (1.0 - beta1) * g
                v[i] *= beta2
                v[i] += (1.0 - beta2) * (g * g)
                params[i] -= lr * (m[i] / c1) / (np.sqrt(v[i] / c2) + eps)
        epoch_mae = abs_sum / n * y_scale
        if not math.isfinite(epoch_mae):
            raise TrainingDivergedError(f"non-finite training loss at epoch {epoch}")
        trace.append(epoch_mae)

    return RegressorModel(
        layer_sizes=sizes,
        weights=params[:nw],
        biases=params[nw:],
        input_shift=shift,
        input_scale=scale,
        output_shift=y_shift,
        output_scale=y_scale,
        config=config.to_dict(),
        loss_trace=trace,
    )


def train_ridge(
    samples: Sequence[ChunkSample],
    l2_weight: float,
    *,
    config: RegressorConfig | None = None,
) -> RegressorModel:
    """Closed-form ridge regression with an unpenalized intercept.

    Solves ``(Xc^T Xc + l2_weight * I) beta = Xc^T yc`` on centered data.
    Raises :class:`SingularSystemError` when the system is singular, which
    can only happen with ``l2_weight == 0``.
    """
    if len(samples) == 0:
        raise ValueError("cannot train on zero samples")
    if l2_weight < 0:
        raise ValueError("l2_weight must be nonnegative")
    samples = canonical_order(samples)
    x = design_matrix(samples)
    y = _labels(samples)
    x_mean = x.mean(axis=0)
    y_mean = float(y.mean())
    xc = x - x_mean
    gram = xc.T @ xc + l2_weight * np.eye(x.shape[1])
    rhs = xc.T @ (y - y_mean)
    if l2_weight == 0 and np.linalg.cond(gram) > 1e12:
        raise SingularSystemError("normal equations are singular; use l2_weight > 0")
    beta = np.linalg.solve(gram, rhs)
    intercept = y_mean - float(x_mean @ beta)
    pred = x @ beta + intercept
    d = x.shape[1]
    return RegressorModel(
        layer_sizes=[d, 1],
        weights=[beta.reshape(d, 1)],
        biases=[np.array([intercept])],
        input_shift=np.zeros(d),
        input_scale=np.ones(d),
        config=(config or RegressorConfig(kind="ridge", l2_weight=l2_weight)).to_dict(),
        loss_trace=[float(np.mean(np.abs(pred - y)))],
    )


# -- gradient check ---------------------------------------------------------


@dataclass(frozen=True)
class GradientCheckReport:
    passed: bool
    max_rel_discrepancy: float
    tolerance: float
    n_parameters: int
    n_samples_used: int
    n_samples_excluded: int


def _extended_loss(weights, biases, x, t, l2_weight):
    # same objective as loss_and_gradients, kept in the arrays' own dtype
    a = x
    last = len(weights) - 1
    for l, (w, b) in enumerate(zip(weights, biases)):
        z = a @ w + b
        a = np.maximum(z, 0) if l < last else z
    loss = np.mean(np.abs(a[:, 0] - t))
    if l2_weight:
        loss = loss + l2_weight * sum(np.sum(w * w) for w in weights)
    return loss


def gradient_check(
    model: RegressorModel,
    samples: Sequence[ChunkSample],
    tolerance: float = 1e-4,
    *,
    l2_weight: float | None = None,
    step: float = 1e-5,
    kink_margin: float = 1e-3,
) -> GradientCheckReport:
    """Compare analytic loss gradients with central finite differences.

    Samples sitting within ``kink_margin`` of a non-differentiable point
    (zero residual or a zero ReLU pre-activation) are excluded. The
    per-parameter discrepancy is ``|a - n| / max(|a|, |n|, 1e-7)``.

    The difference quotients are evaluated in extended precision: with a
    1e-5 step, float64 roundoff alone is ~1e-11 per quotient, which would
    swamp gradients that are exactly or nearly zero.
    """
    if l2_weight is None:
        l2_weight = float(model.config.get("l2_weight", 0.0))
    x = model.standardize(design_matrix(samples))
    t = (_labels(samples) - model.output_shift) / model.output_scale
    weights = [w.copy() for w in model.weights]
    biases = [b.copy() for b in model.biases]

    _, _, _, resid, pre = loss_and_gradients(weights, biases, x, t, l2_weight, need_grad=False)
    near = np.abs(resid) < kink_margin
    for z in pre[:-1]:
        near |= np.any(np.abs(z) < kink_margin, axis=1)
    keep = ~near
    x, t = x[keep], t[keep]
    n_used = int(keep.sum())
    if n_used == 0:
        return GradientCheckReport(True, 0.0, tolerance, model.n_parameters, 0, int(near.sum()))

    _, gw, gb, _, _ = loss_and_gradients(weights, biases, x, t, l2_weight)
    ext = np.longdouble
    xl, tl, h = x.astype(ext), t.astype(ext), ext(step)
    wl = [w.astype(ext) for w in weights]
    bl = [b.astype(ext) for b in biases]
    worst = 0.0
    for params, grads in ((wl, gw), (bl, gb)):
        for p, g in zip(params, grads):
            flat = p.reshape(-1)
            gflat = g.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                lp = _extended_loss(wl, bl, xl, tl, l2_weight)
                flat[i] = orig - h
                lm = _extended_loss(wl, bl, xl, tl, l2_weight)
                flat[i] = orig
                num = float((lp - lm) / (2 * h))
                ana = float(gflat[i])
                rel = abs(ana - num) / max(abs(ana), abs(num), 1e-7)
                worst = max(worst, rel)
    return GradientCheckReport(
        passed=worst < tolerance,
        max_rel_discrepancy=worst,
        tolerance=tolerance,
        n_parameters=model.n_parameters,
        n_samples_used=n_used,
        n_samples_excluded=int(near.sum()),
    )


def init_model(input_dim: int, config: RegressorConfig) -> RegressorModel:
    """Untrained network with the seeded initialization used by :func:`train`."""
    rng = np.random.default_rng(config.seed)
    sizes = [input_dim, *config.hidden_layer_sizes, 1]
    weights, biases = _init_network(sizes, rng)
    return RegressorModel(
        layer_sizes=sizes,
        weights=weights,
        biases=biases,
        input_shift=np.zeros(input_dim),
        input_scale=np.ones(input_dim),
        config=config.to_dict(),
    )
