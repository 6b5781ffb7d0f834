"""Supervised learners: closed-form weighted ridge and a small feedforward net.

Both produce a :class:`FittedModel` with a uniform prediction contract.  The
net is trained with plain mini-batch momentum descent (no adaptive optimizer)
so that fits are bit-reproducible from the seed.  Four losses are supported:
mean squared error, softmax cross-entropy, per-dimension binary cross-entropy,
and the residualized effect loss ``(y_res - t_res . theta(x))^2`` used by the
orthogonal pipeline.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .errors import ConfigError, DivergenceError, NumericalError, ValidationError
from .timeseries import FeatureStats

MSE = "mse"
SOFTMAX_CE = "softmax_cross_entropy"
BINARY_CE = "binary_cross_entropy_per_dim"
RLOSS = "rloss"
LOSS_KINDS = (MSE, SOFTMAX_CE, BINARY_CE, RLOSS)


@dataclass(frozen=True)
class LearnerSpec:
    """Configuration of a learner; ``kind`` is ``ridge`` or ``mlp``."""

    kind: str = "ridge"
    loss: str = MSE
    output_dim: int = 1
    ridge_lambda: float = 1e-3
    ridge_pinv: bool = False
    mlp_hidden: tuple[int, ...] = (64, 64)
    mlp_epochs: int = 200
    mlp_batch: int = 256
    mlp_lr: float = 1e-3
    mlp_momentum: float = 0.9
    seed: int = 0
    clip_output: float | None = None

    def __post_init__(self):
        if self.kind not in ("ridge", "mlp"):
            raise ConfigError(f"unknown learner kind {self.kind!r}")
        if self.loss not in LOSS_KINDS:
            raise ConfigError(f"unknown loss {self.loss!r}")
        if self.output_dim < 1:
            raise ConfigError("output_dim must be >= 1")
        if self.ridge_lambda < 0:
            raise ConfigError("ridge_lambda must be >= 0")
        if self.mlp_epochs < 0:
            raise ConfigError("mlp_epochs must be >= 0")
        if self.mlp_batch < 1:
            raise ConfigError("mlp_batch must be >= 1")
        object.__setattr__(self, "mlp_hidden", tuple(int(h) for h in self.mlp_hidden))


@dataclass
class FittedModel:
    """A trained learner: the spec, parameter arrays, and the loss trace.

    For ridge models ``parameters`` is ``[intercept (q,), coef (p, q)]``.
    For nets it is ``[W1, b1, W2, b2, ...]``.
    """

    spec: LearnerSpec
    parameters: list[np.ndarray]
    train_stats: FeatureStats | None = None
    training_loss_trace: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def input_dim(self) -> int:
        if self.spec.kind == "ridge":
            return self.parameters[1].shape[0]
        return self.parameters[0].shape[0]

    def predict(self, X: np.ndarray) -> np.ndarray:
        return predict(self, X)


# ---------------------------------------------------------------------------
# Ridge
# ---------------------------------------------------------------------------


def fit_ridge(
    X: np.ndarray,
    y: np.ndarray,
    weights: np.ndarray | None = None,
    lam: float = 0.0,
    allow_pinv: bool = False,
    spec: LearnerSpec | None = None,
) -> FittedModel:
    """Weighted ridge regression solved exactly via the normal equations.

    Minimizes ``sum_i w~_i ||y_i - b0 - B x_i||^2 + lam * ||B||_F^2`` with the
    intercept unpenalized.  Weights are rescaled internally to mean 1, which
    makes fitted values invariant to a uniform positive rescaling of the
    weights and keeps ``lam`` comparable across problems of different weight
    scales (for unit weights the objective is exactly the formula above).
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if X.ndim != 2:
        raise ValidationError(f"X must be 2-d, got shape {X.shape}")
    n, p = X.shape
    if n < 1:
        raise ValidationError("need at least one sample")
    squeeze = y.ndim == 1
    if squeeze:
        y = y[:, None]
    if y.shape[0] != n:
        raise ValidationError(f"X has {n} rows but y has {y.shape[0]}")
    if weights is None:
        w = np.ones(n)
    else:
        w = np.asarray(weights, dtype=float)
        if w.shape != (n,):
            raise ValidationError(f"weights must have shape ({n},)")
        if np.any(w < 0):
            raise ValidationError("weights must be nonnegative")
    total = w.sum()
    if total <= 0:
        raise ValidationError("weights must not be all zero")
    if lam < 0:
        raise ValidationError("lam must be >= 0")
    w = w * (n / total)

    Xa = np.hstack([np.ones((n, 1)), X])
    wXa = Xa * w[:, None]
    A = Xa.T @ wXa
    penalty = np.full(p + 1, lam)
    penalty[0] = 0.0
    A[np.diag_indices_from(A)] += penalty
    b = wXa.T @ y
    try:
        beta = np.linalg.solve(A, b)
    except np.linalg.LinAlgError:
        if not allow_pinv:
            raise NumericalError(
                "singular normal equations at this lambda; enable the pseudo-inverse "
                "fallback or use lam > 0"
            )
        beta = np.linalg.pinv(A) @ b

    if spec is None:
        spec = LearnerSpec(
            kind="ridge", loss=MSE, output_dim=y.shape[1], ridge_lambda=lam, ridge_pinv=allow_pinv
        )
    return FittedModel(spec=spec, parameters=[beta[0].copy(), beta[1:].copy()])


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------


def _loss_and_grad(loss: str, outputs: np.ndarray, targets) -> tuple[float, np.ndarray]:
    """Mean loss over the batch and its gradient w.r.t. the raw outputs."""
    n = outputs.shape[0]
    if loss == MSE:
        y = np.asarray(targets, dtype=float)
        if y.ndim == 1:
            y = y[:, None]
        diff = outputs - y
        return float(np.sum(diff * diff) / n), 2.0 * diff / n
    if loss == SOFTMAX_CE:
        y = np.asarray(targets, dtype=float)
        shifted = outputs - outputs.max(axis=1, keepdims=True)
        logz = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        logp = shifted - logz
        value = -float(np.sum(y * logp) / n)
        return value, (np.exp(logp) - y) / n
    if loss == BINARY_CE:
        y = np.asarray(targets, dtype=float)
        # elementwise stable form: max(o,0) - o*y + log(1 + exp(-|o|))
        value = float(
            np.sum(np.maximum(outputs, 0.0) - outputs * y + np.log1p(np.exp(-np.abs(outputs)))) / n
        )
        p = _sigmoid(outputs)
        return value, (p - y) / n
    if loss == RLOSS:
        y_res, t_res = targets
        y_res = np.asarray(y_res, dtype=float)
        t_res = np.asarray(t_res, dtype=float)
        r = y_res - np.sum(t_res * outputs, axis=1)
        return float(np.sum(r * r) / n), -2.0 * r[:, None] * t_res / n
    raise ConfigError(f"unknown loss {loss!r}")


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


# ---------------------------------------------------------------------------
# Feedforward net
# ---------------------------------------------------------------------------


def _init_layers(rng: np.random.Generator, dims: list[int], zero_last: bool) -> list[np.ndarray]:
    params: list[np.ndarray] = []
    for i in range(len(dims) - 1):
        fan_in = dims[i]
        W = rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=(dims[i], dims[i + 1]))
        b = np.zeros(dims[i + 1])
        params.extend([W, b])
    if zero_last:
        params[-2] = np.zeros_like(params[-2])
    return params


def _forward(params: list[np.ndarray], X: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
    """Raw outputs plus per-layer activations (needed for backprop)."""
    activations = [X]
    a = X
    n_layers = len(params) // 2
    for i in range(n_layers):
        z = a @ params[2 * i] + params[2 * i + 1]
        if i < n_layers - 1:
            a = np.tanh(z)
            activations.append(a)
        else:
            a = z
    return a, activations


def _backward(
    params: list[np.ndarray], activations: list[np.ndarray], grad_out: np.ndarray
) -> list[np.ndarray]:
    n_layers = len(params) // 2
    grads: list[np.ndarray] = [np.zeros(0)] * len(params)
    delta = grad_out
    for i in reversed(range(n_layers)):
        a_prev = activations[i]
        grads[2 * i] = a_prev.T @ delta
        grads[2 * i + 1] = delta.sum(axis=0)
        if i > 0:
            delta = (delta @ params[2 * i].T) * (1.0 - a_prev * a_prev)
    return grads


def _batch_slice(X, targets, idx):
    if isinstance(targets, tuple):
        return X[idx], (targets[0][idx], targets[1][idx])
    return X[idx], targets[idx]


def fit_mlp(X: np.ndarray, targets, spec: LearnerSpec) -> FittedModel:
    """Train a feedforward net (tanh hidden layers) with momentum descent.

    ``targets`` is an array for mse / cross-entropy losses, or a tuple
    ``(y_res, t_res)`` for the residualized effect loss.  Shuffling is seeded
    by ``spec.seed``; identical spec + seed + data give bit-identical
    parameters.  Raises :class:`DivergenceError` with the epoch index if the
    loss goes non-finite.
    """
    if spec.kind != "mlp":
        raise ConfigError(f"fit_mlp requires an mlp spec, got {spec.kind!r}")
    if spec.mlp_lr <= 0:
        raise ConfigError("no progress possible: mlp_lr must be > 0")
    X = np.asarray(X, dtype=float)
    n = X.shape[0]
    if n < 1:
        raise ValidationError("need at least one sample")

    dims = [X.shape[1], *spec.mlp_hidden, spec.output_dim]
    rng = np.random.default_rng(spec.seed)
    # the output layer starts at zero so training begins at the neutral
    # prediction (uniform probabilities, zero effect); random output-layer
    # init would bake an arbitrary function of the features into the model
    params = _init_layers(rng, dims, zero_last=True)
    velocity = [np.zeros_like(p) for p in params]

    trace: list[float] = []
    if spec.mlp_epochs == 0:
        out, _ = _forward(params, X)
        value, _ = _loss_and_grad(spec.loss, out, targets)
        trace.append(value)
    for epoch in range(spec.mlp_epochs):
        perm = rng.permutation(n)
        epoch_loss = 0.0
        for start in range(0, n, spec.mlp_batch):
            idx = perm[start : start + spec.mlp_batch]
            xb, tb = _batch_slice(X, targets, idx)
            out, acts = _forward(params, xb)
            value, grad_out = _loss_and_grad(spec.loss, out, tb)
            epoch_loss += value * len(idx)
            grads = _backward(params, acts, grad_out)
            for j, g in enumerate(grads):
                velocity[j] = spec.mlp_momentum * velocity[j] - spec.mlp_lr * g
                params[j] = params[j] + velocity[j]
        epoch_loss /= n
        if not np.isfinite(epoch_loss):
            raise DivergenceError("training diverged to a non-finite loss", epoch=epoch + 1)
        trace.append(epoch_loss)

    return FittedModel(spec=spec, parameters=params, training_loss_trace=np.array(trace))


def predict(model: FittedModel, X: np.ndarray) -> np.ndarray:
    """Deterministic prediction; classification heads return probabilities."""
    X = np.asarray(X, dtype=float)
    if X.ndim != 2:
        raise ValidationError(f"X must be 2-d, got shape {X.shape}")
    if X.shape[1] != model.input_dim:
        raise ValidationError(
            f"X has {X.shape[1]} columns but the model was trained with {model.input_dim}"
        )
    if X.shape[0] == 0:
        return np.zeros((0, model.spec.output_dim))
    if model.spec.kind == "ridge":
        intercept, coef = model.parameters
        out = X @ coef + intercept
    else:
        out, _ = _forward(model.parameters, X)
        if model.spec.loss == SOFTMAX_CE:
            shifted = out - out.max(axis=1, keepdims=True)
            ez = np.exp(shifted)
            out = ez / ez.sum(axis=1, keepdims=True)
        elif model.spec.loss == BINARY_CE:
            out = _sigmoid(out)
    if model.spec.clip_output is not None:
        out = np.clip(out, -model.spec.clip_output, model.spec.clip_output)
    return out


def gradient_check(model: FittedModel, loss: str, batch, fd_step: float = 1e-5) -> float:
    """Max relative discrepancy between backprop and central finite differences.

    ``batch`` is ``(X, targets)`` in the shapes :func:`fit_mlp` consumes.
    Models with no gradient path (ridge, fitted in closed form) return 0.
    """
    if model.spec.kind != "mlp":
        return 0.0
    X, targets = batch
    X = np.asarray(X, dtype=float)
    params = [p.copy() for p in model.parameters]
    out, acts = _forward(params, X)
    _, grad_out = _loss_and_grad(loss, out, targets)
    analytic = _backward(params, acts, grad_out)

    worst = 0.0
    for j, p in enumerate(params):
        flat = p.reshape(-1)
        for idx in range(flat.size):
            orig = flat[idx]
            flat[idx] = orig + fd_step
            up, _ = _loss_and_grad(loss, _forward(params, X)[0], targets)
            flat[idx] = orig - fd_step
            down, _ = _loss_and_grad(loss, _forward(params, X)[0], targets)
            flat[idx] = orig
            fd = (up - down) / (2.0 * fd_step)
            a = analytic[j].reshape(-1)[idx]
            err = abs(a - fd) / max(abs(a), abs(fd), 1e-6)
            worst = max(worst, err)
    return worst


# ---------------------------------------------------------------------------
# Serialization (versioned JSON: reloadable from any language)
# ---------------------------------------------------------------------------

MODEL_FORMAT_VERSION = 1


def model_to_dict(model: FittedModel) -> dict:
    spec = asdict(model.spec)
    spec["mlp_hidden"] = list(model.spec.mlp_hidden)
    return {
        "format_version": MODEL_FORMAT_VERSION,
        "spec": spec,
        "parameters": [p.tolist() for p in model.parameters],
        "train_stats": None
        if model.train_stats is None
        else {"mean": model.train_stats.mean.tolist(), "std": model.train_stats.std.tolist()},
        "training_loss_trace": model.training_loss_trace.tolist(),
    }


def model_from_dict(payload: dict) -> FittedModel:
    if payload.get("format_version") != MODEL_FORMAT_VERSION:
        raise ConfigError(f"unsupported model format version {payload.get('format_version')!r}")
    spec_dict = dict(payload["spec"])
    spec_dict["mlp_hidden"] = tuple(spec_dict.get("mlp_hidden", ()))
    spec = LearnerSpec(**spec_dict)
    stats = payload.get("train_stats")
    return FittedModel(
        spec=spec,
        parameters=[np.asarray(p, dtype=float) for p in payload["parameters"]],
        train_stats=None
        if stats is None
        else FeatureStats(mean=np.asarray(stats["mean"]), std=np.asarray(stats["std"])),
        training_loss_trace=np.asarray(payload.get("training_loss_trace", []), dtype=float),
    )


def save_model(model: FittedModel, path: str | Path) -> None:
    Path(path).write_text(json.dumps(model_to_dict(model)) + "\n")


def load_model(path: str | Path) -> FittedModel:
    return model_from_dict(json.loads(Path(path).read_text()))
