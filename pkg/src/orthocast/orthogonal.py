"""Orthogonal learning pipeline: sample splitting, nuisance models, the
residualized effect model, and the combined causal forecaster.

The pipeline follows the two-stage recipe: series are split into disjoint
folds; an outcome-mean model ``m`` and a treatment model ``e`` are fitted on
the first fold; the second fold is residualized (``y_res = Y - m(W)``,
``t_res = enc(T) - e(W)``); and the effect model ``theta`` minimizes the mean
of ``(y_res - t_res . theta(W))^2``.  Forecasts combine all three:

    Y_hat(W, T) = m(W) + (enc(T) - e(W)) . theta(W)

so predictions move causally with the treatment when ``theta`` is close to
the true effect function.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .encodings import (
    CUMULATIVE,
    LINEAR,
    ONE_HOT,
    cate_from_theta,
    check_encoding_kind,
    encode_treatment,
    encoded_dim,
)
from .errors import ConfigError, NoIdentificationError, NumericalError, ValidationError
from .learners import (
    BINARY_CE,
    MSE,
    RLOSS,
    SOFTMAX_CE,
    FittedModel,
    LearnerSpec,
    fit_mlp,
    fit_ridge,
    model_from_dict,
    model_to_dict,
    predict,
)
from .timeseries import (
    Dataset,
    FeatureContext,
    FeatureStats,
    FeaturizerConfig,
    TimeSeries,
    compute_feature_stats,
    featurize,
    forecast_steps,
)


@dataclass
class NuisancePair:
    """Outcome-mean model, treatment model, and the featurization they share."""

    m: FittedModel
    e: FittedModel
    encoding: str
    featurizer: FeaturizerConfig
    stats: FeatureStats | None


@dataclass
class ResidualizedSample:
    features: FeatureContext
    y_tilde: float
    t_tilde: np.ndarray
    t: int
    series_id: str


@dataclass
class CausalForecaster:
    nuisance: NuisancePair
    theta: FittedModel
    encoding: str

    @property
    def featurizer(self) -> FeaturizerConfig:
        return self.nuisance.featurizer

    @property
    def stats(self) -> FeatureStats | None:
        return self.nuisance.stats

    def context(self, series: TimeSeries, t: int) -> FeatureContext:
        return featurize(series, t, self.featurizer, self.stats)


@dataclass
class AveragedForecaster:
    """Cross-fitted pair of forecasters whose predictions are averaged."""

    members: list[CausalForecaster]

    @property
    def encoding(self) -> str:
        return self.members[0].encoding

    def context(self, series: TimeSeries, t: int) -> FeatureContext:
        # members share the featurizer config but have fold-specific stats;
        # each member featurizes with its own stats at prediction time
        raise NotImplementedError("use predict_outcome / predict_cate with the series directly")


def split_sample(ds: Dataset, seed: int) -> tuple[Dataset, Dataset]:
    """Seeded series-level split; the first fold gets floor(N/2) series.

    Splitting whole series (not individual steps) keeps every step of a
    series in one fold, preventing within-series leakage between the
    nuisance and effect stages.
    """
    n = len(ds.series)
    if n < 2:
        raise ValidationError("need at least 2 series to split")
    perm = np.random.default_rng(seed).permutation(n)
    half = n // 2
    return ds.subset(sorted(perm[:half])), ds.subset(sorted(perm[half:]))


def _expected_e_loss(encoding: str) -> str:
    return {ONE_HOT: SOFTMAX_CE, CUMULATIVE: BINARY_CE, LINEAR: MSE}[encoding]


def training_rows(
    ds: Dataset, featurizer: FeaturizerConfig, stats: FeatureStats | None
) -> tuple[np.ndarray, np.ndarray, np.ndarray, list[tuple[str, int]]]:
    """Stack (features, outcome, treatment) over every forecast step of ``ds``."""
    xs, ys, ts, keys = [], [], [], []
    for s in ds.series:
        for t in forecast_steps(s):
            xs.append(featurize(s, t, featurizer, stats).values)
            ys.append(s.outcome_at(t))
            ts.append(s.treatment_at(t))
            keys.append((s.id, t))
    return np.vstack(xs), np.array(ys), np.array(ts), keys


def encode_matrix(treatments: np.ndarray, d: int, encoding: str) -> np.ndarray:
    return np.vstack([encode_treatment(t, d, encoding) for t in treatments])


def _fit_supervised(X: np.ndarray, targets, spec: LearnerSpec) -> FittedModel:
    if spec.kind == "ridge":
        return fit_ridge(
            X, targets, lam=spec.ridge_lambda, allow_pinv=spec.ridge_pinv, spec=spec
        )
    return fit_mlp(X, targets, spec)


def fit_nuisance(
    S1: Dataset,
    encoding: str,
    m_spec: LearnerSpec,
    e_spec: LearnerSpec,
    featurizer: FeaturizerConfig,
) -> NuisancePair:
    """Fit the outcome-mean and treatment models on the first fold.

    ``m`` is trained with MSE on (W_t, Y_t); ``e`` on (W_t, enc(T_t)) with
    the encoding-appropriate loss (softmax cross-entropy for one-hot,
    per-dimension binary cross-entropy for cumulative, MSE for linear).
    Normalization statistics are computed on this fold and stored for reuse
    on every later fold and at prediction time.
    """
    encoding = check_encoding_kind(encoding)
    if len(S1.series) == 0:
        raise ValidationError("empty nuisance training fold")
    if m_spec.loss != MSE:
        raise ConfigError("the outcome-mean model must use the mse loss")
    expected = _expected_e_loss(encoding)
    if e_spec.loss != expected:
        raise ConfigError(
            f"treatment model loss must be {expected!r} for {encoding!r} encoding, "
            f"got {e_spec.loss!r}"
        )
    if encoding != LINEAR and e_spec.kind == "ridge":
        raise ConfigError("categorical treatment models require an mlp learner")
    q = encoded_dim(encoding, S1.d)
    if m_spec.output_dim != 1:
        raise ConfigError("outcome-mean model must have output_dim = 1")
    if e_spec.output_dim != q:
        raise ConfigError(f"treatment model must have output_dim = {q}")

    stats = compute_feature_stats(S1, featurizer) if featurizer.normalize else None
    X, y, t_obs, _ = training_rows(S1, featurizer, stats)
    m = _fit_supervised(X, y[:, None], m_spec)
    m.train_stats = stats
    if encoding == LINEAR:
        e_targets = t_obs[:, None]
    else:
        e_targets = encode_matrix(t_obs, S1.d, encoding)
    e = _fit_supervised(X, e_targets, e_spec)
    e.train_stats = stats
    return NuisancePair(m=m, e=e, encoding=encoding, featurizer=featurizer, stats=stats)


def residualize(
    S2: Dataset, nuisance: NuisancePair, encoding: str | None = None
) -> list[ResidualizedSample]:
    """One residualized sample per (series, forecast step) of the second fold."""
    encoding = check_encoding_kind(encoding or nuisance.encoding)
    if encoding != nuisance.encoding:
        raise ConfigError(
            f"nuisance pair was fitted for {nuisance.encoding!r}, not {encoding!r}"
        )
    samples: list[ResidualizedSample] = []
    for s in S2.series:
        for t in forecast_steps(s):
            ctx = featurize(s, t, nuisance.featurizer, nuisance.stats)
            row = ctx.values[None, :]
            m_hat = float(predict(nuisance.m, row)[0, 0])
            e_hat = predict(nuisance.e, row)[0]
            enc = encode_treatment(s.treatment_at(t), S2.d, encoding)
            samples.append(
                ResidualizedSample(
                    features=ctx,
                    y_tilde=s.outcome_at(t) - m_hat,
                    t_tilde=enc - e_hat,
                    t=t,
                    series_id=s.id,
                )
            )
    return samples


def _samples_to_arrays(samples: list[ResidualizedSample]):
    X = np.vstack([smp.features.values for smp in samples])
    y_res = np.array([smp.y_tilde for smp in samples])
    t_res = np.vstack([smp.t_tilde for smp in samples])
    return X, y_res, t_res


def fit_theta(samples: list[ResidualizedSample], theta_spec: LearnerSpec) -> FittedModel:
    """Fit the effect model by minimizing the mean residualized loss.

    For a ridge-kind spec the model ``theta(x) = c + A'x`` is linear in the
    features per output dimension, and the minimizer has a closed form: the
    prediction ``t_res . theta(x)`` is linear in ``kron([1, x], t_res)``, so
    the problem reduces to one least-squares solve over that expanded design
    (the constant block ``c`` is left unpenalized, mirroring ridge's free
    intercept).  For an mlp-kind spec the loss gradient ``-2 r t_res`` is
    back-propagated directly.
    """
    if theta_spec.loss != RLOSS:
        raise ConfigError("theta_spec.loss must be 'rloss'")
    if not samples:
        raise ValidationError("no residualized samples to fit on")
    X, y_res, t_res = _samples_to_arrays(samples)
    q = t_res.shape[1]
    if theta_spec.output_dim != q:
        raise ConfigError(
            f"theta output_dim {theta_spec.output_dim} does not match encoding dim {q}"
        )
    if np.max(np.abs(t_res)) < 1e-12:
        raise NoIdentificationError(
            "no identification: treatment residuals are zero for every sample"
        )
    if theta_spec.kind == "mlp":
        return fit_mlp(X, (y_res, t_res), theta_spec)

    n, p = X.shape
    ones = np.ones((n, 1))
    x_aug = np.hstack([ones, X])  # (n, p+1)
    design = (x_aug[:, :, None] * t_res[:, None, :]).reshape(n, (p + 1) * q)
    A = design.T @ design
    penalty = np.full((p + 1) * q, theta_spec.ridge_lambda)
    penalty[:q] = 0.0  # the constant block of theta is unpenalized
    A[np.diag_indices_from(A)] += penalty
    b = design.T @ y_res
    # the system is solved by pseudo-inverse: with one-hot residuals the
    # per-sample residual coordinates sum to zero exactly (probabilities sum
    # to one), so the common level of theta is a null direction of the
    # unpenalized constant block; the minimum-norm solution pins it while
    # leaving every effect difference untouched
    beta = np.linalg.pinv(A) @ b
    coef = beta.reshape(p + 1, q)
    model = FittedModel(spec=theta_spec, parameters=[coef[0].copy(), coef[1:].copy()])
    return model


def empirical_rloss(theta: FittedModel, samples: list[ResidualizedSample]) -> float:
    """Mean squared residualized loss of an effect model over samples."""
    if not samples:
        raise ValidationError("no samples")
    X, y_res, t_res = _samples_to_arrays(samples)
    preds = predict(theta, X)
    r = y_res - np.sum(t_res * preds, axis=1)
    return float(np.sum(np.sort(r * r)) / len(r))


def _forecaster_terms(f: CausalForecaster, W: FeatureContext):
    row = W.values[None, :]
    m_hat = float(predict(f.nuisance.m, row)[0, 0])
    e_hat = predict(f.nuisance.e, row)[0]
    theta_hat = predict(f.theta, row)[0]
    return m_hat, e_hat, theta_hat


def predict_outcome(f, W: FeatureContext, treatment: float) -> float:
    """Causal forecast: ``m(W) + (enc(T) - e(W)) . theta(W)``."""
    if isinstance(f, AveragedForecaster):
        return float(np.mean([predict_outcome(m, W, treatment) for m in f.members]))
    m_hat, e_hat, theta_hat = _forecaster_terms(f, W)
    d = _encoding_cardinality(f)
    enc = encode_treatment(treatment, d, f.encoding)
    return m_hat + float((enc - e_hat) @ theta_hat)


def predict_cate(f, W: FeatureContext, t_from: float, t_to: float) -> float:
    """Model-implied CATE of moving ``t_from`` -> ``t_to`` in context ``W``.

    Identical to the difference of :func:`predict_outcome` at the two
    treatments, but computed directly from the effect vector.
    """
    if isinstance(f, AveragedForecaster):
        return float(np.mean([predict_cate(m, W, t_from, t_to) for m in f.members]))
    row = W.values[None, :]
    theta_hat = predict(f.theta, row)[0]
    return cate_from_theta(theta_hat, t_from, t_to, f.encoding)


def _encoding_cardinality(f: CausalForecaster) -> int:
    return f.theta.spec.output_dim if f.encoding != LINEAR else 1


def fit_causal_forecaster(
    ds: Dataset,
    featurizer: FeaturizerConfig,
    m_spec: LearnerSpec,
    e_spec: LearnerSpec,
    theta_spec: LearnerSpec,
    encoding: str | None = None,
    seed: int = 0,
    cross_fit: bool = False,
):
    """End-to-end training: split, fit nuisances, residualize, fit the effect.

    With ``cross_fit=True`` the fold roles are also swapped and the two
    forecasters' predictions averaged; the default single split follows the
    basic two-stage algorithm.
    """
    encoding = check_encoding_kind(encoding or ds.encoding_kind)
    s1, s2 = split_sample(ds, seed)
    folds = [(s1, s2), (s2, s1)] if cross_fit else [(s1, s2)]
    members = []
    for nuisance_fold, effect_fold in folds:
        nuisance = fit_nuisance(nuisance_fold, encoding, m_spec, e_spec, featurizer)
        samples = residualize(effect_fold, nuisance)
        theta = fit_theta(samples, theta_spec)
        members.append(CausalForecaster(nuisance=nuisance, theta=theta, encoding=encoding))
    if cross_fit:
        return AveragedForecaster(members=members)
    return members[0]


# ---------------------------------------------------------------------------
# Serialization: one artifact bundling the three models + featurization
# ---------------------------------------------------------------------------

FORECASTER_FORMAT_VERSION = 1


def _stats_to_dict(stats: FeatureStats | None):
    if stats is None:
        return None
    return {"mean": stats.mean.tolist(), "std": stats.std.tolist()}


def _stats_from_dict(payload):
    if payload is None:
        return None
    return FeatureStats(mean=np.asarray(payload["mean"]), std=np.asarray(payload["std"]))


def forecaster_to_dict(f) -> dict:
    if isinstance(f, AveragedForecaster):
        return {
            "format_version": FORECASTER_FORMAT_VERSION,
            "type": "averaged",
            "members": [forecaster_to_dict(m) for m in f.members],
        }
    return {
        "format_version": FORECASTER_FORMAT_VERSION,
        "type": "causal_forecaster",
        "encoding": f.encoding,
        "featurizer": asdict(f.nuisance.featurizer),
        "stats": _stats_to_dict(f.nuisance.stats),
        "m": model_to_dict(f.nuisance.m),
        "e": model_to_dict(f.nuisance.e),
        "theta": model_to_dict(f.theta),
    }


def forecaster_from_dict(payload: dict):
    if payload.get("format_version") != FORECASTER_FORMAT_VERSION:
        raise ConfigError(
            f"unsupported forecaster format version {payload.get('format_version')!r}"
        )
    if payload["type"] == "averaged":
        return AveragedForecaster(
            members=[forecaster_from_dict(m) for m in payload["members"]]
        )
    featurizer = FeaturizerConfig(**payload["featurizer"])
    stats = _stats_from_dict(payload["stats"])
    nuisance = NuisancePair(
        m=model_from_dict(payload["m"]),
        e=model_from_dict(payload["e"]),
        encoding=payload["encoding"],
        featurizer=featurizer,
        stats=stats,
    )
    return CausalForecaster(
        nuisance=nuisance, theta=model_from_dict(payload["theta"]), encoding=payload["encoding"]
    )


def save_forecaster(f, path: str | Path) -> None:
    Path(path).write_text(json.dumps(forecaster_to_dict(f)) + "\n")


def load_forecaster(path: str | Path):
    return forecaster_from_dict(json.loads(Path(path).read_text()))
