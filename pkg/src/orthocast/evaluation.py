"""Metrics, the non-causal baseline, and numerical checks of the theory.

Besides standard forecast metrics, this module provides:

* a direct (plug-in) baseline that regresses the outcome on features plus the
  encoded treatment, whose implied effect is the difference of predictions at
  two treatments — the approach that suffers from regularization bias under
  confounded treatment assignment;
* a Monte-Carlo check that the residualized loss has vanishing cross
  directional derivative with respect to joint effect/nuisance perturbations
  at the true nuisances, and that the same quantity is far from zero for the
  non-residualized loss;
* a finite-difference check that the loss Hessian in the two nuisance outputs
  is rank one with eigenvalue ``2 * (1 + ||zeta||^2)``;
* a sample-size sweep comparing the orthogonal and direct pipelines against
  the generator's ground truth.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .encodings import LINEAR, cate_from_theta, encode_treatment, encoded_dim
from .errors import ConfigError, ValidationError
from .learners import MSE, FittedModel, LearnerSpec, fit_mlp, fit_ridge, predict
from .orthogonal import (
    CausalForecaster,
    fit_causal_forecaster,
    predict_cate,
    predict_outcome,
)
from .synthetic import Oracle, SynthConfig, generate
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


def _ordered_mean(values: np.ndarray) -> float:
    # summation over sorted values: permutation-invariant float reduction
    return float(np.sum(np.sort(values)) / values.shape[0])


def forecast_metrics(predictions: np.ndarray, truth: np.ndarray) -> tuple[float, float]:
    """Standard RMSE and MAE; symmetric in its two arguments."""
    predictions = np.asarray(predictions, dtype=float)
    truth = np.asarray(truth, dtype=float)
    if predictions.shape != truth.shape or predictions.ndim != 1:
        raise ValidationError(
            f"prediction/truth length mismatch: {predictions.shape} vs {truth.shape}"
        )
    if predictions.shape[0] == 0:
        raise ValidationError("empty inputs")
    err = predictions - truth
    return float(np.sqrt(_ordered_mean(err * err))), _ordered_mean(np.abs(err))


@dataclass
class MetricsReport:
    rmse: float
    mae: float
    rdd_rmse: float
    rdd_mae: float
    oracle_cate_rmse: float
    n_points: int
    n_entries: int
    model_tag: str

    CSV_FIELDS = (
        "model_tag",
        "rmse",
        "mae",
        "rdd_rmse",
        "rdd_mae",
        "oracle_cate_rmse",
        "n_points",
        "n_entries",
    )

    def to_csv_row(self) -> list:
        return [
            self.model_tag,
            repr(self.rmse),
            repr(self.mae),
            repr(self.rdd_rmse),
            repr(self.rdd_mae),
            repr(self.oracle_cate_rmse),
            self.n_points,
            self.n_entries,
        ]

    def to_text(self) -> str:
        lines = [
            f"model: {self.model_tag}",
            f"  forecast rmse: {self.rmse:.6f}   mae: {self.mae:.6f}   (n={self.n_points})",
            f"  rdd rmse:      {self.rdd_rmse:.6f}   rdd mae: {self.rdd_mae:.6f}   (entries={self.n_entries})",
        ]
        if np.isfinite(self.oracle_cate_rmse):
            lines.append(f"  oracle cate rmse: {self.oracle_cate_rmse:.6f}")
        return "\n".join(lines)


# ---------------------------------------------------------------------------
# Direct (non-causal) baseline
# ---------------------------------------------------------------------------


@dataclass
class DirectBaseline:
    """Single regressor on (features, encoded treatment) trained with MSE."""

    model: FittedModel
    encoding: str
    d: int
    featurizer: FeaturizerConfig
    stats: FeatureStats | None

    def context(self, series: TimeSeries, t: int) -> FeatureContext:
        return featurize(series, t, self.featurizer, self.stats)


def fit_direct_baseline(
    ds: Dataset, spec: LearnerSpec, featurizer: FeaturizerConfig
) -> DirectBaseline:
    if len(ds.series) == 0:
        raise ValidationError("empty dataset")
    if spec.loss != MSE:
        raise ConfigError("the direct baseline is trained with the mse loss")
    stats = compute_feature_stats(ds, featurizer) if featurizer.normalize else None
    xs, ys = [], []
    for s in ds.series:
        for t in forecast_steps(s):
            w = featurize(s, t, featurizer, stats).values
            enc = encode_treatment(s.treatment_at(t), ds.d, ds.encoding_kind)
            xs.append(np.concatenate([w, enc]))
            ys.append(s.outcome_at(t))
    X = np.vstack(xs)
    y = np.array(ys)[:, None]
    if spec.kind == "ridge":
        model = fit_ridge(X, y, lam=spec.ridge_lambda, allow_pinv=spec.ridge_pinv, spec=spec)
    else:
        model = fit_mlp(X, y, spec)
    model.train_stats = stats
    return DirectBaseline(
        model=model, encoding=ds.encoding_kind, d=ds.d, featurizer=featurizer, stats=stats
    )


def save_baseline(baseline: DirectBaseline, path: str | Path) -> None:
    import json
    from dataclasses import asdict

    from .learners import model_to_dict

    payload = {
        "format_version": 1,
        "type": "direct_baseline",
        "encoding": baseline.encoding,
        "d": baseline.d,
        "featurizer": asdict(baseline.featurizer),
        "stats": None
        if baseline.stats is None
        else {"mean": baseline.stats.mean.tolist(), "std": baseline.stats.std.tolist()},
        "model": model_to_dict(baseline.model),
    }
    Path(path).write_text(json.dumps(payload) + "\n")


def load_baseline(path: str | Path) -> DirectBaseline:
    import json

    from .learners import model_from_dict

    payload = json.loads(Path(path).read_text())
    if payload.get("type") != "direct_baseline":
        raise ConfigError(f"not a direct-baseline artifact: {path}")
    stats = payload["stats"]
    return DirectBaseline(
        model=model_from_dict(payload["model"]),
        encoding=payload["encoding"],
        d=payload["d"],
        featurizer=FeaturizerConfig(**payload["featurizer"]),
        stats=None
        if stats is None
        else FeatureStats(mean=np.asarray(stats["mean"]), std=np.asarray(stats["std"])),
    )


def direct_predict(baseline: DirectBaseline, W: FeatureContext, treatment: float) -> float:
    enc = encode_treatment(treatment, baseline.d, baseline.encoding)
    row = np.concatenate([W.values, enc])[None, :]
    return float(predict(baseline.model, row)[0, 0])


def direct_cate(baseline: DirectBaseline, W: FeatureContext, t_from: float, t_to: float) -> float:
    """Plug-in effect: difference of predictions at the two treatments."""
    return direct_predict(baseline, W, t_to) - direct_predict(baseline, W, t_from)


# ---------------------------------------------------------------------------
# Oracle-based evaluation grids
# ---------------------------------------------------------------------------


def sample_contexts(
    ds: Dataset, n_contexts: int, seed: int
) -> list[tuple[TimeSeries, int]]:
    """Seeded sample (with replacement) of (series, forecast step) contexts."""
    rng = np.random.default_rng(seed)
    pool = [(s, t) for s in ds.series for t in forecast_steps(s)]
    idx = rng.integers(0, len(pool), size=min(n_contexts, len(pool)))
    return [pool[i] for i in idx]


def adjacent_pairs(d: int, encoding: str) -> list[tuple[float, float]]:
    if encoding == LINEAR:
        return [(0.0, 1.0)]  # unit treatment change
    return [(float(i), float(i + 1)) for i in range(1, d)]


def oracle_cate_rmse(
    cate_fn: Callable[[TimeSeries, int, float, float], float],
    ds: Dataset,
    oracle: Oracle,
    n_contexts: int = 500,
    seed: int = 1234,
) -> float:
    """RMSE of predicted vs true effects over a fixed random grid of contexts
    crossed with all adjacent treatment pairs."""
    pairs = adjacent_pairs(oracle.config.d, oracle.config.encoding)
    errors = []
    for series, t in sample_contexts(ds, n_contexts, seed):
        for t_from, t_to in pairs:
            truth = oracle.cate(series.id, t, t_from, t_to)
            errors.append(cate_fn(series, t, t_from, t_to) - truth)
    err = np.array(errors)
    return float(np.sqrt(_ordered_mean(err * err)))


def forecaster_cate_fn(f) -> Callable[[TimeSeries, int, float, float], float]:
    def fn(series: TimeSeries, t: int, t_from: float, t_to: float) -> float:
        if hasattr(f, "members"):
            return float(
                np.mean(
                    [predict_cate(m, m.context(series, t), t_from, t_to) for m in f.members]
                )
            )
        return predict_cate(f, f.context(series, t), t_from, t_to)

    return fn


def baseline_cate_fn(b: DirectBaseline) -> Callable[[TimeSeries, int, float, float], float]:
    def fn(series: TimeSeries, t: int, t_from: float, t_to: float) -> float:
        return direct_cate(b, b.context(series, t), t_from, t_to)

    return fn


def forecast_predictions(f, ds: Dataset) -> tuple[np.ndarray, np.ndarray]:
    """Combined-model forecasts at the observed treatments, with the truths."""
    preds, truths = [], []
    for s in ds.series:
        for t in forecast_steps(s):
            if hasattr(f, "members"):
                yhat = float(
                    np.mean(
                        [
                            predict_outcome(m, m.context(s, t), s.treatment_at(t))
                            for m in f.members
                        ]
                    )
                )
            elif isinstance(f, DirectBaseline):
                yhat = direct_predict(f, f.context(s, t), s.treatment_at(t))
            else:
                yhat = predict_outcome(f, f.context(s, t), s.treatment_at(t))
            preds.append(yhat)
            truths.append(s.outcome_at(t))
    return np.array(preds), np.array(truths)


# ---------------------------------------------------------------------------
# Effect histogram (observed treatment -> next level)
# ---------------------------------------------------------------------------


@dataclass
class CateHistogram:
    bin_edges: np.ndarray
    counts: np.ndarray
    positive_fraction: float
    n_values: int
    n_skipped: int

    def save_csv(self, path: str | Path) -> None:
        with Path(path).open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["bin_left", "bin_right", "count"])
            for i, c in enumerate(self.counts):
                writer.writerow([repr(float(self.bin_edges[i])), repr(float(self.bin_edges[i + 1])), int(c)])

    def save_svg(self, path: str | Path, width: int = 640, height: int = 360) -> None:
        """Minimal deterministic SVG bar chart (no plotting dependency)."""
        pad = 40
        n = len(self.counts)
        top = max(int(self.counts.max()), 1) if n else 1
        bar_w = (width - 2 * pad) / max(n, 1)
        parts = [
            f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
            f'<rect width="{width}" height="{height}" fill="white"/>',
        ]
        for i, c in enumerate(self.counts):
            bh = (height - 2 * pad) * (int(c) / top)
            x = pad + i * bar_w
            y = height - pad - bh
            parts.append(
                f'<rect x="{x:.2f}" y="{y:.2f}" width="{bar_w * 0.9:.2f}" height="{bh:.2f}" fill="steelblue"/>'
            )
        parts.append(
            f'<text x="{pad}" y="{pad / 2:.1f}" font-size="12">positive fraction: '
            f"{self.positive_fraction:.4f} (n={self.n_values})</text>"
        )
        parts.append("</svg>")
        Path(path).write_text("\n".join(parts) + "\n")


def cate_histogram(
    cate_fn: Callable[[TimeSeries, int, float, float], float],
    ds: Dataset,
    normalize_by_change: bool = True,
    bins: int = 40,
    bin_range: tuple[float, float] | None = None,
) -> CateHistogram:
    """Distribution of predicted effects of moving each observed treatment to
    the next level, over every forecast step.  Steps already at the top level
    are skipped and counted."""
    if ds.d < 2:
        raise ConfigError("the next-level effect needs a categorical treatment (d >= 2)")
    values = []
    skipped = 0
    for s in ds.series:
        for t in forecast_steps(s):
            obs = int(s.treatment_at(t))
            if obs >= ds.d:
                skipped += 1
                continue
            value = cate_fn(s, t, float(obs), float(obs + 1))
            if normalize_by_change:
                value = value / 1.0  # adjacent index change has unit size
            values.append(value)
    arr = np.array(values)
    if arr.size == 0:
        raise ValidationError("no effects to histogram (every step at the top level)")
    if bin_range is None:
        bin_range = (float(arr.min()), float(arr.max()) + 1e-12)
    counts, edges = np.histogram(arr, bins=bins, range=bin_range)
    return CateHistogram(
        bin_edges=edges,
        counts=counts,
        positive_fraction=float(np.mean(arr > 0)),
        n_values=int(arr.size),
        n_skipped=skipped,
    )


# ---------------------------------------------------------------------------
# Orthogonality check (Monte-Carlo cross directional derivative)
# ---------------------------------------------------------------------------


@dataclass
class DirectionPair:
    """Bounded random perturbation directions, all functions of the features.

    ``d_m``/``d_e`` perturb the nuisances, ``d_theta`` the effect model, and
    ``theta_bar`` is the (arbitrary) effect model at which the derivative is
    taken.  By default the three directions share a random projection, which
    makes them mutually correlated — the residualized loss must be
    insensitive to *any* such pair, while the naive loss is visibly not.
    """

    theta_bar: Callable[[np.ndarray], np.ndarray]
    d_theta: Callable[[np.ndarray], np.ndarray]
    d_m: Callable[[np.ndarray], np.ndarray]
    d_e: Callable[[np.ndarray], np.ndarray]


def random_direction_pair(
    feature_dim: int, q: int, seed: int, share_projection: bool = True
) -> DirectionPair:
    rng = np.random.default_rng(seed)
    proj = rng.normal(0.0, 1.0, size=feature_dim) / np.sqrt(feature_dim)
    bar_proj = rng.normal(0.0, 1.0, size=(feature_dim, q)) / np.sqrt(feature_dim)
    bar_bias = rng.normal(0.0, 1.0, size=q)
    theta_scale = rng.normal(0.0, 1.0, size=q)
    e_scale = rng.normal(0.0, 1.0, size=q)
    theta_bias = rng.normal(0.0, 1.0, size=q)
    e_bias = rng.normal(0.0, 1.0, size=q)
    m_bias = rng.normal()
    if share_projection:
        theta_proj = np.tile(proj[:, None], (1, q))
        e_proj = np.tile(proj[:, None], (1, q))
    else:
        theta_proj = rng.normal(0.0, 1.0, size=(feature_dim, q)) / np.sqrt(feature_dim)
        e_proj = rng.normal(0.0, 1.0, size=(feature_dim, q)) / np.sqrt(feature_dim)

    return DirectionPair(
        theta_bar=lambda X: np.tanh(X @ bar_proj + bar_bias),
        d_theta=lambda X: theta_scale * np.tanh(X @ theta_proj + theta_bias),
        d_m=lambda X: np.tanh(X @ proj + m_bias),
        d_e=lambda X: e_scale * np.tanh(X @ e_proj + e_bias),
    )


def zero_direction_pair(q: int) -> DirectionPair:
    return DirectionPair(
        theta_bar=lambda X: np.zeros((X.shape[0], q)),
        d_theta=lambda X: np.zeros((X.shape[0], q)),
        d_m=lambda X: np.zeros(X.shape[0]),
        d_e=lambda X: np.zeros((X.shape[0], q)),
    )


@dataclass
class PopulationSample:
    """Arrays drawn from the generator along with the true nuisance values."""

    features: np.ndarray   # (n, p) raw featurized contexts
    y: np.ndarray          # (n,)
    t_enc: np.ndarray      # (n, q)
    m0: np.ndarray         # (n,)
    e0: np.ndarray         # (n, q)


def draw_population_sample(
    oracle: Oracle, n_samples: int, featurizer: FeaturizerConfig | None = None
) -> PopulationSample:
    """First ``n_samples`` forecast-step observations of the oracle's dataset,
    with raw (unnormalized) features for direction functions."""
    if oracle.dataset is None:
        raise ValidationError("oracle carries no dataset")
    featurizer = featurizer or FeaturizerConfig(normalize=False)
    cfg = oracle.config
    q = encoded_dim(cfg.encoding, cfg.d)
    feats, ys, encs, m0s, e0s = [], [], [], [], []
    for s in oracle.dataset.series:
        for t in forecast_steps(s):
            feats.append(featurize(s, t, featurizer, None).values)
            ys.append(s.outcome_at(t))
            encs.append(encode_treatment(s.treatment_at(t), cfg.d, cfg.encoding))
            m0, e0 = oracle.nuisance(s.id, t)
            m0s.append(m0)
            e0s.append(e0)
            if len(ys) >= n_samples:
                break
        if len(ys) >= n_samples:
            break
    if len(ys) < n_samples:
        raise ValidationError(
            f"dataset provides only {len(ys)} samples, {n_samples} requested"
        )
    return PopulationSample(
        features=np.vstack(feats),
        y=np.array(ys),
        t_enc=np.vstack(encs),
        m0=np.array(m0s),
        e0=np.vstack(e0s),
    )


def orthogonality_check(
    sample: PopulationSample,
    directions: DirectionPair,
    fd_step: float = 1e-4,
    loss: str = "rloss",
    richardson: bool = False,
) -> tuple[float, float]:
    """Monte-Carlo estimate of the cross directional derivative of the
    population loss at the true nuisances, plus its standard error.

    The derivative is taken along ``d_theta`` in the effect argument and
    ``(d_m, d_e)`` in the nuisance argument, via a central 2x2 stencil in the
    two scalar perturbation sizes.  ``loss='rloss'`` checks the residualized
    loss (the estimate should be statistical noise around zero);
    ``loss='naive'`` applies the identical stencil to the plain squared loss
    without treatment residualization, whose cross derivative does not
    vanish — the numerical face of regularization bias.
    """
    X = sample.features
    theta_bar = directions.theta_bar(X)
    d_theta = directions.d_theta(X)
    d_m = directions.d_m(X)
    d_e = directions.d_e(X)

    def per_sample_loss(s: float, u: float) -> np.ndarray:
        theta = theta_bar + s * d_theta
        m = sample.m0 + u * d_m
        if loss == "rloss":
            t_res = sample.t_enc - (sample.e0 + u * d_e)
        elif loss == "naive":
            t_res = sample.t_enc
        else:
            raise ConfigError(f"unknown loss {loss!r}")
        r = sample.y - m - np.sum(t_res * theta, axis=1)
        return r * r

    def stencil(h: float) -> np.ndarray:
        return (
            per_sample_loss(h, h)
            - per_sample_loss(h, -h)
            - per_sample_loss(-h, h)
            + per_sample_loss(-h, -h)
        ) / (4.0 * h * h)

    cross = stencil(fd_step)
    if richardson:
        cross = (4.0 * cross - stencil(2.0 * fd_step)) / 3.0
    if not np.all(np.isfinite(cross)):
        raise ValidationError("non-finite intermediate in the orthogonality stencil")
    n = cross.shape[0]
    estimate = _ordered_mean(cross)
    se = float(np.std(cross) / np.sqrt(n))
    return estimate, se


# ---------------------------------------------------------------------------
# Hessian check (rank-1 structure of the loss in the nuisance outputs)
# ---------------------------------------------------------------------------


@dataclass
class HessianCheck:
    analytic_eigenvalue: float
    fd_top_eigenvalue: float
    second_eigenvalue_magnitude: float


def rloss_hessian_check(
    zeta: np.ndarray,
    y: float = 0.7,
    t_enc: np.ndarray | None = None,
    fd_step: float = 1e-3,
) -> HessianCheck:
    """Finite-difference Hessian of the per-sample loss in the two nuisance
    outputs (scalar m-output and d-dimensional e-output), compared with the
    analytic rank-one structure: single nonzero eigenvalue
    ``2 * (1 + sum(zeta^2))`` along ``(1, -zeta)``."""
    zeta = np.asarray(zeta, dtype=float)
    if not np.all(np.isfinite(zeta)):
        raise ValidationError("zeta must be finite")
    d = zeta.shape[0]
    t_vec = np.zeros(d) if t_enc is None else np.asarray(t_enc, dtype=float)

    def loss(gamma: np.ndarray) -> float:
        r = y - gamma[0] - (t_vec - gamma[1:]) @ zeta
        return r * r

    dim = d + 1
    gamma0 = np.zeros(dim)
    hess = np.zeros((dim, dim))
    h = fd_step
    for i in range(dim):
        for j in range(i, dim):
            ei = np.zeros(dim)
            ej = np.zeros(dim)
            ei[i] = h
            ej[j] = h
            value = (
                loss(gamma0 + ei + ej)
                - loss(gamma0 + ei - ej)
                - loss(gamma0 - ei + ej)
                + loss(gamma0 - ei - ej)
            ) / (4.0 * h * h)
            hess[i, j] = value
            hess[j, i] = value
    eigvals = np.linalg.eigvalsh(hess)
    order = np.argsort(np.abs(eigvals))[::-1]
    top = float(eigvals[order[0]])
    second = float(abs(eigvals[order[1]])) if dim > 1 else 0.0
    analytic = 2.0 * (1.0 + float(zeta @ zeta))
    return HessianCheck(
        analytic_eigenvalue=analytic,
        fd_top_eigenvalue=top,
        second_eigenvalue_magnitude=second,
    )


# ---------------------------------------------------------------------------
# Sample-size sweep
# ---------------------------------------------------------------------------


@dataclass
class SweepRow:
    n_series: int
    rmse_orthogonal: float
    rmse_direct: float
    se_orthogonal: float
    se_direct: float


@dataclass
class SweepResult:
    rows: list[SweepRow]
    aborted: bool = False
    error: str | None = None


def convergence_sweep(
    cfg: SynthConfig,
    ns: Sequence[int],
    featurizer: FeaturizerConfig,
    m_spec: LearnerSpec,
    e_spec: LearnerSpec,
    theta_spec: LearnerSpec,
    direct_spec: LearnerSpec,
    n_train_seeds: int = 3,
    n_contexts: int = 500,
    grid_seed: int = 1234,
) -> SweepResult:
    """Oracle-effect RMSE of both pipelines as the series count grows.

    The data-generating process is held fixed (same generator seed) while
    ``n_series`` varies; each size is fitted with ``n_train_seeds`` split /
    training seeds and the RMSEs averaged.  A pipeline failure aborts the
    sweep and returns the rows finished so far, flagged."""
    if list(ns) != sorted(set(ns)):
        raise ConfigError("ns must be strictly increasing")
    rows: list[SweepRow] = []
    for n in ns:
        try:
            ds, oracle = generate(replace(cfg, n_series=n))
            ortho_scores, direct_scores = [], []
            for train_seed in range(n_train_seeds):
                f = fit_causal_forecaster(
                    ds,
                    featurizer,
                    replace(m_spec, seed=m_spec.seed + train_seed),
                    replace(e_spec, seed=e_spec.seed + train_seed),
                    replace(theta_spec, seed=theta_spec.seed + train_seed),
                    seed=train_seed,
                )
                b = fit_direct_baseline(
                    ds, replace(direct_spec, seed=direct_spec.seed + train_seed), featurizer
                )
                ortho_scores.append(
                    oracle_cate_rmse(forecaster_cate_fn(f), ds, oracle, n_contexts, grid_seed)
                )
                direct_scores.append(
                    oracle_cate_rmse(baseline_cate_fn(b), ds, oracle, n_contexts, grid_seed)
                )
            k = len(ortho_scores)
            rows.append(
                SweepRow(
                    n_series=n,
                    rmse_orthogonal=float(np.mean(ortho_scores)),
                    rmse_direct=float(np.mean(direct_scores)),
                    se_orthogonal=float(np.std(ortho_scores, ddof=1) / np.sqrt(k)) if k > 1 else 0.0,
                    se_direct=float(np.std(direct_scores, ddof=1) / np.sqrt(k)) if k > 1 else 0.0,
                )
            )
        except Exception as exc:  # partial results are still reported
            return SweepResult(rows=rows, aborted=True, error=f"{type(exc).__name__}: {exc}")
    return SweepResult(rows=rows)
