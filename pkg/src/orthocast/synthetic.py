"""Confounded synthetic panel generator with a queryable ground-truth oracle.

Each series is built from the structural model

    Y_t = enc(T_t) . theta0(W_t) + f0(W_t) + noise_y * eps1
    T_t ~ e0(W_t)                       (categorical: softmax sampling)
    T_t = e0(W_t) + noise_t * eps2      (linear encoding)

where ``f0`` is a linear function of the static features and the current
temporal row plus a bounded nonlinearity (so a linear outcome model is
mis-specified), and ``e0`` tracks a smoothed latent-demand trajectory: when
demand is high the treatment distribution shifts toward high indices,
reproducing the reversed treatment-outcome correlation that motivates
orthogonal learning.  ``confounding_strength`` scales that dependence; at 0
treatments are independent of everything.

Structural functions (coefficients of f0, theta0, e0) depend only on
``seed``, while per-series randomness is derived from ``(seed, series
index)``.  Regenerating with a different ``n_series`` therefore keeps the
same data-generating process and reuses identical series prefixes, and the
whole generation is bit-reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Iterable

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
from .errors import ConfigError
from .timeseries import Dataset, TimeSeries

THETA_FORMS = ("constant_vector", "smooth_of_W", "monotone_decreasing")

# saturating nonlinearity: large and sharp enough that a linear outcome
# model is visibly mis-specified, which is what regularization bias feeds on
_NONLIN_AMPLITUDE = 2.5
_NONLIN_SHARPNESS = 2.0
_DEMAND_EMA = 0.5
_STEP_CONTINUE_P = 0.35


@dataclass(frozen=True)
class SynthConfig:
    n_series: int = 2000
    L: int = 24
    tau: int = 8
    d: int = 5
    p_s: int = 2
    p_x: int = 2
    encoding: str = ONE_HOT
    theta_form: str = "monotone_decreasing"
    confounding_strength: float = 2.0
    noise_y: float = 0.25
    noise_t: float = 1.0
    ar_coeff: float = 0.7
    rdd_step_mode: bool = False
    min_run: int = 4
    weekday_effect: float = 0.0
    seed: int = 0

    def validate(self) -> None:
        check_encoding_kind(self.encoding)
        if self.n_series < 1:
            raise ConfigError("n_series must be >= 1")
        if not 1 <= self.tau < self.L:
            raise ConfigError(f"tau must satisfy 1 <= tau < L; got tau={self.tau}, L={self.L}")
        if self.encoding != LINEAR and self.d < 2:
            raise ConfigError("categorical encodings require d >= 2")
        if self.theta_form not in THETA_FORMS:
            raise ConfigError(f"unknown theta_form {self.theta_form!r}")
        if not -1 < self.ar_coeff < 1:
            raise ConfigError("ar_coeff must lie in (-1, 1)")
        if self.confounding_strength < 0 or self.noise_y < 0 or self.noise_t < 0:
            raise ConfigError("confounding_strength, noise_y, noise_t must be >= 0")
        if self.min_run < 1:
            raise ConfigError("min_run must be >= 1")


class _Structure:
    """Structural coefficients shared by every series; a pure function of seed."""

    def __init__(self, cfg: SynthConfig):
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1001]))
        p_in = cfg.p_s + cfg.p_x
        self.f0_const = rng.normal()
        self.f0_coef = rng.normal(0.0, 1.0, size=p_in) / np.sqrt(p_in)
        w = rng.normal(0.0, 1.0, size=p_in)
        self.nonlin_dir = w / np.linalg.norm(w)
        q = encoded_dim(cfg.encoding, cfg.d)
        self.q = q
        if cfg.theta_form == "constant_vector":
            self.theta_base = rng.normal(0.0, 1.0, size=q)
            self.theta_dirs = None
        elif cfg.theta_form == "smooth_of_W":
            self.theta_base = rng.normal(0.0, 1.0, size=q)
            self.theta_dirs = rng.normal(0.0, 1.0, size=(q, p_in)) / np.sqrt(p_in)
        else:  # monotone_decreasing: strictly decreasing per-index effects
            gaps = 0.25 + 0.1 * rng.random(size=max(q - 1, 1))
            if cfg.encoding == ONE_HOT:
                theta = np.empty(q)
                theta[0] = 1.0
                theta[1:] = 1.0 - np.cumsum(gaps)
                self.theta_base = theta
            elif cfg.encoding == CUMULATIVE:
                theta = np.empty(q)
                theta[0] = 0.0
                theta[1:] = -gaps
                self.theta_base = theta
            else:
                self.theta_base = np.array([-(0.5 + 0.5 * rng.random())])
            self.theta_dirs = None
        self.levels = (
            np.linspace(-1.0, 1.0, cfg.d) if cfg.encoding != LINEAR else None
        )
        # per-weekday additive level and slope, scaled by cfg.weekday_effect
        self.weekday_level = rng.normal(0.0, 1.0, size=7)
        self.weekday_slope = rng.normal(0.0, 0.02, size=7)

    def f0(self, s: np.ndarray, x_t: np.ndarray) -> float:
        z = np.concatenate([s, x_t])
        return float(
            self.f0_const
            + self.f0_coef @ z
            + _NONLIN_AMPLITUDE * np.tanh(_NONLIN_SHARPNESS * (self.nonlin_dir @ z))
        )

    def theta(self, cfg: SynthConfig, s: np.ndarray, x_t: np.ndarray) -> np.ndarray:
        if self.theta_dirs is None:
            return self.theta_base.copy()
        z = np.concatenate([s, x_t])
        return self.theta_base + 0.5 * np.tanh(self.theta_dirs @ z)


@dataclass
class Oracle:
    """Hidden structural functions of a generated dataset.

    Answers counterfactual queries exactly: per-(series, step) values of f0,
    theta0 and the treatment distribution are stored at generation time.
    ``e0_enc`` is the mean of the *encoded* treatment (class probabilities
    for one-hot, survival probabilities for cumulative, the conditional mean
    for linear), which is the quantity the residualized loss subtracts.
    """

    config: SynthConfig
    f0: np.ndarray          # (n, L)
    theta: np.ndarray       # (n, L, q)
    e0_enc: np.ndarray      # (n, L, q)
    probs: np.ndarray | None  # (n, L, d) for categorical encodings
    dataset: Dataset | None = None
    _index: dict[str, int] | None = None

    def _idx(self, series_id: str) -> int:
        if self._index is None:
            self._index = {s.id: i for i, s in enumerate(self.dataset.series)}
        return self._index[series_id]

    def _check_t(self, t: int) -> None:
        if not 1 <= t <= self.config.L:
            raise IndexError(f"time index {t} out of range [1, {self.config.L}]")

    def theta_at(self, series_id: str, t: int) -> np.ndarray:
        self._check_t(t)
        return self.theta[self._idx(series_id), t - 1]

    def cate(self, series_id: str, t: int, t_from: float, t_to: float) -> float:
        return cate_from_theta(self.theta_at(series_id, t), t_from, t_to, self.config.encoding)

    def nuisance(self, series_id: str, t: int) -> tuple[float, np.ndarray]:
        self._check_t(t)
        i = self._idx(series_id)
        e0 = self.e0_enc[i, t - 1]
        m0 = float(self.f0[i, t - 1] + e0 @ self.theta[i, t - 1])
        return m0, e0

    def potential_outcome(self, series_id: str, t: int, treatment: float) -> float:
        """Noise-free outcome under the given treatment."""
        self._check_t(t)
        i = self._idx(series_id)
        enc = encode_treatment(treatment, self.config.d, self.config.encoding)
        return float(self.f0[i, t - 1] + enc @ self.theta[i, t - 1])


def _cumulative_survival(probs: np.ndarray) -> np.ndarray:
    # E[enc_j] = P(T >= j): reversed cumulative sum over treatment indices
    return np.cumsum(probs[::-1])[::-1]


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max()
    ez = np.exp(z)
    return ez / ez.sum()


def generate(cfg: SynthConfig) -> tuple[Dataset, Oracle]:
    """Generate a confounded panel and its ground-truth oracle."""
    cfg.validate()
    struct = _Structure(cfg)
    q = struct.q
    n, L = cfg.n_series, cfg.L
    innovation = np.sqrt(1.0 - cfg.ar_coeff**2)

    f0_all = np.zeros((n, L))
    theta_all = np.zeros((n, L, q))
    e0_all = np.zeros((n, L, q))
    probs_all = np.zeros((n, L, cfg.d)) if cfg.encoding != LINEAR else None
    series: list[TimeSeries] = []

    for i in range(n):
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 2, i]))
        s_vec = rng.normal(0.0, 1.0, size=cfg.p_s)
        x = np.zeros((L, cfg.p_x))
        x[0] = rng.normal(0.0, 1.0, size=cfg.p_x)
        for t in range(1, L):
            x[t] = cfg.ar_coeff * x[t - 1] + innovation * rng.normal(0.0, 1.0, size=cfg.p_x)

        treatments = np.zeros(L)
        outcomes = np.zeros(L)
        demand = 0.0
        run_left = 0
        current_t = None
        for t in range(L):
            f0_t = struct.f0(s_vec, x[t])
            demand = _DEMAND_EMA * f0_t + (1.0 - _DEMAND_EMA) * demand if t > 0 else f0_t
            theta_t = struct.theta(cfg, s_vec, x[t])
            f0_all[i, t] = f0_t
            theta_all[i, t] = theta_t

            if cfg.encoding == LINEAR:
                e0_t = 1.5 + 0.5 * cfg.confounding_strength * demand
                e0_all[i, t, 0] = e0_t
                if cfg.rdd_step_mode:
                    if run_left == 0:
                        current_t = e0_t + cfg.noise_t * rng.normal()
                        run_left = cfg.min_run + rng.geometric(_STEP_CONTINUE_P) - 1
                    run_left -= 1
                    treatments[t] = current_t
                else:
                    treatments[t] = e0_t + cfg.noise_t * rng.normal()
            else:
                p = _softmax(cfg.confounding_strength * demand * struct.levels)
                probs_all[i, t] = p
                e0_all[i, t] = p if cfg.encoding == ONE_HOT else _cumulative_survival(p)
                if cfg.rdd_step_mode:
                    if run_left == 0:
                        current_t = 1 + rng.choice(cfg.d, p=p)
                        run_left = cfg.min_run + rng.geometric(_STEP_CONTINUE_P) - 1
                    run_left -= 1
                    treatments[t] = current_t
                else:
                    treatments[t] = 1 + rng.choice(cfg.d, p=p)

            enc = encode_treatment(treatments[t], cfg.d, cfg.encoding)
            outcomes[t] = enc @ theta_t + f0_t + cfg.noise_y * rng.normal()

        offset = int(rng.integers(0, 7))
        weekday = ((np.arange(L) + offset) % 7) + 1
        if cfg.weekday_effect > 0:
            steps = np.arange(1, L + 1)
            outcomes = outcomes + cfg.weekday_effect * (
                struct.weekday_level[weekday - 1] + steps * struct.weekday_slope[weekday - 1]
            )

        series.append(
            TimeSeries(
                id=f"s{i:06d}",
                static_features=s_vec,
                temporal_features=x,
                treatments=treatments,
                outcomes=outcomes,
                tau=cfg.tau,
                weekday=weekday,
            )
        )

    ds = Dataset(
        series=series,
        d=cfg.d if cfg.encoding != LINEAR else 1,
        encoding_kind=cfg.encoding,
        feature_dims=(cfg.p_s, cfg.p_x),
    )
    oracle = Oracle(
        config=cfg, f0=f0_all, theta=theta_all, e0_enc=e0_all, probs=probs_all, dataset=ds
    )
    return ds, oracle


def inject_step_series(
    jump: float,
    t_i: int,
    L: int,
    slope: float = 0.0,
    sigma: float = 0.0,
    seed: int = 0,
) -> TimeSeries:
    """Piecewise-linear fixture: outcome jumps by ``jump`` right after ``t_i``,
    with the treatment switching 1 -> 2 there.  Used to exercise the switch
    estimator against a known discontinuity."""
    if not 1 < t_i < L:
        raise ConfigError(f"t_i must satisfy 1 < t_i < L; got t_i={t_i}, L={L}")
    rng = np.random.default_rng(seed)
    steps = np.arange(1, L + 1)
    outcomes = slope * steps + jump * (steps > t_i) + sigma * rng.normal(size=L)
    treatments = np.where(steps > t_i, 2.0, 1.0)
    return TimeSeries(
        id=f"step-{seed}",
        static_features=np.zeros(1),
        temporal_features=np.zeros((L, 1)),
        treatments=treatments,
        outcomes=outcomes,
        tau=1,
        weekday=((steps - 1) % 7 + 1).astype(int),
    )
