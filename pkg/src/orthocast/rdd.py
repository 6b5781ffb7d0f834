"""Causal test sets from treatment switches: local-linear discontinuity fits.

Every time step at which a series' treatment changes is a potential cutoff.
Around each eligible switch we take the maximal constant-treatment runs on
both sides, optionally remove weekday patterns, and fit the weighted
local-linear specification

    y_t = b0 + b1 (t - t_i) + b2 1{t > t_i} + b3 1{t > t_i} (t - t_i) + eps

with a rectangular or triangular kernel centered at the switch.  ``b2`` is
the point estimate of the treatment-change effect and, after tail trimming,
the collection of ``b2`` values forms the causal test set against which
model-predicted effects are scored.

Time indices are 1-based throughout, matching the rest of the package.  The
switch observation itself is excluded from every fit: at an aggregated time
resolution the treatment during the switch step is ill defined, so ``b2``
measures the gap between the two fitted lines at the switch.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np

from .errors import ConfigError, DataError, ValidationError
from .learners import fit_ridge
from .timeseries import Dataset, TimeSeries

RECTANGULAR = "rectangular"
TRIANGULAR = "triangular"
KERNELS = (RECTANGULAR, TRIANGULAR)


@dataclass(frozen=True)
class RddConfig:
    """Settings of the switch estimator.

    ``h=14`` with a triangular kernel suits slowly-varying daily series;
    ``h=5`` rectangular suits short, noisy clinical-style series.  When
    ``ridge_lambda`` is None the local fit uses ``1e-3 * n_window_points``,
    which keeps shrinkage comparable across window sizes.
    """

    h: int = 14
    kernel: str = TRIANGULAR
    ridge_lambda: float | None = None
    min_side: int = 3
    trim_q: float = 0.025
    weekday_correction: bool = False
    weekday_mode: str = "active"  # "active" or "sum_all"
    comparable_grouping: str = "all"  # "all" or "per_series"

    def __post_init__(self):
        if self.h < 1:
            raise ConfigError("kernel bandwidth h must be >= 1")
        if self.kernel not in KERNELS:
            raise ConfigError(f"unknown kernel {self.kernel!r}")
        if self.min_side < 1:
            raise ConfigError("min_side must be >= 1")
        if not 0.0 <= self.trim_q < 0.5:
            raise ConfigError("trim_q must lie in [0, 0.5)")
        if self.weekday_mode not in ("active", "sum_all"):
            raise ConfigError(f"unknown weekday_mode {self.weekday_mode!r}")
        if self.comparable_grouping not in ("all", "per_series"):
            raise ConfigError(f"unknown comparable_grouping {self.comparable_grouping!r}")


@dataclass
class RddEntry:
    """One estimated point effect at a treatment switch."""

    series_id: str
    t_i: int
    t_before: float
    t_after: float
    cate_hat: float
    n_left: int
    n_right: int
    beta: np.ndarray
    corrected: bool


@dataclass
class CausalTestSet:
    entries: list[RddEntry]
    config: RddConfig
    trim_bounds: tuple[float, float]
    n_switches: int = 0
    n_estimated: int = 0
    n_skipped: int = 0

    @property
    def retention(self) -> float:
        return len(self.entries) / self.n_estimated if self.n_estimated else 0.0


def find_switching_times(treatments: np.ndarray) -> list[int]:
    """All 1-based t with T_t != T_{t+1}; empty for constant series."""
    treatments = np.asarray(treatments)
    if treatments.shape[0] < 2:
        raise ValidationError("need at least 2 time steps")
    return [int(t) for t in np.nonzero(treatments[:-1] != treatments[1:])[0] + 1]


def _run_lengths(treatments: np.ndarray, t_i: int) -> tuple[int, int]:
    """Lengths of the maximal constant runs strictly before and after t_i."""
    L = treatments.shape[0]
    left = 0
    if t_i >= 2:
        value = treatments[t_i - 2]  # T_{t_i - 1}
        for t in range(t_i - 1, 0, -1):
            if treatments[t - 1] == value:
                left += 1
            else:
                break
    right = 0
    if t_i + 1 <= L:
        value = treatments[t_i]  # T_{t_i + 1}
        for t in range(t_i + 1, L + 1):
            if treatments[t - 1] == value:
                right += 1
            else:
                break
    return left, right


def eligible_switches(treatments: np.ndarray, min_side: int = 3) -> list[int]:
    """Switches with >= ``min_side`` constant steps strictly on each side.

    The switch step itself is excluded from both sides, consistent with its
    exclusion from the fit window.
    """
    if min_side < 1:
        raise ConfigError("min_side must be >= 1")
    treatments = np.asarray(treatments)
    out = []
    for t_i in find_switching_times(treatments):
        left, right = _run_lengths(treatments, t_i)
        if left >= min_side and right >= min_side:
            out.append(t_i)
    return out


def build_window(treatments: np.ndarray, t_i: int) -> np.ndarray:
    """Maximal constant-treatment runs on both sides of the switch, as sorted
    1-based indices; never contains ``t_i`` and never crosses a neighboring
    switch."""
    treatments = np.asarray(treatments)
    if t_i not in find_switching_times(treatments):
        raise ValidationError(f"t_i={t_i} is not a switching time")
    left, right = _run_lengths(treatments, t_i)
    indices = list(range(t_i - left, t_i)) + list(range(t_i + 1, t_i + right + 1))
    return np.array(indices, dtype=int)


def kernel_weights(indices: np.ndarray, center: int, h: int, kernel: str) -> np.ndarray:
    """Rectangular: 1 inside |t-c| <= h.  Triangular: max(0, 1 - |t-c|/h)."""
    if h < 1:
        raise ConfigError("h must be >= 1")
    if kernel not in KERNELS:
        raise ConfigError(f"unknown kernel {kernel!r}")
    dist = np.abs(np.asarray(indices, dtype=float) - center)
    if kernel == RECTANGULAR:
        return (dist <= h).astype(float)
    return np.maximum(0.0, 1.0 - dist / h)


# ---------------------------------------------------------------------------
# Weekday correction
# ---------------------------------------------------------------------------


@dataclass
class WeekdayModel:
    """Least-squares coefficients of Y ~ weekday + weekday * t.

    ``alpha1[j-1]`` is the level and ``alpha2[j-1]`` the per-step trend of
    weekday j; weekdays absent from the fitting group get zero coefficients
    and are listed in ``missing``.
    """

    alpha1: np.ndarray
    alpha2: np.ndarray
    missing: list[int] = field(default_factory=list)


def fit_weekday_model(group: list[TimeSeries]) -> WeekdayModel:
    if not group:
        raise ValidationError("empty weekday-correction group")
    rows = []
    ys = []
    for s in group:
        if s.weekday is None:
            raise ValidationError(f"series {s.id!r} has no weekday labels")
        for t in range(1, s.length + 1):
            j = s.weekday_at(t)
            indicator = np.zeros(14)
            indicator[j - 1] = 1.0
            indicator[7 + j - 1] = float(t)
            rows.append(indicator)
            ys.append(s.outcome_at(t))
    design = np.vstack(rows)
    y = np.array(ys)
    present = design[:, :7].sum(axis=0) > 0
    missing = [j + 1 for j in range(7) if not present[j]]
    cols = np.concatenate([present, present])
    coef = np.zeros(14)
    solution, *_ = np.linalg.lstsq(design[:, cols], y, rcond=None)
    coef[cols] = solution
    return WeekdayModel(alpha1=coef[:7], alpha2=coef[7:], missing=missing)


def apply_weekday_correction(
    s: TimeSeries, model: WeekdayModel, mode: str = "active"
) -> np.ndarray:
    """Residual outcomes after removing the fitted weekday pattern.

    ``active`` subtracts only the coefficients of each step's own weekday
    (the standard dummy-regression residual).  ``sum_all`` subtracts the sum
    over all seven weekdays at every step, which reads the correction
    formula literally; both are kept so the behaviors can be compared.
    """
    if s.weekday is None:
        raise ValidationError(f"series {s.id!r} has no weekday labels")
    steps = np.arange(1, s.length + 1, dtype=float)
    if mode == "active":
        j = s.weekday - 1
        fitted = model.alpha1[j] + steps * model.alpha2[j]
    elif mode == "sum_all":
        fitted = model.alpha1.sum() + steps * model.alpha2.sum()
    else:
        raise ConfigError(f"unknown weekday correction mode {mode!r}")
    return s.outcomes - fitted


# ---------------------------------------------------------------------------
# Local fit and test-set construction
# ---------------------------------------------------------------------------


def estimate_switch_cate(
    outcomes: np.ndarray,
    window: np.ndarray,
    t_i: int,
    weights: np.ndarray,
    lam: float = 0.0,
    series_id: str = "",
    t_before: float = 0.0,
    t_after: float = 0.0,
    corrected: bool = False,
) -> RddEntry:
    """Weighted ridge fit of the 4-term local specification; effect = b2.

    The intercept is unpenalized so the level is absorbed freely; the two
    slopes and the jump indicator carry the penalty.  Requires at least two
    positive-weight points on each side of the switch.
    """
    outcomes = np.asarray(outcomes, dtype=float)
    window = np.asarray(window, dtype=int)
    weights = np.asarray(weights, dtype=float)
    positive = weights > 0
    n_left = int(np.sum(positive & (window < t_i)))
    n_right = int(np.sum(positive & (window > t_i)))
    if n_left < 2 or n_right < 2:
        raise DataError(
            f"insufficient window: {n_left} left / {n_right} right positive-weight points"
        )
    rel = window.astype(float) - t_i
    after = (window > t_i).astype(float)
    design = np.column_stack([rel, after, after * rel])
    y = outcomes[window - 1]
    model = fit_ridge(design, y, weights=weights, lam=lam)
    beta = np.concatenate([model.parameters[0], model.parameters[1][:, 0]])
    return RddEntry(
        series_id=series_id,
        t_i=int(t_i),
        t_before=float(t_before),
        t_after=float(t_after),
        cate_hat=float(beta[2]),
        n_left=n_left,
        n_right=n_right,
        beta=beta,
        corrected=corrected,
    )


def trim_bounds(values: np.ndarray, trim_q: float) -> tuple[float, float]:
    """Nearest-rank empirical quantiles at trim_q and 1 - trim_q."""
    values = np.sort(np.asarray(values, dtype=float))
    n = values.shape[0]
    if n == 0:
        return (-np.inf, np.inf)
    if trim_q <= 0.0:
        return (float(values[0]), float(values[-1]))
    lo_rank = max(int(np.ceil(trim_q * n)), 1)
    hi_rank = min(int(np.ceil((1.0 - trim_q) * n)), n)
    return (float(values[lo_rank - 1]), float(values[hi_rank - 1]))


def apply_trim_bounds(entries: list[RddEntry], bounds: tuple[float, float]) -> list[RddEntry]:
    """Keep entries whose estimate lies inside the closed bounds; applying the
    same bounds again changes nothing.  Entry order (series, switch time) is
    preserved, so ties at a bound are retained deterministically."""
    lo, hi = bounds
    return [e for e in entries if lo <= e.cate_hat <= hi]


def _grouping_fn(cfg: RddConfig) -> Callable[[TimeSeries], str]:
    if cfg.comparable_grouping == "per_series":
        return lambda s: s.id
    return lambda s: "all"


def build_causal_test_set(
    ds: Dataset,
    cfg: RddConfig,
    grouping: Callable[[TimeSeries], str] | None = None,
) -> CausalTestSet:
    """Collect, estimate, and trim switch effects over a whole dataset.

    Per series: find eligible switches, build the constant-run windows,
    optionally remove weekday patterns fitted per comparable group, run the
    local fit, and record b2.  Entries whose estimate falls outside the
    [trim_q, 1-trim_q] empirical quantiles are then discarded.  An empty
    result is allowed; counts of found/estimated/skipped switches are kept
    on the returned set.
    """
    if len(ds.series) == 0:
        raise ValidationError("empty dataset")
    grouping = grouping or _grouping_fn(cfg)

    corrected_outcomes: dict[str, np.ndarray] = {}
    if cfg.weekday_correction:
        groups: dict[str, list[TimeSeries]] = {}
        for s in ds.series:
            groups.setdefault(grouping(s), []).append(s)
        for members in groups.values():
            model = fit_weekday_model(members)
            for s in members:
                corrected_outcomes[s.id] = apply_weekday_correction(
                    s, model, mode=cfg.weekday_mode
                )

    entries: list[RddEntry] = []
    n_switches = 0
    n_skipped = 0
    for s in ds.series:
        switches = find_switching_times(s.treatments)
        n_switches += len(switches)
        outcomes = corrected_outcomes.get(s.id, s.outcomes)
        for t_i in eligible_switches(s.treatments, cfg.min_side):
            # the run values define the treatment pair; left run ends at t_i - 1
            t_before = s.treatment_at(t_i - 1)
            t_after = s.treatment_at(t_i + 1)
            if t_before == t_after:  # placebo pair around an isolated blip
                n_skipped += 1
                continue
            window = build_window(s.treatments, t_i)
            weights = kernel_weights(window, t_i, cfg.h, cfg.kernel)
            lam = cfg.ridge_lambda if cfg.ridge_lambda is not None else 1e-3 * window.shape[0]
            try:
                entry = estimate_switch_cate(
                    outcomes,
                    window,
                    t_i,
                    weights,
                    lam=lam,
                    series_id=s.id,
                    t_before=t_before,
                    t_after=t_after,
                    corrected=cfg.weekday_correction,
                )
            except (DataError, ValidationError):
                n_skipped += 1
                continue
            entries.append(entry)

    bounds = trim_bounds(np.array([e.cate_hat for e in entries]), cfg.trim_q)
    kept = apply_trim_bounds(entries, bounds)
    return CausalTestSet(
        entries=kept,
        config=cfg,
        trim_bounds=bounds,
        n_switches=n_switches,
        n_estimated=len(entries),
        n_skipped=n_skipped,
    )


def score_predictions(
    test: CausalTestSet, predictor: Callable[[str, int, float, float], float]
) -> tuple[float, float, int]:
    """RMSE and MAE of predicted effects against the test set's estimates.

    The predictor is called as ``predictor(series_id, t_i, t_before,
    t_after)``; entries on which it raises are skipped and counted in the
    third return value.
    """
    errors = []
    skipped = 0
    for e in test.entries:
        try:
            pred = predictor(e.series_id, e.t_i, e.t_before, e.t_after)
        except Exception:
            skipped += 1
            continue
        errors.append(pred - e.cate_hat)
    if not errors:
        raise ValidationError("predictor failed on every entry")
    err = np.array(errors)
    rmse = float(np.sqrt(np.sum(np.sort(err * err)) / err.shape[0]))
    mae = float(np.sum(np.sort(np.abs(err))) / err.shape[0])
    return rmse, mae, skipped


# ---------------------------------------------------------------------------
# CSV output
# ---------------------------------------------------------------------------

_CSV_HEADER = [
    "series_id",
    "t_i",
    "T_before",
    "T_after",
    "cate_hat",
    "n_left",
    "n_right",
    "beta0",
    "beta1",
    "beta2",
    "beta3",
    "corrected",
]


def save_test_set(test: CausalTestSet, path: str | Path) -> None:
    """Write entries as CSV plus a JSON sidecar with bounds and retention."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(_CSV_HEADER)
        for e in test.entries:
            writer.writerow(
                [
                    e.series_id,
                    e.t_i,
                    repr(e.t_before),
                    repr(e.t_after),
                    repr(e.cate_hat),
                    e.n_left,
                    e.n_right,
                    repr(float(e.beta[0])),
                    repr(float(e.beta[1])),
                    repr(float(e.beta[2])),
                    repr(float(e.beta[3])),
                    int(e.corrected),
                ]
            )
    sidecar = {
        "trim_bounds": list(test.trim_bounds),
        "trim_q": test.config.trim_q,
        "h": test.config.h,
        "kernel": test.config.kernel,
        "min_side": test.config.min_side,
        "n_switches": test.n_switches,
        "n_estimated": test.n_estimated,
        "n_skipped": test.n_skipped,
        "n_retained": len(test.entries),
    }
    path.with_suffix(".meta.json").write_text(json.dumps(sidecar) + "\n")


def load_test_set(path: str | Path, cfg: RddConfig | None = None) -> CausalTestSet:
    path = Path(path)
    entries = []
    with path.open() as fh:
        for row in csv.DictReader(fh):
            entries.append(
                RddEntry(
                    series_id=row["series_id"],
                    t_i=int(row["t_i"]),
                    t_before=float(row["T_before"]),
                    t_after=float(row["T_after"]),
                    cate_hat=float(row["cate_hat"]),
                    n_left=int(row["n_left"]),
                    n_right=int(row["n_right"]),
                    beta=np.array(
                        [float(row["beta0"]), float(row["beta1"]), float(row["beta2"]), float(row["beta3"])]
                    ),
                    corrected=bool(int(row["corrected"])),
                )
            )
    meta_path = path.with_suffix(".meta.json")
    bounds = (-np.inf, np.inf)
    n_switches = n_estimated = n_skipped = 0
    if meta_path.exists():
        meta = json.loads(meta_path.read_text())
        bounds = tuple(meta.get("trim_bounds", bounds))
        n_switches = meta.get("n_switches", 0)
        n_estimated = meta.get("n_estimated", 0)
        n_skipped = meta.get("n_skipped", 0)
    return CausalTestSet(
        entries=entries,
        config=cfg or RddConfig(),
        trim_bounds=bounds,
        n_switches=n_switches,
        n_estimated=n_estimated,
        n_skipped=n_skipped,
    )
