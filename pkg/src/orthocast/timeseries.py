"""Panel time-series data model, validation, featurization, and file formats.

A :class:`TimeSeries` holds one unit's static features ``S`` (length p_s),
temporal features ``X`` (L x p_x, row t-1 is the step-t measurement),
treatments ``T`` (length L), outcomes ``Y`` (length L), and an intervention
cutoff ``tau``.  Time steps are 1-based: step t lives at array row t-1.
Steps 1..tau are the observational history whose treatments and outcomes may
be used as features; forecasts concern steps t > tau.

The causal context for a forecast at step t is the tuple
(S, X up to t, T up to tau, Y up to tau).  :func:`featurize` realizes that
variable-length context as a fixed vector using a lag window; the layout is
documented on the function.

File formats
------------
JSONL: first line is a metadata record
``{"d": int, "p_s": int, "p_x": int, "encoding": str}``; every following
line is one series with keys ``id``, ``static``, ``temporal`` (list of
per-step rows), ``treatments``, ``outcomes``, ``tau`` and optionally
``weekday``.

CSV: long format with header
``series_id,t,weekday,treatment,outcome,x_1,...,x_{p_x}`` plus a sidecar
static-features file ``<name>.static.csv`` with header
``series_id,tau,s_1,...,s_{p_s}`` and a sidecar ``<name>.meta.json`` holding
the same metadata record as the JSONL header line.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .encodings import CATEGORICAL_KINDS, LINEAR, check_encoding_kind
from .errors import ParseError, ValidationError


@dataclass
class TimeSeries:
    """One unit of the panel; arrays are row-aligned over steps 1..L."""

    id: str
    static_features: np.ndarray
    temporal_features: np.ndarray
    treatments: np.ndarray
    outcomes: np.ndarray
    tau: int
    weekday: np.ndarray | None = None

    @property
    def length(self) -> int:
        return self.outcomes.shape[0]

    def outcome_at(self, t: int) -> float:
        return float(self.outcomes[t - 1])

    def treatment_at(self, t: int) -> float:
        return float(self.treatments[t - 1])

    def weekday_at(self, t: int) -> int:
        if self.weekday is None:
            raise ValidationError(f"series {self.id!r} has no weekday labels")
        return int(self.weekday[t - 1])


@dataclass
class Dataset:
    """A validated collection of series sharing dimensions and encoding."""

    series: list[TimeSeries]
    d: int
    encoding_kind: str
    feature_dims: tuple[int, int]  # (p_s, p_x)

    def __post_init__(self):
        self.encoding_kind = check_encoding_kind(self.encoding_kind)

    def __len__(self) -> int:
        return len(self.series)

    def by_id(self, series_id: str) -> TimeSeries:
        for s in self.series:
            if s.id == series_id:
                return s
        raise KeyError(series_id)

    def subset(self, indices: list[int]) -> "Dataset":
        return Dataset(
            series=[self.series[i] for i in indices],
            d=self.d,
            encoding_kind=self.encoding_kind,
            feature_dims=self.feature_dims,
        )


def validate_series(s: TimeSeries, d: int, dims: tuple[int, int]) -> list[str]:
    """Return a list of invariant violations (empty iff the series is valid)."""
    p_s, p_x = dims
    violations: list[str] = []
    L = s.length
    if s.static_features.shape != (p_s,):
        violations.append(f"static_features shape {s.static_features.shape} != ({p_s},)")
    if s.temporal_features.ndim != 2 or s.temporal_features.shape != (L, p_x):
        violations.append(
            f"temporal_features shape {s.temporal_features.shape} != ({L}, {p_x})"
        )
    if s.treatments.shape != (L,):
        violations.append(f"treatments length {s.treatments.shape[0]} != {L}")
    if s.weekday is not None:
        if s.weekday.shape != (L,):
            violations.append(f"weekday length {s.weekday.shape[0]} != {L}")
        elif not np.all((s.weekday >= 1) & (s.weekday <= 7)):
            violations.append("weekday labels outside [1, 7]")
    if not 1 <= s.tau < L:
        violations.append("tau out of range")
    if not np.all(np.isfinite(s.outcomes)):
        violations.append("non-finite outcome values")
    if not np.all(np.isfinite(s.static_features)):
        violations.append("non-finite static feature values")
    if not np.all(np.isfinite(s.temporal_features)):
        violations.append("non-finite temporal feature values")
    if d >= 2 and s.treatments.shape == (L,):
        rounded = np.round(s.treatments)
        if not np.all((rounded == s.treatments) & (rounded >= 1) & (rounded <= d)):
            violations.append("treatment index out of range")
    if d < 2 and not np.all(np.isfinite(s.treatments)):
        violations.append("non-finite treatment values")
    return violations


def validate_dataset(ds: Dataset) -> None:
    """Raise :class:`ValidationError` naming the first offending series."""
    seen: set[str] = set()
    d_check = ds.d if ds.encoding_kind in CATEGORICAL_KINDS else 1
    for s in ds.series:
        if s.id in seen:
            raise ValidationError(f"duplicate series id {s.id!r}")
        seen.add(s.id)
        violations = validate_series(s, d_check, ds.feature_dims)
        if violations:
            raise ValidationError(f"series {s.id!r}: " + "; ".join(violations))


# ---------------------------------------------------------------------------
# Featurization
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FeaturizerConfig:
    """Controls how the causal context is flattened into a fixed vector.

    ``lag_window_k`` recent temporal rows are included (older rows padded
    with ``pad_value`` plus a 0/1 availability mask per maskable lag);
    ``pre_tau_lags`` lags of (T, Y) at steps <= tau are included the same
    way.  ``include_aggregates`` adds mean/min/max of Y over 1..tau, and
    ``include_time`` adds a steps-to-end column so one shared model can be
    trained across forecast steps.
    """

    lag_window_k: int = 8
    pre_tau_lags: int = 4
    include_aggregates: bool = True
    normalize: bool = True
    include_time: bool = True
    pad_value: float = 0.0

    def __post_init__(self):
        if self.lag_window_k < 1:
            raise ValidationError("lag_window_k must be >= 1")
        if self.pre_tau_lags < 0:
            raise ValidationError("pre_tau_lags must be >= 0")

    def feature_length(self, p_s: int, p_x: int) -> int:
        k, p = self.lag_window_k, self.pre_tau_lags
        n = p_s
        n += k * p_x + (k - 1)          # X lags + masks for lags 1..k-1
        n += 2 * p + max(p - 1, 0)      # (T, Y) lags + masks for lags 1..p-1
        if self.include_aggregates:
            n += 3
        if self.include_time:
            n += 1
        return n


@dataclass
class FeatureStats:
    """Per-coordinate z-score statistics, computed on the training fold only."""

    mean: np.ndarray
    std: np.ndarray

    def apply(self, values: np.ndarray) -> np.ndarray:
        # zero-variance coordinates map to 0 instead of dividing by 0
        out = np.where(self.std > 0.0, (values - self.mean) / np.where(self.std > 0.0, self.std, 1.0), 0.0)
        return out


@dataclass
class FeatureContext:
    """A featurized causal context for series ``series_id`` at step ``t``."""

    values: np.ndarray
    t: int
    series_id: str


def featurize(
    s: TimeSeries,
    t: int,
    cfg: FeaturizerConfig,
    stats: FeatureStats | None = None,
) -> FeatureContext:
    """Flatten the causal context of series ``s`` at forecast step ``t``.

    Layout (in order):

    1. static features (p_s)
    2. temporal lags, newest first: X_t, X_{t-1}, ..., X_{t-k+1}  (k * p_x)
    3. temporal lag masks for lags 1..k-1 (1 if the lag exists, else 0)
    4. pre-cutoff (T, Y) lags, newest first: (T_tau, Y_tau), (T_{tau-1},
       Y_{tau-1}), ...  (2 * pre_tau_lags)
    5. (T, Y) lag masks for lags 1..pre_tau_lags-1
    6. mean/min/max of Y over steps 1..tau (if include_aggregates)
    7. steps to end of series, L - t (if include_time)

    Only treatments and outcomes at steps <= tau are ever read, and temporal
    features only up to step t; this is the leakage guard that keeps the
    context usable for counterfactual prediction at step t.
    """
    L = s.length
    if not s.tau < t <= L:
        raise ValidationError(
            f"featurize is only defined for forecast steps tau < t <= L; got t={t}, tau={s.tau}"
        )
    k = cfg.lag_window_k
    p = cfg.pre_tau_lags
    pad = cfg.pad_value
    parts: list[np.ndarray] = [np.asarray(s.static_features, dtype=float)]

    p_x = s.temporal_features.shape[1]
    x_lags = np.full((k, p_x), pad, dtype=float)
    x_mask = np.zeros(k)
    for j in range(k):
        step = t - j
        if step >= 1:
            x_lags[j] = s.temporal_features[step - 1]
            x_mask[j] = 1.0
    parts.append(x_lags.ravel())
    parts.append(x_mask[1:])  # lag 0 always exists for t >= 1

    ty_lags = np.full(2 * p, pad, dtype=float)
    ty_mask = np.zeros(max(p, 1))
    for j in range(p):
        step = s.tau - j
        if step >= 1:
            ty_lags[2 * j] = s.treatments[step - 1]
            ty_lags[2 * j + 1] = s.outcomes[step - 1]
            ty_mask[j] = 1.0
    parts.append(ty_lags)
    if p > 1:
        parts.append(ty_mask[1:p])

    if cfg.include_aggregates:
        y_hist = s.outcomes[: s.tau]
        parts.append(np.array([y_hist.mean(), y_hist.min(), y_hist.max()]))
    if cfg.include_time:
        parts.append(np.array([float(L - t)]))

    values = np.concatenate(parts)
    if stats is not None:
        values = stats.apply(values)
    if not np.all(np.isfinite(values)):
        raise ValidationError(f"non-finite feature values for series {s.id!r} at t={t}")
    return FeatureContext(values=values, t=t, series_id=s.id)


def forecast_steps(s: TimeSeries) -> range:
    """Steps t with tau < t <= L, 1-based."""
    return range(s.tau + 1, s.length + 1)


def raw_feature_matrix(ds: Dataset, cfg: FeaturizerConfig) -> np.ndarray:
    """Stack unnormalized feature vectors for every forecast step of ``ds``."""
    rows = [
        featurize(s, t, cfg, stats=None).values for s in ds.series for t in forecast_steps(s)
    ]
    if not rows:
        raise ValidationError("dataset has no forecast steps to featurize")
    return np.vstack(rows)


def compute_feature_stats(ds: Dataset, cfg: FeaturizerConfig) -> FeatureStats:
    """Z-score statistics over all forecast-step rows of a training fold."""
    matrix = raw_feature_matrix(ds, cfg)
    return FeatureStats(mean=matrix.mean(axis=0), std=matrix.std(axis=0))


# ---------------------------------------------------------------------------
# File formats
# ---------------------------------------------------------------------------


def _series_to_record(s: TimeSeries) -> dict:
    record = {
        "id": s.id,
        "static": s.static_features.tolist(),
        "temporal": s.temporal_features.tolist(),
        "treatments": s.treatments.tolist(),
        "outcomes": s.outcomes.tolist(),
        "tau": int(s.tau),
    }
    if s.weekday is not None:
        record["weekday"] = s.weekday.tolist()
    return record


def _series_from_record(record: dict, line: int) -> TimeSeries:
    try:
        weekday = record.get("weekday")
        return TimeSeries(
            id=str(record["id"]),
            static_features=np.asarray(record["static"], dtype=float),
            temporal_features=np.atleast_2d(np.asarray(record["temporal"], dtype=float)),
            treatments=np.asarray(record["treatments"], dtype=float),
            outcomes=np.asarray(record["outcomes"], dtype=float),
            tau=int(record["tau"]),
            weekday=None if weekday is None else np.asarray(weekday, dtype=int),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"malformed series record: {exc}", line=line) from exc


def save_dataset(ds: Dataset, path: str | Path, format: str = "jsonl") -> None:
    """Write a dataset in the JSONL or CSV format documented above."""
    path = Path(path)
    if format == "jsonl":
        meta = {
            "d": int(ds.d),
            "p_s": int(ds.feature_dims[0]),
            "p_x": int(ds.feature_dims[1]),
            "encoding": ds.encoding_kind,
        }
        with path.open("w") as fh:
            fh.write(json.dumps(meta) + "\n")
            for s in ds.series:
                fh.write(json.dumps(_series_to_record(s)) + "\n")
    elif format == "csv":
        _save_dataset_csv(ds, path)
    else:
        raise ParseError(f"unknown dataset format {format!r}")


def _save_dataset_csv(ds: Dataset, path: Path) -> None:
    p_s, p_x = ds.feature_dims
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["series_id", "t", "weekday", "treatment", "outcome"]
            + [f"x_{j}" for j in range(1, p_x + 1)]
        )
        for s in ds.series:
            for t in range(1, s.length + 1):
                wd = "" if s.weekday is None else int(s.weekday[t - 1])
                writer.writerow(
                    [s.id, t, wd, repr(float(s.treatments[t - 1])), repr(float(s.outcomes[t - 1]))]
                    + [repr(float(v)) for v in s.temporal_features[t - 1]]
                )
    static_path = path.with_suffix(".static.csv")
    with static_path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["series_id", "tau"] + [f"s_{j}" for j in range(1, p_s + 1)])
        for s in ds.series:
            writer.writerow([s.id, int(s.tau)] + [repr(float(v)) for v in s.static_features])
    meta_path = path.with_suffix(".meta.json")
    meta_path.write_text(
        json.dumps(
            {
                "d": int(ds.d),
                "p_s": int(p_s),
                "p_x": int(p_x),
                "encoding": ds.encoding_kind,
            }
        )
        + "\n"
    )


def load_dataset(path: str | Path, format: str = "jsonl") -> Dataset:
    """Load and validate a dataset; raises :class:`ParseError` with the line
    number on malformed input and :class:`ValidationError` naming the series
    on invariant violations."""
    path = Path(path)
    if format == "jsonl":
        ds = _load_dataset_jsonl(path)
    elif format == "csv":
        ds = _load_dataset_csv(path)
    else:
        raise ParseError(f"unknown dataset format {format!r}")
    validate_dataset(ds)
    return ds


def _load_dataset_jsonl(path: Path) -> Dataset:
    with path.open() as fh:
        lines = fh.read().splitlines()
    lines = [ln for ln in lines if ln.strip()]
    if not lines:
        raise ParseError("empty dataset")
    try:
        meta = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise ParseError(f"invalid metadata record: {exc}", line=1) from exc
    for key in ("d", "p_s", "p_x", "encoding"):
        if key not in meta:
            raise ParseError(f"metadata record missing key {key!r}", line=1)
    series = []
    for i, line in enumerate(lines[1:], start=2):
        try:
            record = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ParseError(f"invalid JSON: {exc}", line=i) from exc
        series.append(_series_from_record(record, line=i))
    if not series:
        raise ParseError("empty dataset")
    return Dataset(
        series=series,
        d=int(meta["d"]),
        encoding_kind=str(meta["encoding"]),
        feature_dims=(int(meta["p_s"]), int(meta["p_x"])),
    )


def _load_dataset_csv(path: Path) -> Dataset:
    meta_path = path.with_suffix(".meta.json")
    static_path = path.with_suffix(".static.csv")
    if not meta_path.exists():
        raise ParseError(f"missing metadata sidecar {meta_path}")
    meta = json.loads(meta_path.read_text())
    p_s, p_x = int(meta["p_s"]), int(meta["p_x"])

    statics: dict[str, tuple[int, np.ndarray]] = {}
    with static_path.open() as fh:
        for i, row in enumerate(csv.DictReader(fh), start=2):
            try:
                statics[row["series_id"]] = (
                    int(row["tau"]),
                    np.array([float(row[f"s_{j}"]) for j in range(1, p_s + 1)]),
                )
            except (KeyError, TypeError, ValueError) as exc:
                raise ParseError(f"malformed static row: {exc}", line=i) from exc

    rows: dict[str, list[tuple]] = {}
    with path.open() as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise ParseError("empty dataset")
        for i, row in enumerate(reader, start=2):
            try:
                wd = row.get("weekday", "")
                rows.setdefault(row["series_id"], []).append(
                    (
                        int(row["t"]),
                        None if wd in ("", None) else int(wd),
                        float(row["treatment"]),
                        float(row["outcome"]),
                        np.array([float(row[f"x_{j}"]) for j in range(1, p_x + 1)]),
                    )
                )
            except (KeyError, TypeError, ValueError) as exc:
                raise ParseError(f"malformed row: {exc}", line=i) from exc
    if not rows:
        raise ParseError("empty dataset")

    series = []
    for sid, items in rows.items():
        items.sort(key=lambda item: item[0])
        if sid not in statics:
            raise ValidationError(f"series {sid!r}: missing static-features row")
        tau, static = statics[sid]
        weekdays = [item[1] for item in items]
        series.append(
            TimeSeries(
                id=sid,
                static_features=static,
                temporal_features=np.vstack([item[4] for item in items]),
                treatments=np.array([item[2] for item in items]),
                outcomes=np.array([item[3] for item in items]),
                tau=tau,
                weekday=None if any(w is None for w in weekdays) else np.array(weekdays),
            )
        )
    return Dataset(
        series=series,
        d=int(meta["d"]),
        encoding_kind=str(meta["encoding"]),
        feature_dims=(p_s, p_x),
    )
