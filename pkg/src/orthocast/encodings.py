"""Treatment encodings and CATE extraction from effect-model outputs.

Three encodings are supported for a treatment entering the effect model:

* ``one_hot``      — categorical index i in [1, d] mapped to the i-th unit
  vector; dimension i of the effect vector is the outcome shift of level i.
* ``cumulative``   — categorical index i mapped to a prefix of ones
  (1 in dims 1..i, 0 after); dimension i of the effect vector is the
  incremental shift of moving from level i-1 to level i.
* ``linear``       — a real-valued treatment kept as a scalar; the effect
  vector has a single multiplicative coefficient.

Treatment indices are 1-based everywhere in this package.
"""

from __future__ import annotations

import numpy as np

from .errors import ConfigError

ONE_HOT = "one_hot"
CUMULATIVE = "cumulative"
LINEAR = "linear"
ENCODING_KINDS = (ONE_HOT, CUMULATIVE, LINEAR)

CATEGORICAL_KINDS = (ONE_HOT, CUMULATIVE)


def check_encoding_kind(kind: str) -> str:
    """Validate an encoding name, accepting the hyphenated spelling too."""
    normalized = kind.replace("-", "_")
    if normalized not in ENCODING_KINDS:
        raise ConfigError(f"unknown encoding kind {kind!r}; expected one of {ENCODING_KINDS}")
    return normalized


def encoded_dim(kind: str, d: int) -> int:
    """Length of the encoded treatment vector (d for categorical, 1 for linear)."""
    kind = check_encoding_kind(kind)
    if kind == LINEAR:
        return 1
    if d < 2:
        raise ConfigError(f"categorical encodings require d >= 2, got d={d}")
    return d


def _check_index(treatment: float, d: int) -> int:
    i = int(treatment)
    if i != treatment or not 1 <= i <= d:
        raise ValueError(f"treatment index {treatment} out of range [1, {d}]")
    return i


def encode_treatment(treatment: float, d: int, kind: str) -> np.ndarray:
    """Encode a treatment as the vector that multiplies the effect model.

    Args:
        treatment: category index in [1, d] for categorical kinds, or a
            finite real value for the linear kind.
        d: treatment cardinality (ignored for linear).
        kind: one of ``one_hot``, ``cumulative``, ``linear``.
    """
    kind = check_encoding_kind(kind)
    if kind == LINEAR:
        value = float(treatment)
        if not np.isfinite(value):
            raise ValueError(f"linear treatment must be finite, got {treatment}")
        return np.array([value])
    i = _check_index(treatment, encoded_dim(kind, d))
    out = np.zeros(d)
    if kind == ONE_HOT:
        out[i - 1] = 1.0
    else:
        out[:i] = 1.0
    return out


def outcome_shift(theta: np.ndarray, treatment: float, kind: str) -> float:
    """Treatment-dependent shift of the outcome: dot(encode(T), theta)."""
    theta = np.asarray(theta, dtype=float)
    enc = encode_treatment(treatment, theta.shape[-1], kind)
    if enc.shape != theta.shape:
        raise ValueError(f"theta length {theta.shape} does not match encoding {enc.shape}")
    return float(enc @ theta)


def cate_from_theta(theta: np.ndarray, t_from: float, t_to: float, kind: str) -> float:
    """CATE of moving ``t_from`` -> ``t_to`` implied by an effect vector.

    Per encoding:
        linear:     theta[0] * (t_to - t_from)
        one_hot:    theta[t_to] - theta[t_from]        (1-based indices)
        cumulative: sum of theta over dims t_from+1 .. t_to, negated when
                    t_to < t_from (dimension 1 is never consumed).
    """
    kind = check_encoding_kind(kind)
    theta = np.asarray(theta, dtype=float)
    if kind == LINEAR:
        if theta.shape != (1,):
            raise ValueError(f"linear effect vector must have length 1, got {theta.shape}")
        return float(theta[0] * (float(t_to) - float(t_from)))
    d = theta.shape[0]
    a = _check_index(t_from, d)
    b = _check_index(t_to, d)
    if kind == ONE_HOT:
        return float(theta[b - 1] - theta[a - 1])
    if a == b:
        return 0.0
    if b > a:
        return float(np.sum(theta[a:b]))
    return -float(np.sum(theta[b:a]))


def treatment_frequencies(treatments: np.ndarray, d: int) -> np.ndarray:
    """Per-index observation frequency, a diagnostic for rarely-seen levels.

    Effect-vector dimensions for levels that are almost never observed are
    weakly identified; downstream consumers can inspect this to decide how
    much to trust per-level estimates.
    """
    treatments = np.asarray(treatments)
    counts = np.zeros(d)
    for i in range(1, d + 1):
        counts[i - 1] = np.sum(treatments == i)
    total = counts.sum()
    return counts / total if total > 0 else counts
