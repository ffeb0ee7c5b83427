"""Weighted empirical distribution functions and quantile estimators.

Three generalizations of the ECDF to weighted samples ``(Y_i, w_i)``:

``renorm``  ``F(y) = sum w_i 1{Y_i <= y} / (nu * sum w_i)``
``left``    ``F(y) = sum w_i 1{Y_i <= y} / nu``
``right``   ``F(y) = 1 - sum w_i 1{Y_i > y} / nu``

Quantiles are generalized inverses ``inf{y : F(y) >= alpha}``. The
normalization ``nu = nu(n)`` is either the plain one (1 or ``n``), a
law-of-iterated-logarithm correction that removes oscillation at non-unique
quantiles, or the Feldman-Tucker order-statistic index for unit weights.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .martingale import lil_phi

KINDS = ("renorm", "left", "right")
MODES = ("identity", "lil", "feldman_tucker")


class LevelUnreachableError(ValueError):
    """The ECDF never reaches the requested level, so the quantile is undefined."""


class NormalizationWarning(UserWarning):
    """The normalization correction is larger than the sample size itself."""


@dataclass(frozen=True)
class WeightedSample:
    """Loss values ``y`` with likelihood-ratio weights ``w`` (same length)."""

    y: np.ndarray
    w: np.ndarray

    def __post_init__(self):
        y = np.atleast_1d(np.asarray(self.y, dtype=float))
        w = np.ones_like(y) if self.w is None else np.atleast_1d(np.asarray(self.w, dtype=float))
        if y.shape != w.shape or y.ndim != 1:
            raise ValueError(f"y and w must be 1-d of equal length, got {y.shape} and {w.shape}")
        if not np.all(np.isfinite(w)) or np.any(w <= 0):
            raise ValueError("weights must be positive and finite")
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "w", w)

    @classmethod
    def unweighted(cls, y) -> "WeightedSample":
        return cls(y, None)

    def __len__(self) -> int:
        return len(self.y)


def _as_sample(samples) -> WeightedSample:
    if isinstance(samples, WeightedSample):
        return samples
    y, w = samples
    return WeightedSample(y, w)


@dataclass(frozen=True)
class NormalizationSpec:
    """How ``nu(n)`` is chosen.

    ``v_hat`` and ``v_alpha`` are plug-in values for the variance of the
    weights and of the weighted tail indicator at the limit parameter.
    ``v_alpha`` defaults to its universal bound 1/4; with unit weights it
    equals the Bernoulli variance ``w_alpha`` used by the ``feldman_tucker``
    index. ``v_hat`` is only needed by the ``renorm`` kind in ``lil`` mode;
    when omitted it is estimated from the sample. ``k``, ``gamma``, ``K`` are
    the Feldman-Tucker constants.
    """

    mode: str = "identity"
    eta: float = 0.1
    v_hat: float | None = None
    v_alpha: float = 0.25
    k: float = 0.1
    gamma: float = 0.25
    K: float = 1.0

    def __post_init__(self):
        mode = {"ft": "feldman_tucker"}.get(self.mode, self.mode)
        object.__setattr__(self, "mode", mode)
        if mode not in MODES:
            raise ValueError(f"unknown normalization mode {self.mode!r}")
        if not self.eta > 0:
            raise ValueError("eta must be positive")
        if not self.v_alpha > 0:
            raise ValueError("v_alpha must be positive")
        if self.v_hat is not None and not self.v_hat > 0:
            raise ValueError("v_hat must be positive")
        if not 0 < self.gamma < 0.5:
            raise ValueError("gamma must lie in (0, 1/2)")
        if not self.k > 0 or not self.K > 0:
            raise ValueError("k and K must be positive")


def _check_alpha(alpha: float) -> None:
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must lie in (0, 1), got {alpha}")


def feldman_tucker_index(n: int, alpha: float, spec: NormalizationSpec) -> int:
    """``floor(n alpha) - ceil((1 + k) sqrt(2 w_alpha n log log n))`` (1-based)."""
    loglog = math.log(math.log(max(n, math.exp(math.e))))
    idx = math.floor(n * alpha) - math.ceil((1.0 + spec.k) * math.sqrt(2.0 * spec.v_alpha * n * loglog))
    if idx < 1:
        raise ValueError(f"n={n} too small for this normalization")
    if math.floor(n * alpha) - idx > spec.K * n ** (0.5 + spec.gamma):
        warnings.warn("Feldman-Tucker upper bound K n^(1/2+gamma) violated", NormalizationWarning)
    return idx


def normalization_nu(n: int, alpha: float, kind: str = "right", spec: NormalizationSpec | None = None) -> float:
    """The normalization value ``nu(n)`` for an ECDF of the given kind.

    In ``lil`` mode this is the boundary of the consistency condition:
    right ``n + (1+eta)/(1-alpha) phi(n v_alpha)``, left
    ``n - (1+eta)/alpha phi(n v_alpha)``, renorm
    ``(n - (1+eta)/alpha phi(n v_alpha)) / (n + (1+eta) phi(n v))``.
    In ``feldman_tucker`` mode the order-statistic index is returned.
    """
    spec = spec or NormalizationSpec()
    _check_alpha(alpha)
    if n < 1:
        raise ValueError("n must be at least 1")
    if kind not in KINDS:
        raise ValueError(f"unknown ECDF kind {kind!r}")
    if spec.mode == "identity":
        return 1.0 if kind == "renorm" else float(n)
    if spec.mode == "feldman_tucker":
        return float(feldman_tucker_index(n, alpha, spec))

    c = 1.0 + spec.eta
    tail = lil_phi(n * spec.v_alpha)
    if kind == "right":
        corr = c / (1.0 - alpha) * tail
        nu = n + corr
    elif kind == "left":
        corr = c / alpha * tail
        nu = n - corr
    else:
        if spec.v_hat is None:
            raise ValueError("renorm kind in lil mode needs v_hat")
        corr = c / alpha * tail
        nu = (n - corr) / (n + c * lil_phi(n * spec.v_hat))
    if nu <= 0:
        raise ValueError(f"n={n} too small for this normalization")
    if corr > n:
        warnings.warn(
            f"normalization dominates n: correction {corr:.4g} exceeds n={n}", NormalizationWarning
        )
    return float(nu)


class WeightedECDF:
    """Step-function ECDF of a weighted sample, one of three kinds.

    Values are stored on the sorted distinct sample points with weights of
    tied points aggregated; evaluation and inversion use binary search.
    """

    def __init__(self, samples, kind: str = "right", nu: float | None = None):
        if kind not in KINDS:
            raise ValueError(f"unknown ECDF kind {kind!r}")
        s = _as_sample(samples)
        if len(s) == 0:
            raise ValueError("empty sample")
        ys, inv = np.unique(s.y, return_inverse=True)
        mass = np.bincount(inv, weights=s.w, minlength=len(ys))
        self.kind = kind
        self.n = len(s)
        self.y = ys
        self.cum = np.cumsum(mass)
        # tail sums accumulated from the right keep small tails accurate
        rev = np.cumsum(mass[::-1])[::-1]
        self.tail = np.append(rev[1:], 0.0)
        self.total = float(rev[0])
        if nu is None:
            nu = 1.0 if kind == "renorm" else float(self.n)
        if not nu > 0:
            raise ValueError("nu must be positive")
        self.nu = float(nu)
        self.values = self._from_mass(self.cum, self.tail)
        self.floor = float(self._from_mass(np.zeros(1), np.full(1, self.total))[0])

    def _from_mass(self, cum, tail):
        if self.kind == "renorm":
            return cum / (self.nu * self.total)
        if self.kind == "left":
            return cum / self.nu
        # (nu - T) / nu rather than 1 - T / nu: with unit weights and nu = n
        # this is exactly count / n, the same float as the other kinds
        return (self.nu - tail) / self.nu

    def __call__(self, y):
        """Evaluate at arbitrary points (array or scalar)."""
        idx = np.searchsorted(self.y, np.asarray(y, dtype=float), side="right")
        vals = np.concatenate(([self.floor], self.values))[idx]
        return vals if np.ndim(vals) else float(vals)

    def inverse(self, alpha: float) -> float:
        """``inf{y : F(y) >= alpha}``; ``-inf`` if ``F`` already exceeds ``alpha`` below the data."""
        _check_alpha(alpha)
        if self.floor >= alpha:
            return -math.inf
        j = int(np.searchsorted(self.values, alpha, side="left"))
        if j == len(self.values):
            raise LevelUnreachableError(
                f"estimator undefined at alpha={alpha} for this sample (sup F = {self.values[-1]:.6g})"
            )
        return float(self.y[j])

    def upper_inverse(self, alpha: float) -> float:
        """``sup{y : F(y) <= alpha}``."""
        _check_alpha(alpha)
        if self.floor > alpha:
            return -math.inf
        j = int(np.searchsorted(self.values, alpha, side="right"))
        return math.inf if j == len(self.values) else float(self.y[j])

    def to_csv(self, path) -> None:
        """Write columns y, F_value, kind, nu."""
        with open(Path(path), "w", newline="") as fh:
            out = csv.writer(fh)
            out.writerow(["y", "F_value", "kind", "nu"])
            for y, v in zip(self.y, self.values):
                out.writerow([f"{y:.6g}", f"{v:.6g}", self.kind, f"{self.nu:.6g}"])


def generalized_inverse(F: WeightedECDF, alpha: float) -> float:
    return F.inverse(alpha)


@dataclass(frozen=True)
class QuantilePair:
    lower: float
    upper: float

    def __post_init__(self):
        if self.lower > self.upper:
            raise ValueError("lower quantile exceeds upper quantile")


def _resolve_spec(s: WeightedSample, kind: str, spec: NormalizationSpec) -> NormalizationSpec:
    if spec.mode == "lil" and kind == "renorm" and spec.v_hat is None:
        v = float(np.var(s.w, ddof=1)) if len(s) > 1 else 0.0
        return NormalizationSpec(**{**spec.__dict__, "v_hat": max(v, 1e-12)})
    return spec


def build_ecdf(samples, alpha: float, kind: str = "right", spec: NormalizationSpec | None = None) -> WeightedECDF:
    """ECDF of the requested kind with ``nu(n)`` taken from ``spec``."""
    spec = spec or NormalizationSpec()
    if spec.mode == "feldman_tucker":
        raise ValueError("feldman_tucker mode defines an order statistic, not an ECDF")
    s = _as_sample(samples)
    spec = _resolve_spec(s, kind, spec)
    return WeightedECDF(s, kind, normalization_nu(len(s), alpha, kind, spec))


def quantile_estimate(samples, alpha: float, kind: str = "right", spec: NormalizationSpec | None = None) -> float:
    """Weighted quantile estimate at level ``alpha``.

    In ``feldman_tucker`` mode the sample must carry unit weights and the
    order statistic ``Y_{(nu(n))}`` is returned regardless of ``kind``.
    """
    spec = spec or NormalizationSpec()
    s = _as_sample(samples)
    if len(s) == 0:
        raise ValueError("empty sample")
    if spec.mode == "feldman_tucker":
        if not np.all(s.w == 1.0):
            raise ValueError("feldman_tucker mode requires unit weights")
        idx = feldman_tucker_index(len(s), alpha, spec)
        return float(np.partition(s.y, idx - 1)[idx - 1])
    return build_ecdf(s, alpha, kind, spec).inverse(alpha)


def quantile_pair(samples, alpha: float, kind: str = "renorm", spec: NormalizationSpec | None = None) -> QuantilePair:
    """Lower and upper quantile estimates from the same ECDF."""
    F = build_ecdf(samples, alpha, kind, spec)
    lower = F.inverse(alpha)
    return QuantilePair(lower, max(lower, F.upper_inverse(alpha)))


def tail_probability(samples, level: float, kind: str = "right", spec: NormalizationSpec | None = None,
                     alpha: float = 0.999) -> float:
    """ECDF value at loss ``level``, clipped to [0, 1].

    ``alpha`` only matters for the ``lil`` normalization, whose correction
    depends on the target level.
    """
    spec = spec or NormalizationSpec()
    F = build_ecdf(samples, alpha, kind, spec)
    return float(min(1.0, max(0.0, F(level))))


def adaptive_mean(f_values, weights=None) -> float:
    """``(1/n) sum w_i f_i``; unit weights if ``weights`` is None."""
    f = np.asarray(f_values, dtype=float)
    if f.size == 0:
        raise ValueError("empty sample")
    if weights is None:
        return float(np.mean(f))
    w = np.asarray(weights, dtype=float)
    if w.shape != f.shape:
        raise ValueError("weights and values differ in length")
    return float(np.mean(w * f))


def estimate_variance_proxies(samples, q: float) -> tuple[float, float]:
    """Sample variances of ``w_i`` and ``w_i 1{Y_i > q}``, for plug-in use."""
    s = _as_sample(samples)
    if len(s) < 2:
        raise ValueError("need at least two samples")
    return float(np.var(s.w, ddof=1)), float(np.var(s.w * (s.y > q), ddof=1))
