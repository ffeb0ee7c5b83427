"""Martingale and law-of-iterated-logarithm diagnostics for weighted traces.

Increments are ``xi_i = w_i f_i - mu``. ``[M]_n`` is the sum of squared
increments, ``<M>_n`` the sum of conditional second moments
``m_{f,2}(theta_{i-1}) - mu^2`` when those are supplied.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

E_E = math.exp(math.e)


def lil_phi(t):
    """``sqrt(2 t log log t)`` with ``t`` floored at ``e^e``."""
    t = np.maximum(np.asarray(t, dtype=float), E_E)
    out = np.sqrt(2.0 * t * np.log(np.log(t)))
    return out if out.ndim else float(out)


@dataclass
class MartingaleTrace:
    """Streaming accumulator for ``M_n``, ``[M]_n`` and optionally ``<M>_n``."""

    n: int = 0
    m: float = 0.0
    qv_total: float = 0.0
    qv_pred: float | None = None

    @property
    def s2(self) -> float:
        """Total-variance proxy: ``<M>_n`` when available, else ``[M]_n``."""
        return self.qv_pred if self.qv_pred is not None else self.qv_total

    def accumulate(self, xi: float, conditional_second_moment: float | None = None) -> "MartingaleTrace":
        if not math.isfinite(xi):
            raise ValueError(f"non-finite increment {xi!r}")
        self.n += 1
        self.m += xi
        self.qv_total += xi * xi
        if conditional_second_moment is not None:
            if self.qv_pred is None:
                if self.n != 1:
                    raise ValueError("conditional moments must be supplied from the first increment")
                self.qv_pred = 0.0
            self.qv_pred += conditional_second_moment
        return self


def accumulate(trace: MartingaleTrace, xi: float, conditional_second_moment: float | None = None) -> MartingaleTrace:
    return trace.accumulate(xi, conditional_second_moment)


@dataclass(frozen=True)
class MartingalePath:
    """Vectorized history of a trace; index ``i`` holds step ``n = i + 1``."""

    m: np.ndarray
    qv_total: np.ndarray
    qv_pred: np.ndarray | None = None

    @classmethod
    def from_increments(cls, xi, conditional_second_moments=None) -> "MartingalePath":
        xi = np.asarray(xi, dtype=float)
        if not np.all(np.isfinite(xi)):
            raise ValueError("non-finite increment")
        pred = None
        if conditional_second_moments is not None:
            cm = np.asarray(conditional_second_moments, dtype=float)
            if cm.shape != xi.shape:
                raise ValueError("conditional moments must match increments")
            pred = np.cumsum(cm)
        return cls(np.cumsum(xi), np.cumsum(xi * xi), pred)

    @property
    def n(self) -> np.ndarray:
        return np.arange(1, len(self.m) + 1)

    def final(self) -> MartingaleTrace:
        if len(self.m) == 0:
            return MartingaleTrace()
        pred = None if self.qv_pred is None else float(self.qv_pred[-1])
        return MartingaleTrace(len(self.m), float(self.m[-1]), float(self.qv_total[-1]), pred)

    def to_csv(self, path, eta: float = 0.1, weighting: str = "total") -> None:
        """Write columns n, M, QV_total, QV_pred, envelope, within."""
        w = self.qv_total if weighting == "total" else self.qv_pred
        if w is None:
            raise ValueError("predictable variation not available")
        env = LILBand(eta).envelope(w)
        with open(Path(path), "w", newline="") as fh:
            out = csv.writer(fh)
            out.writerow(["n", "M", "QV_total", "QV_pred", "envelope", "within"])
            for i in range(len(self.m)):
                pred = "" if self.qv_pred is None else f"{self.qv_pred[i]:.6g}"
                out.writerow([
                    i + 1, f"{self.m[i]:.6g}", f"{self.qv_total[i]:.6g}", pred,
                    f"{env[i]:.6g}", int(abs(self.m[i]) <= env[i]),
                ])


@dataclass(frozen=True)
class LILBand:
    """Envelope ``(1 + eta) * lil_phi(t)``."""

    eta: float = 0.1

    def __post_init__(self):
        if self.eta < 0:
            raise ValueError("eta must be nonnegative")

    def envelope(self, t):
        return (1.0 + self.eta) * lil_phi(t)


def variation_ratio(trace) -> float:
    """``[M]_n / <M>_n``."""
    if isinstance(trace, MartingalePath):
        trace = trace.final()
    if trace.qv_pred is None:
        raise ValueError("predictable quadratic variation was not supplied")
    if trace.qv_pred <= 0:
        raise ValueError("predictable quadratic variation is not positive")
    return trace.qv_total / trace.qv_pred


@dataclass(frozen=True)
class LILReport:
    fraction_within: float
    sup_ratio: float
    limsup_estimate: float
    n_checked: int


def lil_check(w, m, band: LILBand = LILBand(), n0: int = 100) -> LILReport:
    """Compare ``|M_n|`` with ``(1 + eta) phi(W_n)`` for steps ``n >= n0``.

    ``w`` and ``m`` are the histories of the weighting sequence (``[M]_n``,
    ``<M>_n`` or ``s_n^2``) and the martingale. ``limsup_estimate`` is the
    largest ``|M_n| / phi(W_n)`` over the last decade ``n >= N/10``: a
    finite-sample proxy, not the limit.
    """
    if n0 < 3:
        raise ValueError("n0 must be at least 3")
    w = np.asarray(w, dtype=float)
    m = np.asarray(m, dtype=float)
    if w.shape != m.shape:
        raise ValueError("w and m must have the same length")
    big_n = len(m)
    if big_n < n0:
        raise ValueError(f"trace of length {big_n} is shorter than n0={n0}")
    phi = lil_phi(w[n0 - 1:])
    ratio = np.abs(m[n0 - 1:]) / phi
    within = np.abs(m[n0 - 1:]) <= (1.0 + band.eta) * phi
    tail_start = max(n0, big_n // 10)
    tail = np.abs(m[tail_start - 1:]) / lil_phi(w[tail_start - 1:])
    return LILReport(
        fraction_within=float(np.mean(within)),
        sup_ratio=float(np.max(ratio)),
        limsup_estimate=float(np.max(tail)),
        n_checked=int(len(ratio)),
    )


def moment_estimate(x, theta_prev, family, f, p: float = 2.0) -> float:
    """Monte Carlo estimate of ``m_{f,p}(theta) = E_theta |w_X(theta) f(X)|^p``.

    ``x`` holds draws ``X_i ~ phi_{theta_prev}``; ``theta_prev`` is a single
    parameter or one row per draw. ``f`` is vectorized over rows of ``x``.
    """
    if p < 1:
        raise ValueError("p must be >= 1")
    x = np.atleast_2d(np.asarray(x, dtype=float))
    theta_prev = np.asarray(theta_prev, dtype=float)
    fx = np.asarray(f(x), dtype=float)
    if theta_prev.ndim <= 1:
        logw = family.log_likelihood_ratio(x, theta_prev)
    else:
        logw = np.array([family.log_likelihood_ratio(xi, ti) for xi, ti in zip(x, theta_prev)])
    vals = np.zeros_like(fx)
    nz = fx != 0
    vals[nz] = np.exp(p * (logw[nz] + np.log(np.abs(fx[nz]))))
    return float(np.mean(vals))
