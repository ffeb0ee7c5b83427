"""Gaussian-copula factor model of portfolio credit loss.

Obligor ``i`` in sector ``s`` has credit quality
``A_i = sqrt(1 - v_s^2) X_s + v_s eps_i`` with sector factors ``X ~ N(0, Sigma)``
(unit diagonal) and independent ``eps_i ~ N(0, 1)``. It defaults when
``A_i <= Phi^-1(p_i)``. Losses are fractions of total exposure. Only the
factor mean is importance-sampled; ``eps`` is always drawn from ``N(0, I)``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.stats import norm

from .density import GaussianFamily


class FormatError(ValueError):
    """Malformed input file; the message carries ``path:line``."""


@dataclass(frozen=True)
class Obligor:
    exposure: float
    pd: float
    sector: int  # 1-based

    def __post_init__(self):
        if not self.exposure >= 0:
            raise ValueError("exposure must be nonnegative")
        if not 0.0 < self.pd < 1.0:
            raise ValueError(f"default probability {self.pd} outside (0, 1)")
        if self.sector < 1:
            raise ValueError("sector indices start at 1")


class SectorModel:
    """Sector factor covariance ``Sigma`` (unit diagonal) and idiosyncratic loadings ``v``."""

    def __init__(self, cov, loadings):
        cov = np.atleast_2d(np.asarray(cov, dtype=float))
        v = np.atleast_1d(np.asarray(loadings, dtype=float))
        if cov.shape != (len(v), len(v)):
            raise ValueError(f"covariance shape {cov.shape} does not match {len(v)} loadings")
        if not np.allclose(np.diag(cov), 1.0, rtol=0, atol=1e-12):
            raise ValueError("factor covariance must have unit diagonal")
        if np.any(v <= 0) or np.any(v >= 1):
            raise ValueError("idiosyncratic loadings must lie in (0, 1)")
        self.family = GaussianFamily(cov)  # validates symmetry and definiteness
        self.cov = self.family.cov
        self.loadings = v
        self.k = len(v)

    @classmethod
    def equicorrelated(cls, k: int, rho: float, loadings) -> "SectorModel":
        cov = np.full((k, k), float(rho))
        np.fill_diagonal(cov, 1.0)
        return cls(cov, loadings)

    def __repr__(self) -> str:
        return f"SectorModel(k={self.k})"


class Portfolio:
    """Obligors plus sector model, stored as arrays for vectorized loss evaluation."""

    def __init__(self, obligors, sectors: SectorModel):
        obligors = list(obligors)
        if not obligors:
            raise ValueError("portfolio needs at least one obligor")
        self.obligors = obligors
        self.sectors = sectors
        self.exposure = np.array([o.exposure for o in obligors], dtype=float)
        self.pd = np.array([o.pd for o in obligors], dtype=float)
        self.sector = np.array([o.sector for o in obligors], dtype=np.int64) - 1
        if self.sector.max() >= sectors.k:
            raise ValueError(f"sector index {self.sector.max() + 1} exceeds k={sectors.k}")
        self.total = float(self.exposure.sum())
        if not self.total > 0:
            raise ValueError("total exposure must be positive")
        self.thresholds = calibrate_thresholds(self.pd)
        v = sectors.loadings[self.sector]
        self.factor_loading = np.sqrt(1.0 - v * v)
        self.idio_loading = v

    @property
    def m(self) -> int:
        return len(self.exposure)

    @property
    def k(self) -> int:
        return self.sectors.k

    @property
    def family(self) -> GaussianFamily:
        return self.sectors.family

    @property
    def expected_loss(self) -> float:
        return float(self.exposure @ self.pd) / self.total

    def loss(self, x, eps) -> np.ndarray | float:
        """Loss fraction for factor draws ``x`` (``(k,)`` or ``(C, k)``) and matching ``eps``."""
        x = np.asarray(x, dtype=float)
        eps = np.asarray(eps, dtype=float)
        if x.shape[-1] != self.k or eps.shape[-1] != self.m or x.shape[:-1] != eps.shape[:-1]:
            raise ValueError(f"dimension mismatch: x {x.shape}, eps {eps.shape} for k={self.k}, m={self.m}")
        # built in a fresh C-ordered array so each row is summed in the same
        # order whether it is evaluated alone or inside a batch
        a = self.idio_loading * eps
        a += self.factor_loading * x[..., self.sector]
        out = np.sum(np.where(a <= self.thresholds, self.exposure, 0.0), axis=-1) / self.total
        return out if np.ndim(out) else float(out)


def calibrate_thresholds(p) -> np.ndarray:
    """``Phi^-1(p_i)``."""
    p = np.asarray(p, dtype=float)
    if np.any(~(p > 0)) or np.any(~(p < 1)):
        raise ValueError("default probabilities must lie in (0, 1)")
    return norm.ppf(p)


def portfolio_loss(x, eps, portfolio: Portfolio):
    return portfolio.loss(x, eps)


def simulate_loss(portfolio: Portfolio, theta_is, family, rng: np.random.Generator) -> tuple[float, float]:
    """One scenario under the factor mean ``theta_is``: ``(loss, w_X(theta_is))``."""
    x = family.sample(theta_is, rng)
    eps = rng.standard_normal(portfolio.m)
    return portfolio.loss(x, eps), float(family.likelihood_ratio(x, theta_is))


class IdiosyncraticStream:
    """Rows of ``eps`` for one chain, drawn in blocks of ``block`` rows."""

    def __init__(self, rng: np.random.Generator, m: int, block: int = 256):
        self.rng = rng
        self.m = m
        self.block = block
        self._buf = np.empty((0, m))
        self._i = 0

    def next(self) -> np.ndarray:
        if self._i == len(self._buf):
            self._buf = self.rng.standard_normal((self.block, self.m))
            self._i = 0
        self._i += 1
        return self._buf[self._i - 1]


class LossMap:
    """Factor-to-loss map ``Psi(x)`` for one chain; each call consumes one fresh ``eps`` row."""

    def __init__(self, portfolio: Portfolio, rng: np.random.Generator, block: int = 256):
        self.portfolio = portfolio
        self.eps = IdiosyncraticStream(rng, portfolio.m, block)

    def __call__(self, x) -> float:
        return self.portfolio.loss(x, self.eps.next())


class BatchLossMap:
    """Vectorized :class:`LossMap` over chains; row ``c`` uses generator ``rngs[c]``."""

    def __init__(self, portfolio: Portfolio, rngs, block: int = 256):
        self.portfolio = portfolio
        self.rngs = list(rngs)
        self.block = block
        self._buf = None
        self._i = block

    def __call__(self, x) -> np.ndarray:
        if self._i == self.block:
            self._buf = np.stack([g.standard_normal((self.block, self.portfolio.m)) for g in self.rngs])
            self._i = 0
        self._i += 1
        return self.portfolio.loss(x, self._buf[:, self._i - 1])


def crude_losses(portfolio: Portfolio, x, rng: np.random.Generator, block: int = 256) -> np.ndarray:
    """Losses for factor rows ``x`` with ``eps`` drawn from ``rng`` block by block.

    Block-aligned with :class:`LossMap`, so the same generator yields the same
    losses as a chain whose draws are ``x``.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    out = np.empty(len(x))
    for s in range(0, len(x), block):
        eps = rng.standard_normal((block, portfolio.m))
        rows = x[s:s + block]
        out[s:s + len(rows)] = portfolio.loss(rows, eps[: len(rows)])
    return out


@dataclass(frozen=True)
class PortfolioSpec:
    """Recipe for a synthetic portfolio.

    Default probabilities are log-uniform on ``p_range``, exposures lognormal
    with log-scale ``exposure_sigma`` (or all equal when it is 0), sector
    loadings uniform on ``v_range``, sectors assigned uniformly. The factor
    covariance is one-factor plus diagonal, ``Sigma = beta beta^T + diag(1 - beta^2)``,
    with ``beta_j = sqrt(correlation) * (1 + jitter * u_j)``, ``u_j`` uniform
    on [-1, 1]. With ``jitter = 0`` this is the equicorrelation matrix.
    """

    m: int = 2000
    k: int = 14
    p_range: tuple = (0.001, 0.02)
    exposure_sigma: float = 1.0
    v_range: tuple = (0.5, 0.8)
    correlation: float = 0.3
    jitter: float = 0.25

    def __post_init__(self):
        lo, hi = self.p_range
        if not (self.m >= 1 and self.k >= 1):
            raise ValueError("m and k must be positive")
        if not 0 < lo <= hi < 1:
            raise ValueError("p_range must lie in (0, 1)")
        if not 0 < self.v_range[0] <= self.v_range[1] < 1:
            raise ValueError("v_range must lie in (0, 1)")
        if self.exposure_sigma < 0 or self.jitter < 0:
            raise ValueError("exposure_sigma and jitter must be nonnegative")
        if not 0 <= self.correlation < 1:
            raise ValueError("correlation must lie in [0, 1)")


def synthetic_portfolio(spec: PortfolioSpec, rng: np.random.Generator) -> Portfolio:
    """Reproducible random portfolio from ``spec``.

    Raises
    ------
    ValueError
        If the loadings make the factor covariance singular or indefinite.
    """
    lo, hi = spec.p_range
    pd = np.exp(rng.uniform(np.log(lo), np.log(hi), spec.m)) if hi > lo else np.full(spec.m, lo)
    if spec.exposure_sigma > 0:
        exposure = rng.lognormal(0.0, spec.exposure_sigma, spec.m)
    else:
        exposure = np.ones(spec.m)
    sector = rng.integers(1, spec.k + 1, spec.m) if spec.k > 1 else np.ones(spec.m, dtype=int)
    v = rng.uniform(spec.v_range[0], spec.v_range[1], spec.k)
    beta = np.sqrt(spec.correlation) * (1.0 + spec.jitter * rng.uniform(-1.0, 1.0, spec.k))
    if np.any(beta >= 1):
        raise ValueError("correlation and jitter give factor loadings >= 1 (covariance not positive definite)")
    cov = np.outer(beta, beta)
    np.fill_diagonal(cov, 1.0)
    obligors = [Obligor(float(c), float(p), int(s)) for c, p, s in zip(exposure, pd, sector)]
    return Portfolio(obligors, SectorModel(cov, v))


# -- file formats ---------------------------------------------------------------

def _floats(text: str, where: str) -> list[float]:
    try:
        return [float(t) for t in text.split(",") if t.strip()]
    except ValueError as exc:
        raise FormatError(f"{where}: {exc}") from None


def read_sector_model(path) -> SectorModel:
    """Read a sector model file.

    Line 1 holds ``k``; line 2 the ``k`` comma-separated loadings; then either
    one line with a single equicorrelation value or ``k`` lines forming the
    full covariance matrix. Blank lines and lines starting with ``#`` are
    skipped.
    """
    path = Path(path)
    rows = []
    for no, raw in enumerate(path.read_text().splitlines(), 1):
        line = raw.strip()
        if line and not line.startswith("#"):
            rows.append((no, line))
    if len(rows) < 3:
        raise FormatError(f"{path}: expected k, loadings and correlation lines")
    no, line = rows[0]
    try:
        k = int(line)
    except ValueError:
        raise FormatError(f"{path}:{no}: expected sector count, got {line!r}") from None
    if k < 1:
        raise FormatError(f"{path}:{no}: sector count must be positive")
    no, line = rows[1]
    v = _floats(line, f"{path}:{no}")
    if len(v) != k:
        raise FormatError(f"{path}:{no}: expected {k} loadings, got {len(v)}")
    rest = rows[2:]
    try:
        if len(rest) == 1 and len(_floats(rest[0][1], f"{path}:{rest[0][0]}")) == 1 and k > 1:
            return SectorModel.equicorrelated(k, _floats(rest[0][1], "")[0], v)
        if len(rest) != k:
            raise FormatError(f"{path}:{rest[0][0]}: expected 1 correlation value or {k} matrix rows")
        cov = []
        for no, line in rest:
            row = _floats(line, f"{path}:{no}")
            if len(row) != k:
                raise FormatError(f"{path}:{no}: expected {k} values, got {len(row)}")
            cov.append(row)
        return SectorModel(cov, v)
    except FormatError:
        raise
    except ValueError as exc:
        raise FormatError(f"{path}:{rows[2][0]}: {exc}") from None


def write_sector_model(sectors: SectorModel, path) -> None:
    with open(Path(path), "w") as fh:
        fh.write(f"{sectors.k}\n")
        fh.write(",".join(repr(float(v)) for v in sectors.loadings) + "\n")
        for row in sectors.cov:
            fh.write(",".join(repr(float(c)) for c in row) + "\n")


def read_portfolio(path, sectors: SectorModel) -> Portfolio:
    """Read a CSV with header ``exposure,pd,sector`` (sectors 1-based)."""
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["exposure", "pd", "sector"]:
            raise FormatError(f"{path}:1: header must be exposure,pd,sector")
        obligors = []
        for no, row in enumerate(reader, 2):
            if not row or not "".join(row).strip():
                continue
            if len(row) != 3:
                raise FormatError(f"{path}:{no}: expected 3 fields, got {len(row)}")
            try:
                ob = Obligor(float(row[0]), float(row[1]), int(row[2]))
            except ValueError as exc:
                raise FormatError(f"{path}:{no}: {exc}") from None
            if ob.sector > sectors.k:
                raise FormatError(f"{path}:{no}: sector {ob.sector} exceeds k={sectors.k}")
            obligors.append(ob)
    if not obligors:
        raise FormatError(f"{path}: no obligors")
    return Portfolio(obligors, sectors)


def write_portfolio(portfolio: Portfolio, path) -> None:
    with open(Path(path), "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(["exposure", "pd", "sector"])
        for o in portfolio.obligors:
            out.writerow([repr(float(o.exposure)), repr(float(o.pd)), o.sector])
