"""Experiment harness: crude Monte Carlo against adaptive importance sampling.

Streams are derived with :func:`aisq.rng.stream` from ``(seed, replication,
purpose)``. The crude sample of a replication is built from the same factor
and idiosyncratic streams its tuning chain consumes, so with tuning disabled
the two estimators coincide draw for draw.
"""

from __future__ import annotations

import csv
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import rng as streams
from .credit import BatchLossMap, PortfolioSpec, crude_losses, read_portfolio, read_sector_model, synthetic_portfolio
from .density import GaussianFamily
from .quantiles import NormalizationSpec, WeightedECDF, WeightedSample, build_ecdf, quantile_estimate
from .sa import CompactCovering, GradientSpec, StepSchedule, default_bridge, no_bridge, run_chains

SAMPLER_BLOCK = 1024
EPS_BLOCK = 64
MAX_BATCH = 64
FIXED_IDIOSYNCRATIC = 4
TUNE_REPLICATION = 2**31  # stream key of the shared chain in frozen mode

PILOT_LEVELS = (0.95, 0.98, 0.99, 0.995, 0.999)


class ConfigError(ValueError):
    pass


def fmt(v) -> str:
    """Six significant digits, ``.`` decimal separator."""
    v = float(v)
    if math.isnan(v):
        return "nan"
    if math.isinf(v):
        return "inf" if v > 0 else "-inf"
    return f"{v:.6g}"


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything that determines an experiment's output.

    ``q1``, ``q2`` and ``loss_grid`` default to values read off a crude pilot
    run of ``pilot_n`` scenarios: ``q2`` is the pilot quantile at the largest
    ``alpha``, ``q1`` the one at ``q1_level``, and the grid the pilot
    quantiles at :data:`PILOT_LEVELS`. ``q1 == q2`` switches bridging off.
    """

    problem: str = "gauss1d"
    portfolio: str | None = None
    sectors: str | None = None
    obligors: int = 2000
    sector_count: int = 14
    correlation: float = 0.3
    portfolio_seed: int = 0
    reduce: int = 2
    alpha: tuple = (0.999,)
    loss_grid: tuple | None = None
    n: int = 10_000
    reps: int = 1000
    q1: float | None = None
    q2: float | None = None
    q1_level: float = 0.98
    pilot_n: int = 10_000
    norm: str = "identity"
    eta: float = 0.1
    schedule: str = "polyak"
    a: float = 1.0
    scaling: str = "hessian"
    tune: bool = True
    freeze: bool = False
    seed: int = 0
    out: str = "."
    threads: int = 1

    def __post_init__(self):
        if self.problem not in ("gauss1d", "credit"):
            raise ConfigError(f"unknown problem {self.problem!r}")
        for name in ("n", "reps", "pilot_n", "threads", "obligors", "sector_count"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be at least 1")
        if self.reduce < 0:
            raise ConfigError("reduce must be nonnegative (0 keeps all factors)")
        if not self.alpha or any(not 0 < a < 1 for a in self.alpha):
            raise ConfigError("alpha levels must lie in (0, 1)")
        if self.loss_grid is not None and list(self.loss_grid) != sorted(self.loss_grid):
            raise ConfigError("loss grid must be sorted")
        if self.q1 is not None and self.q2 is not None and self.q1 > self.q2:
            raise ConfigError("q1 must not exceed q2")
        if self.norm not in ("identity", "lil", "ft"):
            raise ConfigError(f"unknown normalization {self.norm!r}")
        if self.seed < 0:
            raise ConfigError("seed must be nonnegative")
        StepSchedule(a=self.a, mode=self.schedule, scaling=self.scaling)

    @property
    def normalization(self) -> NormalizationSpec:
        return NormalizationSpec("feldman_tucker" if self.norm == "ft" else self.norm, eta=self.eta)

    @property
    def step_schedule(self) -> StepSchedule:
        return StepSchedule(a=self.a, mode=self.schedule, scaling=self.scaling)


# -- config file ------------------------------------------------------------------

def _convert(name: str, text: str):
    kinds = {f.name: f.type for f in fields(ExperimentConfig)}
    if name not in kinds:
        raise KeyError(name)
    kind = str(kinds[name])
    text = text.strip()
    if name == "loss_grid":
        return None if text.lower() == "none" else parse_loss_grid(text)
    if "None" in kind and text.lower() in ("", "none"):
        return None
    if name == "alpha":
        return tuple(float(t) for t in text.replace(",", " ").split())
    if kind.startswith("bool"):
        if text.lower() in ("1", "true", "yes", "on"):
            return True
        if text.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"expected a boolean, got {text!r}")
    if kind.startswith("int"):
        return int(text)
    if kind.startswith("float"):
        return float(text)
    return text


def read_config(path) -> dict:
    """Parse flat ``key = value`` lines; ``#`` starts a comment."""
    path = Path(path)
    out = {}
    try:
        lines = path.read_text().splitlines()
    except OSError as exc:
        raise ConfigError(f"{path}: {exc.strerror}") from None
    for no, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{no}: expected 'key = value', got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        try:
            out[key] = _convert(key, value)
        except KeyError:
            raise ConfigError(f"{path}:{no}: unknown key {key!r}") from None
        except ValueError as exc:
            raise ConfigError(f"{path}:{no}: bad value for {key}: {exc}") from None
    return out


def make_config(file_values: dict | None = None, **overrides) -> ExperimentConfig:
    """Config from file values, then overrides (``None`` overrides are ignored)."""
    values = dict(file_values or {})
    values.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return ExperimentConfig(**values)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def parse_loss_grid(text: str) -> tuple:
    """``lo:hi:step`` (inclusive of ``hi`` up to rounding), a comma list, or empty."""
    text = text.strip()
    if not text:
        return ()
    if ":" in text:
        parts = text.split(":")
        if len(parts) != 3:
            raise ValueError(f"expected lo:hi:step, got {text!r}")
        lo, hi, step = (float(p) for p in parts)
        if step <= 0 or hi < lo:
            raise ValueError("need lo <= hi and step > 0")
        count = int(math.floor((hi - lo) / step + 1e-9)) + 1
        return tuple(round(lo + i * step, 12) for i in range(count))
    return tuple(float(t) for t in text.split(","))


# -- problems -----------------------------------------------------------------------

class Problem:
    """Sampling family, loss maps and crude sampler for one experiment.

    Crude and fixed-parameter samples are drawn block-aligned with the tuning
    chain, which consumes one factor row (and one ``eps`` row) per iteration.
    """

    def __init__(self, config: ExperimentConfig):
        self.config = config
        self.seed = config.seed
        if config.problem == "gauss1d":
            self.portfolio = None
            self.family = GaussianFamily(1.0)
        else:
            if config.portfolio:
                if not config.sectors:
                    raise ConfigError("a portfolio file needs a sector model file")
                self.portfolio = read_portfolio(config.portfolio, read_sector_model(config.sectors))
            else:
                pspec = PortfolioSpec(m=config.obligors, k=config.sector_count, correlation=config.correlation)
                self.portfolio = synthetic_portfolio(pspec, streams.stream(config.portfolio_seed, 0, 0))
            base = self.portfolio.family
            l = config.reduce
            self.family = base.reduce(l) if 0 < l < base.k else base
        self.L = np.asarray(self.family.sampling_factor)

    def batch_loss(self, reps):
        if self.portfolio is None:
            return _first_coordinate
        rngs = [streams.stream(self.seed, r, streams.IDIOSYNCRATIC) for r in reps]
        return BatchLossMap(self.portfolio, rngs, EPS_BLOCK)

    def _factors(self, g: np.random.Generator, n: int) -> np.ndarray:
        # whole blocks are transformed so every row matches the chain's arithmetic
        blocks = -(-n // SAMPLER_BLOCK)
        x = [g.standard_normal((SAMPLER_BLOCK, self.family.k)) @ self.L.T for _ in range(blocks)]
        return np.concatenate(x)[:n]

    def _losses(self, x, eps_rng) -> np.ndarray:
        if self.portfolio is None:
            return x[:, 0].copy()
        return crude_losses(self.portfolio, x, eps_rng, EPS_BLOCK)

    def crude(self, rep: int, n: int) -> np.ndarray:
        """Losses of ``n`` reference-measure scenarios on replication ``rep``'s chain streams."""
        x = self._factors(streams.stream(self.seed, rep, streams.SAMPLER), n)
        return self._losses(x, streams.stream(self.seed, rep, streams.IDIOSYNCRATIC))

    def fixed(self, rep: int, theta, n: int) -> tuple[np.ndarray, np.ndarray]:
        """``n`` fresh draws at the fixed parameter ``theta``: ``(losses, log_weights)``."""
        x = self.family.mean(theta) + self._factors(streams.stream(self.seed, rep, streams.FIXED), n)
        y = self._losses(x, streams.stream(self.seed, rep, FIXED_IDIOSYNCRATIC))
        return y, np.atleast_1d(self.family.log_likelihood_ratio(x, theta))

    def pilot(self) -> np.ndarray:
        cfg = self.config
        x = self._factors(streams.stream(self.seed, 0, streams.PILOT), cfg.pilot_n)
        return self._losses(x, streams.stream(self.seed, 1, streams.PILOT))


def _first_coordinate(x):
    return x[:, 0]


@dataclass
class Setup:
    problem: Problem
    gradient: GradientSpec
    loss_grid: tuple
    pilot_quantiles: dict = field(default_factory=dict)


def prepare(config: ExperimentConfig) -> Setup:
    """Build the problem and fill pilot-derived defaults."""
    problem = Problem(config)
    needs_pilot = config.q1 is None or config.q2 is None or config.loss_grid is None
    pq = {}
    if needs_pilot:
        y = np.sort(problem.pilot())
        levels = sorted(set(PILOT_LEVELS) | set(config.alpha) | {config.q1_level})
        pq = {lv: quantile_estimate(WeightedSample.unweighted(y), lv) for lv in levels}
    q2 = config.q2 if config.q2 is not None else pq[max(config.alpha)]
    q1 = config.q1 if config.q1 is not None else min(pq[config.q1_level], q2)
    bridge = default_bridge if q1 < q2 else no_bridge
    grid = config.loss_grid if config.loss_grid is not None else tuple(float(pq[lv]) for lv in PILOT_LEVELS)
    return Setup(problem, GradientSpec(q1, q2, bridge), tuple(grid), pq)


# -- replications -------------------------------------------------------------------

@dataclass
class ReplicationResult:
    """Per-replication estimates; tail probabilities are ``P(loss > lambda)``."""

    index: int
    tail_ais: np.ndarray
    tail_mc: np.ndarray
    tail_fixed: np.ndarray
    q_ais: np.ndarray
    q_mc: np.ndarray
    q_fixed: np.ndarray
    theta_bar: np.ndarray
    truncations: int
    status: str


def tail_estimates(losses, weights, grid) -> np.ndarray:
    """Right-kind tail probabilities ``(1/n) sum w_i 1{Y_i > lambda}``, clipped to [0, 1]."""
    losses = np.asarray(losses)
    out = np.array([np.sum(weights[losses > lam]) for lam in grid]) / len(losses)
    return np.clip(out, 0.0, 1.0)


def _quantiles(losses, weights, alphas, spec: NormalizationSpec) -> np.ndarray:
    sample = WeightedSample(losses, weights)
    if spec.mode == "feldman_tucker" and not np.all(sample.w == 1.0):
        # the order-statistic index has no weighted analogue; use the LIL correction
        spec = replace(spec, mode="lil")
    return np.array([quantile_estimate(sample, a, "right", spec) for a in alphas])


def _run_group(setup: Setup, config: ExperimentConfig, reps: list, frozen) -> list:
    problem, grid, alphas = setup.problem, setup.loss_grid, config.alpha
    spec = config.normalization
    d = problem.family.dim
    if config.tune and frozen is None:
        chains = run_chains(
            problem.family, problem.batch_loss(reps), setup.gradient, config.step_schedule, CompactCovering(),
            config.n, [streams.stream(config.seed, r, streams.SAMPLER) for r in reps], block=SAMPLER_BLOCK,
        )
    out = []
    for i, r in enumerate(reps):
        y_mc = problem.crude(r, config.n)
        ones = np.ones(config.n)
        if not config.tune:
            theta, y_ais, w_ais, trunc, status = np.zeros(d), y_mc, ones, 0, "converged"
            y_fix, w_fix = y_mc, ones
        else:
            if frozen is None:
                res = chains[i]
                theta, trunc, status = res.theta_bar, res.truncations, res.status
                y_ais, w_ais = res.losses, res.weights
            else:
                theta, trunc, status = frozen, 0, "converged"
            y_fix, lw = problem.fixed(r, theta, config.n)
            w_fix = np.exp(lw)
            if frozen is not None:
                y_ais, w_ais = y_fix, w_fix
        if status == "diverged":
            out.append(ReplicationResult(r, *(np.full(len(grid), np.nan),) * 3,
                                         *(np.full(len(alphas), np.nan),) * 3, theta, trunc, status))
            continue
        out.append(ReplicationResult(
            index=r,
            tail_ais=tail_estimates(y_ais, w_ais, grid),
            tail_mc=tail_estimates(y_mc, ones, grid),
            tail_fixed=tail_estimates(y_fix, w_fix, grid),
            q_ais=_quantiles(y_ais, w_ais, alphas, spec),
            q_mc=_quantiles(y_mc, ones, alphas, spec),
            q_fixed=_quantiles(y_fix, w_fix, alphas, spec),
            theta_bar=np.asarray(theta, dtype=float),
            truncations=trunc,
            status=status,
        ))
    return out


def run_replications(config: ExperimentConfig, setup: Setup | None = None) -> tuple[Setup, list]:
    """All replications, ordered by index; independent of ``config.threads``."""
    setup = setup or prepare(config)
    frozen = None
    if config.tune and config.freeze:
        res = run_chains(
            setup.problem.family, setup.problem.batch_loss([TUNE_REPLICATION]), setup.gradient,
            config.step_schedule, CompactCovering(), config.n,
            [streams.stream(config.seed, TUNE_REPLICATION, streams.SAMPLER)], block=SAMPLER_BLOCK,
        )[0]
        if res.status == "diverged":
            raise RuntimeError("tuning chain diverged; nothing to freeze")
        frozen = res.theta_bar
    reps = list(range(config.reps))
    groups = [reps[s:s + MAX_BATCH] for s in range(0, len(reps), MAX_BATCH)]
    if config.threads > 1 and len(groups) > 1:
        with ThreadPoolExecutor(config.threads) as pool:
            parts = list(pool.map(lambda g: _run_group(setup, config, g, frozen), groups))
    else:
        parts = [_run_group(setup, config, g, frozen) for g in groups]
    results = [r for part in parts for r in part]
    diverged = sum(r.status == "diverged" for r in results)
    if diverged > 0.01 * len(results):
        warnings.warn(f"{diverged} of {len(results)} replications diverged and were excluded", RuntimeWarning)
    return setup, results


@dataclass
class CompareTable:
    loss_grid: tuple
    alpha: tuple
    mean_ais: np.ndarray
    mean_mc: np.ndarray
    var_ais: np.ndarray
    var_mc: np.ndarray
    q_mean_ais: np.ndarray
    q_mean_mc: np.ndarray
    q_var_ais: np.ndarray
    q_var_mc: np.ndarray
    reported: int
    diverged: int

    @staticmethod
    def _ratio(num, den):
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(den > 0, num / np.where(den > 0, den, 1.0), np.where(num > 0, np.inf, 1.0))

    @property
    def var_ratio(self) -> np.ndarray:
        return self._ratio(self.var_mc, self.var_ais)

    @property
    def q_var_ratio(self) -> np.ndarray:
        return self._ratio(self.q_var_mc, self.q_var_ais)


def _summarize(setup: Setup, config: ExperimentConfig, results: list) -> CompareTable:
    ok = [r for r in results if r.status != "diverged"]
    if not ok:
        raise RuntimeError("every replication diverged")
    ddof = 1 if len(ok) > 1 else 0

    def stack(name):
        return np.array([getattr(r, name) for r in ok]).reshape(len(ok), -1)

    ta, tm, qa, qm = stack("tail_ais"), stack("tail_mc"), stack("q_ais"), stack("q_mc")
    return CompareTable(
        setup.loss_grid, config.alpha,
        ta.mean(0), tm.mean(0), ta.var(0, ddof=ddof), tm.var(0, ddof=ddof),
        qa.mean(0), qm.mean(0), qa.var(0, ddof=ddof), qm.var(0, ddof=ddof),
        len(ok), len(results) - len(ok),
    )


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(header)
        out.writerows(rows)


def run_compare(config: ExperimentConfig) -> CompareTable:
    """Crude vs adaptive IS over ``config.reps`` replications.

    Writes ``compare.csv`` (loss_level, mean_ais_pct, mean_mc_pct, var_ratio),
    ``compare_quantiles.csv`` and ``replications.csv`` to ``config.out``.
    """
    setup, results = run_replications(config)
    table = _summarize(setup, config, results)
    out = Path(config.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_csv(out / "compare.csv", ["loss_level", "mean_ais_pct", "mean_mc_pct", "var_ratio"], [
        [fmt(lam), fmt(100 * a), fmt(100 * m), fmt(v)]
        for lam, a, m, v in zip(table.loss_grid, table.mean_ais, table.mean_mc, table.var_ratio)
    ])
    _write_csv(out / "compare_quantiles.csv",
               ["alpha", "mean_ais", "mean_mc", "var_ais", "var_mc", "var_ratio"], [
        [fmt(al), fmt(a), fmt(m), fmt(va), fmt(vm), fmt(v)]
        for al, a, m, va, vm, v in zip(table.alpha, table.q_mean_ais, table.q_mean_mc,
                                        table.q_var_ais, table.q_var_mc, table.q_var_ratio)
    ])
    d = setup.problem.family.dim
    _write_csv(out / "replications.csv",
               ["replication", *[f"theta_bar_{j}" for j in range(d)], "truncations", "status"], [
        [r.index, *[fmt(t) for t in r.theta_bar], r.truncations, r.status] for r in results
    ])
    return table


def run_trace(config: ExperimentConfig):
    """One tuning chain (replication 0).

    Writes ``trace.csv`` (n, theta_j, theta_bar_j) where ``theta_bar`` is the
    running average of accepted iterates after the burn-in (the raw iterate
    before any are available), and the full ``trajectory.csv``.
    """
    setup = prepare(config)
    problem = setup.problem
    schedule = config.step_schedule
    res = run_chains(
        problem.family, problem.batch_loss([0]), setup.gradient, schedule, CompactCovering(), config.n,
        [streams.stream(config.seed, 0, streams.SAMPLER)], record=True, block=SAMPLER_BLOCK,
    )[0]
    traj = res.trajectory
    theta = traj.theta
    burn = int(schedule.burn_in * config.n)
    keep = traj.accepted.copy()
    keep[:burn] = False
    counts = np.cumsum(keep)
    sums = np.cumsum(np.where(keep[:, None], theta, 0.0), axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        avg = np.where(counts[:, None] > 0, sums / np.maximum(counts, 1)[:, None], theta)
    if keep.any():
        avg[-1] = res.theta_bar
    out = Path(config.out)
    out.mkdir(parents=True, exist_ok=True)
    d = theta.shape[1]
    _write_csv(out / "trace.csv",
               ["n", *[f"theta_{j}" for j in range(d)], *[f"theta_bar_{j}" for j in range(d)]],
               [[i + 1, *[fmt(v) for v in theta[i]], *[fmt(v) for v in avg[i]]] for i in range(len(theta))])
    traj.to_csv(out / "trajectory.csv")
    return res, avg


@dataclass
class EcdfReport:
    loss_grid: tuple
    F_ais: np.ndarray
    F_mc: np.ndarray
    q_mc: float
    exceed_ais: int
    exceed_mc: int


def run_ecdf(config: ExperimentConfig) -> EcdfReport:
    """Right-kind weighted ECDF of the adaptive sample against the crude ECDF.

    Uses replication 0. Writes ``ecdf.csv`` (loss_level, F_ais, F_mc) and
    ``ecdf_exceedance.csv`` with the crude quantile at ``alpha = 0.999`` and
    the number of samples of each kind beyond it.
    """
    setup = prepare(config)
    problem = setup.problem
    y_mc = problem.crude(0, config.n)
    if config.tune:
        res = run_chains(
            problem.family, problem.batch_loss([0]), setup.gradient, config.step_schedule, CompactCovering(),
            config.n, [streams.stream(config.seed, 0, streams.SAMPLER)], block=SAMPLER_BLOCK,
        )[0]
        y_ais, w_ais = res.losses, res.weights
    else:
        y_ais, w_ais = y_mc, np.ones(config.n)
    alpha = max(config.alpha)
    spec = config.normalization
    if spec.mode == "feldman_tucker":
        spec = replace(spec, mode="identity")
    F_ais = build_ecdf(WeightedSample(y_ais, w_ais), alpha, "right", spec)
    F_mc = WeightedECDF(WeightedSample.unweighted(y_mc), "right")
    grid = setup.loss_grid
    fa = np.asarray(F_ais(np.array(grid, dtype=float))).reshape(-1)
    fm = np.asarray(F_mc(np.array(grid, dtype=float))).reshape(-1)
    q_mc = quantile_estimate(WeightedSample.unweighted(y_mc), 0.999)
    report = EcdfReport(grid, fa, fm, q_mc, int(np.sum(y_ais > q_mc)), int(np.sum(y_mc > q_mc)))
    out = Path(config.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_csv(out / "ecdf.csv", ["loss_level", "F_ais", "F_mc"],
               [[fmt(l), fmt(a), fmt(m)] for l, a, m in zip(grid, fa, fm)])
    _write_csv(out / "ecdf_exceedance.csv", ["q_mc_999", "exceed_ais", "exceed_mc"],
               [[fmt(q_mc), report.exceed_ais, report.exceed_mc]])
    return report
