"""Stochastic approximation with adaptive truncation for tuning the sampling mean.

The target is the second moment ``m_f(theta) = E_theta[f(X)^2 w_X(theta)^2]``
of the importance-sampling estimator of ``P(Psi(X) > q)``, with
``f = 1{Psi > q}``. Its stochastic gradient is
``H(x, theta) = f(x) w_x(theta)^2 (theta - x)`` and the iterate moves by
``-gamma H``. The iterate is confined to an increasing sequence of Fisher
balls ``K_j``; an update that leaves the active ball or moves too far is
discarded, the ball index grows, and the chain restarts from ``theta_init``.

Internally the engine works in whitened coordinates ``phi`` (see
:mod:`aisq.density`), where the Fisher metric is Euclidean.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np


LOG_W2_MAX = 700.0


class WeightOverflowError(FloatingPointError):
    """``w_x(theta)^2`` is not representable as a float."""


def default_bridge(n: int) -> float:
    """``min(1, 1 / ln(n + 1))``."""
    return min(1.0, 1.0 / math.log(n + 1.0))


def no_bridge(n: int) -> float:
    return 0.0


@dataclass(frozen=True)
class TruncationCounters:
    kappa: int = 0
    nu: int = 1
    zeta: int = 0


@dataclass(frozen=True)
class CompactCovering:
    """Fisher balls ``K_j = {theta : g(theta, theta) <= r0 + j * delta}``."""

    r0: float = 25.0
    delta: float = 25.0

    def __post_init__(self):
        if not (self.r0 > 0 and self.delta > 0):
            raise ValueError("r0 and delta must be positive")

    def radius2(self, j: int) -> float:
        return self.r0 + j * self.delta

    def contains(self, norm2: float, j: int) -> bool:
        return norm2 <= self.r0 + j * self.delta


@dataclass(frozen=True)
class StepSchedule:
    """Step sizes ``gamma_n``, move bounds ``eps_n`` and engine options.

    Parameters
    ----------
    a : float
        Step scale.
    mode : {"polyak", "classic"}
        ``gamma_n = a (n+1)^(-2/3)`` or ``a / (n+1)``.
    c_eps, eps_exponent : float
        ``eps_n = c_eps (n+1)^(-eps_exponent)``.
    scaling : {"hessian", "none"}
        With ``"hessian"`` the gradient is premultiplied by the inverse of a
        running estimate of the Hessian of ``m_f``, built from the same draws.
        This makes the step scale-free; the raw gradient is of the order of
        ``m_f`` itself, which is tiny far in the tail.
    hessian_decay : float
        Running Hessian weights are ``(zeta + 1)^(-hessian_decay)``.
    max_truncations : int
        The run is declared diverged once ``kappa`` exceeds this.
    burn_in : float
        Fraction of iterations excluded from the Polyak average.
    """

    a: float = 1.0
    mode: str = "polyak"
    c_eps: float = 1.0
    eps_exponent: float = 0.25
    scaling: str = "hessian"
    hessian_decay: float = 0.5
    max_truncations: int = 50
    burn_in: float = 0.1

    def __post_init__(self):
        if self.mode not in ("polyak", "classic"):
            raise ValueError(f"unknown schedule mode {self.mode!r}")
        if self.scaling not in ("hessian", "none"):
            raise ValueError(f"unknown scaling {self.scaling!r}")
        if not (self.a > 0 and self.c_eps > 0 and self.eps_exponent >= 0):
            raise ValueError("a and c_eps must be positive")
        # sum (gamma_n / eps_n)^p < inf for some finite p needs a decaying ratio
        if not self.gamma_exponent - self.eps_exponent > 0:
            raise ValueError("gamma_n / eps_n must decay")
        if not 0 < self.hessian_decay <= 1:
            raise ValueError("hessian_decay must lie in (0, 1]")
        if self.max_truncations < 0 or not 0 <= self.burn_in < 1:
            raise ValueError("invalid max_truncations or burn_in")

    @property
    def gamma_exponent(self) -> float:
        return 2.0 / 3.0 if self.mode == "polyak" else 1.0

    @property
    def summability_order(self) -> float:
        """Infimum of the ``p`` with ``sum (gamma_n / eps_n)^p < inf`` (at least 2).

        Classic mode gives 2 (ratio ``n^(-3/4)``); Polyak mode gives 12/5
        (ratio ``n^(-5/12)``), so the square-summability of the ratio holds
        only in classic mode.
        """
        return max(2.0, 1.0 / (self.gamma_exponent - self.eps_exponent))

    @staticmethod
    def backoff(zeta: int) -> int:
        """Index map applied to ``zeta`` on truncation: ``ceil(zeta / 2)``."""
        return (zeta + 1) // 2


def step_size(schedule: StepSchedule, n: int) -> tuple[float, float]:
    """``(gamma_n, eps_n)`` for index ``n >= 0``."""
    if n < 0:
        raise ValueError("n must be nonnegative")
    gamma = schedule.a * (n + 1.0) ** (-schedule.gamma_exponent)
    eps = schedule.c_eps * (n + 1.0) ** (-schedule.eps_exponent)
    return gamma, eps


@dataclass(frozen=True)
class GradientSpec:
    """Thresholds and bridging weight for ``b(n) H_q1 + (1 - b(n)) H_q2``.

    ``q1 == q2`` disables bridging.
    """

    q1: float
    q2: float
    bridge: Callable[[int], float] = default_bridge

    def __post_init__(self):
        if not self.q1 <= self.q2:
            raise ValueError("q1 must not exceed q2")

    def weight(self, n: int) -> float:
        b = float(self.bridge(n))
        if not 0.0 <= b <= 1.0:
            raise ValueError(f"bridge weight {b} outside [0, 1]")
        return b

    def indicator_weight(self, y: float, n: int) -> float:
        """``b 1{y > q1} + (1 - b) 1{y > q2}``."""
        if y <= self.q1:
            return 0.0
        b = self.weight(n)
        return b + (1.0 - b) * (y > self.q2)


def tail_gradient(x, theta, q: float, loss: Callable, family) -> np.ndarray:
    """``1{Psi(x) > q} w_x(theta)^2 (theta - x)``, in the family's parameter coordinates.

    For a reduced family ``theta - x`` reads ``a - U_l^T x``. A 2-d ``x``
    holds one draw per row; ``loss`` must then be vectorized over rows and
    the result has one row per draw.

    Raises
    ------
    WeightOverflowError
        If the indicator is on and ``w^2`` overflows.
    """
    theta = np.atleast_1d(np.asarray(theta, dtype=float))
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        if not loss(x) > q:
            return np.zeros(family.dim)
        log_w2 = 2.0 * family.log_likelihood_ratio(x, theta)
        if log_w2 > LOG_W2_MAX:
            raise WeightOverflowError(f"log w^2 = {log_w2:.1f}")
        return -math.exp(log_w2) * family.grad_log_likelihood(x, theta)
    on = np.asarray(loss(x)) > q
    out = np.zeros((len(x), family.dim))
    if on.any():
        log_w2 = 2.0 * np.atleast_1d(family.log_likelihood_ratio(x[on], theta))
        if np.any(log_w2 > LOG_W2_MAX):
            raise WeightOverflowError(f"log w^2 = {log_w2.max():.1f}")
        out[on] = -np.exp(log_w2)[:, None] * family.grad_log_likelihood(x[on], theta)
    return out


def bridged_gradient(x, theta, n: int, spec: GradientSpec, loss: Callable, family) -> np.ndarray:
    b = spec.weight(n)
    out = np.zeros(family.dim)
    if b > 0:
        out = out + b * tail_gradient(x, theta, spec.q1, loss, family)
    if b < 1:
        out = out + (1.0 - b) * tail_gradient(x, theta, spec.q2, loss, family)
    return out


def hessian_estimate(family, loss: Callable, q: float, theta, n_samples: int, rng: np.random.Generator) -> np.ndarray:
    """Monte Carlo mean of ``(I + (theta - X)(theta - X)^T) f(X)^2 w_X(theta)^2``, ``X ~ phi_theta``."""
    if n_samples < 1:
        raise ValueError("n_samples must be at least 1")
    theta = np.atleast_1d(np.asarray(theta, dtype=float))
    x = family.sample(theta, rng, n_samples)
    on = np.array([loss(xi) > q for xi in x])
    d = family.dim
    if not on.any():
        return np.zeros((d, d))
    xs = x[on]
    u = -family.grad_log_likelihood(xs, theta)
    w2 = np.exp(2.0 * family.log_likelihood_ratio(xs, theta))
    out = (np.sum(w2) * np.eye(d) + (u * w2[:, None]).T @ u) / n_samples
    return 0.5 * (out + out.T)


class GradientSample:
    """One draw and its whitened gradient contribution.

    The gradient is ``-weight * score`` and the Hessian term
    ``weight * (I + score score^T)``; ``weight`` is ``F w^2`` and zero when
    the indicators are off.
    """

    __slots__ = ("x", "loss", "log_w", "weight", "score", "overflow")

    def __init__(self, x, loss: float, log_w: float, weight: float = 0.0, score=None, overflow: bool = False):
        self.x = x
        self.loss = loss
        self.log_w = log_w
        self.weight = weight
        self.score = score
        self.overflow = overflow

    @property
    def h(self) -> np.ndarray:
        return -self.weight * self.score


class TailGradientSource:
    """Draws ``X ~ phi_theta`` and evaluates the bridged tail gradient in whitened form.

    With ``x = L (z + [phi, 0])``: ``log w = -z_l . phi - |phi|^2 / 2``,
    gradient ``-F w^2 z_l`` and Hessian term ``F w^2 (I + z_l z_l^T)``, where
    ``F = b 1{Psi > q1} + (1 - b) 1{Psi > q2}``. Normals are drawn in blocks
    of ``block`` rows, row ``i`` of the stream serving iteration ``i + 1``.
    """

    def __init__(self, family, loss: Callable, spec: GradientSpec, rng: np.random.Generator, block: int = 1024):
        self.family = family
        self.loss = loss
        self.spec = spec
        self.rng = rng
        self.block = int(block)
        self.d = family.dim
        self._L = np.asarray(family.sampling_factor)
        self._Ld = self._L[:, : self.d]
        self._z = self._lz = np.empty((0, family.k))
        self._i = 0

    def __call__(self, phi: np.ndarray, n: int) -> GradientSample:
        if self._i == len(self._z):
            self._z = self.rng.standard_normal((self.block, self.family.k))
            self._lz = self._z @ self._L.T
            self._i = 0
        i = self._i
        self._i += 1
        zl = self._z[i, : self.d]
        x = self._lz[i].copy()
        for j in range(self.d):
            x += phi[j] * self._Ld[:, j]
        y = float(self.loss(x))
        log_w = -float(np.sum(zl * phi)) - 0.5 * float(np.sum(phi * phi))
        f = self.spec.indicator_weight(y, n)
        if f == 0.0:
            return GradientSample(x, y, log_w)
        if 2.0 * log_w > LOG_W2_MAX:
            return GradientSample(x, y, log_w, overflow=True)
        return GradientSample(x, y, log_w, f * float(np.exp(2.0 * log_w)), zl)


@dataclass
class SAState:
    """Mutable chain state; ``phi`` is the whitened parameter.

    ``curvature`` is the running Hessian estimate used by ``"hessian"`` scaling.
    """

    family: object
    phi: np.ndarray
    phi_init: np.ndarray
    n: int = 0
    kappa: int = 0
    nu: int = 1
    zeta: int = 0
    status: str = "running"
    x: np.ndarray | None = None
    gamma: float = 0.0
    accepted: bool = True
    overflows: int = 0
    curvature: np.ndarray | None = None

    @classmethod
    def initial(cls, family, theta_init=None) -> "SAState":
        d = family.dim
        phi0 = np.zeros(d) if theta_init is None else family.to_white(theta_init)
        return cls(family, phi0.copy(), phi0.copy(), curvature=np.zeros((d, d)))

    @property
    def theta(self) -> np.ndarray:
        return self.family.from_white(self.phi)

    @property
    def counters(self) -> TruncationCounters:
        return TruncationCounters(self.kappa, self.nu, self.zeta)


def sa_step(state: SAState, schedule: StepSchedule, covering: CompactCovering, source) -> GradientSample:
    """Advance the chain by one iteration in place and return the draw used.

    ``source(phi, n)`` supplies the draw and gradient as a
    :class:`GradientSample`. A state whose previous update was discarded
    (``nu == 0``) first resets to ``theta_init`` and clears the running Hessian.
    """
    if state.status != "running":
        raise RuntimeError(f"chain is {state.status}")
    if state.nu == 0:
        state.phi = state.phi_init.copy()
        state.curvature[:] = 0.0
    state.n += 1
    zeta = state.zeta
    gamma = schedule.a * (zeta + 1.0) ** (-schedule.gamma_exponent)
    eps = schedule.c_eps * (zeta + 1.0) ** (-schedule.eps_exponent)
    g = source(state.phi, state.n)
    state.x = g.x
    state.gamma = gamma

    ok = not g.overflow
    if ok:
        w = g.weight
        S = state.curvature
        if schedule.scaling == "hessian":
            beta = (zeta + 1.0) ** (-schedule.hessian_decay)
            S *= 1.0 - beta
        if w == 0.0:
            new = state.phi
        else:
            u = g.score
            if schedule.scaling == "hessian":
                S += beta * w * (np.eye(len(u)) + np.outer(u, u))
                # S >= beta w I here, so it is invertible
                move = -gamma * w * (u / S[0, 0] if len(u) == 1 else np.linalg.solve(S, u))
            else:
                move = -gamma * w * u
            new = state.phi - move
            ok = float(np.sum(move * move)) <= eps * eps
        ok = ok and covering.contains(float(np.sum(new * new)), state.kappa)
    else:
        state.overflows += 1

    state.accepted = ok
    if ok:
        state.phi = new
        state.nu += 1
        state.zeta += 1
    else:
        state.nu = 0
        state.zeta = schedule.backoff(zeta)
        state.kappa += 1
        if state.kappa > schedule.max_truncations:
            state.status = "diverged"
    return g


@dataclass
class Trajectory:
    """Per-iteration record; row ``i`` is iteration ``n = i + 1`` after its update."""

    theta: np.ndarray
    kappa: np.ndarray
    nu: np.ndarray
    zeta: np.ndarray
    gamma: np.ndarray
    accepted: np.ndarray

    @property
    def n(self) -> np.ndarray:
        return np.arange(1, len(self.kappa) + 1)

    def to_csv(self, path) -> None:
        """Write columns n, theta_0..theta_{k-1}, kappa, nu, zeta, gamma, accepted."""
        d = self.theta.shape[1]
        with open(Path(path), "w", newline="") as fh:
            out = csv.writer(fh)
            out.writerow(["n", *[f"theta_{j}" for j in range(d)], "kappa", "nu", "zeta", "gamma", "accepted"])
            for i in range(len(self.kappa)):
                out.writerow([
                    i + 1, *[f"{v:.6g}" for v in self.theta[i]], int(self.kappa[i]), int(self.nu[i]),
                    int(self.zeta[i]), f"{self.gamma[i]:.6g}", int(self.accepted[i]),
                ])


@dataclass
class SAResult:
    """Output of :func:`run_sa`.

    ``losses[i]`` and ``log_weights[i]`` belong to the draw of iteration
    ``i + 1``, taken under the parameter in force before that update; together
    they form the adaptive weighted sample.
    """

    theta_hat: np.ndarray
    theta_bar: np.ndarray
    status: str
    truncations: int
    kappa: int
    n_accepted: int
    overflows: int
    losses: np.ndarray
    log_weights: np.ndarray
    trajectory: Trajectory | None = None
    diagnostics: dict = field(default_factory=dict)

    @property
    def weights(self) -> np.ndarray:
        return np.exp(self.log_weights)

    @property
    def n(self) -> int:
        return len(self.losses)


def run_sa(family, loss: Callable, spec: GradientSpec, schedule: StepSchedule = StepSchedule(),
           covering: CompactCovering = CompactCovering(), n_iters: int = 10_000,
           rng: np.random.Generator | None = None, theta_init=None, record: bool = True,
           source=None) -> SAResult:
    """Run the truncated chain for ``n_iters`` iterations.

    ``theta_bar`` averages the iterates of accepted iterations after the
    first ``burn_in * n_iters``; if there are none it equals ``theta_hat``.
    A diverged chain stops early and returns its partial record.
    """
    if n_iters < 1:
        raise ValueError("n_iters must be at least 1")
    if source is None:
        if rng is None:
            raise ValueError("either rng or source is required")
        source = TailGradientSource(family, loss, spec, rng)
    state = SAState.initial(family, theta_init)
    d = family.dim
    phis = np.empty((n_iters, d))
    kappa = np.empty(n_iters, dtype=np.int64)
    nu = np.empty(n_iters, dtype=np.int64)
    zeta = np.empty(n_iters, dtype=np.int64)
    gamma = np.empty(n_iters)
    accepted = np.empty(n_iters, dtype=bool)
    losses = np.empty(n_iters)
    log_w = np.empty(n_iters)

    done = 0
    for i in range(n_iters):
        g = sa_step(state, schedule, covering, source)
        phis[i] = state.phi
        kappa[i], nu[i], zeta[i] = state.kappa, state.nu, state.zeta
        gamma[i] = state.gamma
        accepted[i] = state.accepted
        losses[i] = g.loss
        log_w[i] = g.log_w
        done = i + 1
        if state.status == "diverged":
            break
    if state.status == "running":
        state.status = "converged"

    burn = int(schedule.burn_in * n_iters)
    keep = accepted[burn:done]
    phi_bar = phis[burn:done][keep].mean(axis=0) if keep.any() else state.phi
    theta_hat = family.from_white(state.phi)
    traj = None
    if record:
        thetas = phis[:done] @ _white_map(family).T
        traj = Trajectory(thetas, kappa[:done], nu[:done], zeta[:done], gamma[:done], accepted[:done])
    n_acc = int(accepted[:done].sum())
    return SAResult(
        theta_hat=theta_hat,
        theta_bar=family.from_white(phi_bar),
        status=state.status,
        truncations=done - n_acc,
        kappa=state.kappa,
        n_accepted=n_acc,
        overflows=state.overflows,
        losses=losses[:done],
        log_weights=log_w[:done],
        trajectory=traj,
        diagnostics={"final_kappa": state.kappa, "truncations": done - n_acc, "iterations": done},
    )


def _white_map(family) -> np.ndarray:
    """Matrix ``M`` with ``theta = M phi``."""
    return np.column_stack([family.from_white(e) for e in np.eye(family.dim)])


def run_chains(family, loss: Callable, spec: GradientSpec, schedule: StepSchedule = StepSchedule(),
               covering: CompactCovering = CompactCovering(), n_iters: int = 10_000,
               rngs=(), theta_init=None, record: bool = False, block: int = 1024) -> list[SAResult]:
    """Run independent chains in lock-step, one per generator in ``rngs``.

    Equivalent to calling :func:`run_sa` once per generator with a
    :class:`TailGradientSource`, but vectorized across chains. ``loss`` maps
    an ``(C, k)`` array of draws to ``C`` losses, row ``c`` belonging to
    chain ``c``. All arithmetic is row-wise, so each chain's result does not
    depend on which other chains share the batch.
    """
    rngs = list(rngs)
    C = len(rngs)
    if C == 0:
        return []
    if n_iters < 1:
        raise ValueError("n_iters must be at least 1")
    d, k = family.dim, family.k
    L = np.asarray(family.sampling_factor)
    Ld = L[:, :d]
    eye = np.eye(d)
    phi0 = np.zeros(d) if theta_init is None else family.to_white(theta_init)
    hessian = schedule.scaling == "hessian"

    # per-index schedule tables in Python floats (zeta never exceeds n_iters)
    idx = range(n_iters + 1)
    gamma_tab = np.array([schedule.a * (j + 1.0) ** (-schedule.gamma_exponent) for j in idx])
    eps2_tab = np.array([(schedule.c_eps * (j + 1.0) ** (-schedule.eps_exponent)) ** 2 for j in idx])
    beta_tab = np.array([(j + 1.0) ** (-schedule.hessian_decay) for j in idx])

    phi = np.tile(phi0, (C, 1))
    S = np.zeros((C, d, d))
    kappa = np.zeros(C, dtype=np.int64)
    nu = np.ones(C, dtype=np.int64)
    zeta = np.zeros(C, dtype=np.int64)
    overflows = np.zeros(C, dtype=np.int64)
    length = np.full(C, n_iters)
    alive = np.ones(C, dtype=bool)

    phis = np.empty((n_iters, C, d))
    accepted = np.empty((n_iters, C), dtype=bool)
    losses = np.empty((n_iters, C))
    log_ws = np.empty((n_iters, C))
    if record:
        kappas = np.empty((n_iters, C), dtype=np.int64)
        nus = np.empty((n_iters, C), dtype=np.int64)
        zetas = np.empty((n_iters, C), dtype=np.int64)
        gammas = np.empty((n_iters, C))

    Z = LZ = None
    for i in range(n_iters):
        r = i % block
        if r == 0:
            Z = np.stack([g.standard_normal((block, k)) for g in rngs])
            LZ = np.stack([z @ L.T for z in Z])
        reset = nu == 0
        if reset.any():
            phi[reset] = phi0
            S[reset] = 0.0
        n = i + 1
        gamma = gamma_tab[zeta]
        zl = Z[:, r, :d]
        x = LZ[:, r].copy()
        for j in range(d):
            x += phi[:, j, None] * Ld[:, j]
        y = np.asarray(loss(x), dtype=float)
        log_w = -np.sum(zl * phi, axis=1) - 0.5 * np.sum(phi * phi, axis=1)

        b = spec.weight(n)
        f = np.where(y > spec.q1, b + (1.0 - b) * (y > spec.q2), 0.0)
        over = (f > 0) & (2.0 * log_w > LOG_W2_MAX)
        w = np.where(over, 0.0, f * np.exp(np.minimum(2.0 * log_w, LOG_W2_MAX)))
        on = w > 0
        move = np.zeros((C, d))
        if hessian:
            S *= (1.0 - beta_tab[zeta])[:, None, None]
        if on.any():
            u = zl[on]
            gw = gamma[on] * w[on]
            if hessian:
                S[on] += (beta_tab[zeta[on]] * w[on])[:, None, None] * (eye + u[:, :, None] * u[:, None, :])
                sol = u / S[on, 0, 0][:, None] if d == 1 else np.linalg.solve(S[on], u[:, :, None])[:, :, 0]
                move[on] = -gw[:, None] * sol
            else:
                move[on] = -gw[:, None] * u
        new = phi - move
        ok = (~over) & (np.sum(move * move, axis=1) <= eps2_tab[zeta]) \
            & (np.sum(new * new, axis=1) <= covering.r0 + kappa * covering.delta)

        phi = np.where(ok[:, None], new, phi)
        nu = np.where(ok, nu + 1, 0)
        zeta = np.where(ok, zeta + 1, (zeta + 1) // 2)
        kappa = kappa + ~ok
        overflows += over & alive

        phis[i] = phi
        accepted[i] = ok
        losses[i] = y
        log_ws[i] = log_w
        if record:
            kappas[i], nus[i], zetas[i], gammas[i] = kappa, nu, zeta, gamma
        died = alive & (kappa > schedule.max_truncations)
        if died.any():
            length[died] = n
            alive &= ~died
            if not alive.any():
                break

    white = _white_map(family)
    burn = int(schedule.burn_in * n_iters)
    out = []
    for c in range(C):
        m = length[c]
        acc = accepted[:m, c]
        keep = acc[burn:]
        last = phis[m - 1, c]
        phi_bar = phis[burn:m, c][keep].mean(axis=0) if keep.any() else last
        traj = None
        if record:
            traj = Trajectory(phis[:m, c] @ white.T, kappas[:m, c], nus[:m, c], zetas[:m, c],
                              gammas[:m, c], acc)
        n_acc = int(acc.sum())
        out.append(SAResult(
            theta_hat=family.from_white(last),
            theta_bar=family.from_white(phi_bar),
            status="diverged" if m - n_acc > schedule.max_truncations else "converged",
            truncations=m - n_acc,
            kappa=m - n_acc,
            n_accepted=n_acc,
            overflows=int(overflows[c]),
            losses=losses[:m, c].copy(),
            log_weights=log_ws[:m, c].copy(),
            trajectory=traj,
            diagnostics={"final_kappa": m - n_acc, "truncations": m - n_acc, "iterations": int(m)},
        ))
    return out
