import math

import numpy as np
import pytest
from scipy import integrate
from scipy.optimize import minimize_scalar
from scipy.stats import norm

from aisq.density import GaussianFamily
from aisq.sa import (
    CompactCovering,
    GradientSample,
    GradientSpec,
    SAState,
    StepSchedule,
    TailGradientSource,
    WeightOverflowError,
    bridged_gradient,
    default_bridge,
    hessian_estimate,
    no_bridge,
    run_chains,
    run_sa,
    sa_step,
    step_size,
    tail_gradient,
)

FAM1 = GaussianFamily(1.0)
Q = 3.09023


def ident(x):
    return x[..., 0]


def m_f(theta, q):
    """Second moment of the 1-D tail estimator, ``e^{theta^2} P(X > q + theta)``."""
    return math.exp(theta * theta) * norm.sf(q + theta)


class TestStepSize:
    def test_classic(self):
        s = StepSchedule(a=2.0, mode="classic")
        assert step_size(s, 0)[0] == 2.0
        assert step_size(s, 3)[0] == 0.5

    def test_polyak(self):
        assert step_size(StepSchedule(), 7)[0] == pytest.approx(0.25, rel=1e-15)

    def test_eps(self):
        assert step_size(StepSchedule(c_eps=2.0), 15)[1] == pytest.approx(1.0)

    def test_monotone(self):
        for mode in ("classic", "polyak"):
            vals = np.array([step_size(StepSchedule(mode=mode), n) for n in range(200)])
            assert np.all(np.diff(vals, axis=0) <= 0)

    def test_summability_order(self):
        assert StepSchedule(mode="classic").summability_order == 2.0
        assert StepSchedule().summability_order == pytest.approx(12 / 5)

    @pytest.mark.parametrize("kw", [
        {"mode": "sgd"}, {"a": 0.0}, {"c_eps": -1.0}, {"eps_exponent": 0.7},
        {"scaling": "adam"}, {"hessian_decay": 0.0}, {"burn_in": 1.0},
    ])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            StepSchedule(**kw)

    def test_negative_index(self):
        with pytest.raises(ValueError):
            step_size(StepSchedule(), -1)

    def test_backoff(self):
        assert [StepSchedule.backoff(z) for z in range(6)] == [0, 1, 1, 2, 2, 3]


class TestGradientSpec:
    def test_order(self):
        with pytest.raises(ValueError):
            GradientSpec(2.0, 1.0)

    def test_bridge(self):
        assert default_bridge(1) == 1.0
        assert default_bridge(100) == pytest.approx(1 / math.log(101))
        b = [default_bridge(n) for n in range(1, 1000)]
        assert all(x >= y for x, y in zip(b, b[1:]))

    def test_bad_bridge(self):
        with pytest.raises(ValueError):
            GradientSpec(1.0, 2.0, bridge=lambda n: 1.5).weight(1)

    def test_indicator_weight(self):
        spec = GradientSpec(1.0, 2.0, bridge=lambda n: 0.25)
        assert spec.indicator_weight(0.5, 1) == 0.0
        assert spec.indicator_weight(1.5, 1) == 0.25
        assert spec.indicator_weight(2.5, 1) == 1.0


class TestTailGradient:
    def test_indicator_off(self):
        assert np.all(tail_gradient([0.5], [1.0], 1.0, ident, FAM1) == 0)

    def test_scalar_value(self):
        h = tail_gradient([2.0], [1.0], 0.0, ident, FAM1)
        assert h[0] == pytest.approx(-math.exp(-3.0), rel=1e-14)
        assert h[0] == pytest.approx(-0.049787, abs=1e-6)

    def test_batch_matches_rows(self):
        x = np.random.default_rng(0).normal(size=(50, 1)) + 1.0
        batch = tail_gradient(x, [0.5], 1.0, ident, FAM1)
        rows = np.array([tail_gradient(r, [0.5], 1.0, ident, FAM1) for r in x])
        assert np.allclose(batch, rows, rtol=1e-14, atol=0)

    def test_mean_field_1d(self):
        x = np.random.default_rng(1).normal(size=(10**6, 1))
        h = tail_gradient(x, [0.0], 2.0, ident, FAM1)[:, 0]
        assert abs(h.mean() + norm.pdf(2.0)) < 4 * h.std() / 1e3

    def test_overflow(self):
        with pytest.raises(WeightOverflowError):
            tail_gradient([-400.0], [1.0], -1e9, ident, FAM1)

    def test_mean_field_2d(self):
        cov = np.array([[1.0, 0.5], [0.5, 1.0]])
        fam = GaussianFamily(cov)
        theta, q = np.array([0.5, 0.3]), 1.5
        psi = lambda x: np.max(x, axis=-1)
        x = fam.sample(theta, np.random.default_rng(2), 10**6)
        h = tail_gradient(x, theta, q, psi, fam)
        fd = Sigma_fd_gradient(cov, theta, q)
        se = h.std(axis=0) / 1e3
        assert np.all(np.abs(h.mean(axis=0) - fd) < 4 * se)


def m_f_2d(cov, theta, q):
    """``e^{g(theta, theta)} P(max(X) > q)`` for ``X ~ N(-theta, cov)``, by quadrature."""
    prec = np.linalg.inv(cov)
    g = theta @ prec @ theta
    c = 1.0 / (2 * math.pi * math.sqrt(np.linalg.det(cov)))

    def pdf(x2, x1):
        d = np.array([x1, x2]) + theta
        return c * math.exp(-0.5 * d @ prec @ d)

    inside, _ = integrate.dblquad(pdf, -12, q, -12, q, epsabs=1e-13, epsrel=1e-12)
    return math.exp(g) * (1.0 - inside)


def Sigma_fd_gradient(cov, theta, q, h=1e-4):
    # E[H] is the Fisher gradient, i.e. cov times the Euclidean one
    eu = np.array([(m_f_2d(cov, theta + h * e, q) - m_f_2d(cov, theta - h * e, q)) / (2 * h) for e in np.eye(2)])
    return cov @ eu


class TestBridgedGradient:
    def test_endpoints(self):
        x, th = [2.5], [0.4]
        one = GradientSpec(1.0, 2.0, bridge=lambda n: 1.0)
        zero = GradientSpec(1.0, 2.0, bridge=no_bridge)
        assert np.array_equal(bridged_gradient(x, th, 5, one, ident, FAM1), tail_gradient(x, th, 1.0, ident, FAM1))
        assert np.array_equal(bridged_gradient(x, th, 5, zero, ident, FAM1), tail_gradient(x, th, 2.0, ident, FAM1))

    def test_half(self):
        x, th = [2.5], [0.4]
        half = GradientSpec(1.0, 2.0, bridge=lambda n: 0.5)
        mean = 0.5 * (tail_gradient(x, th, 1.0, ident, FAM1) + tail_gradient(x, th, 2.0, ident, FAM1))
        assert np.allclose(bridged_gradient(x, th, 5, half, ident, FAM1), mean, rtol=1e-15)


class TestHessian:
    def test_zero(self):
        h = hessian_estimate(GaussianFamily(np.eye(2)), lambda x: x[0], 100.0, [0.0, 0.0], 1000,
                             np.random.default_rng(3))
        assert np.array_equal(h, np.zeros((2, 2)))

    def test_symmetric(self):
        fam = GaussianFamily([[1.0, 0.3, 0.1], [0.3, 1.0, 0.2], [0.1, 0.2, 1.0]])
        h = hessian_estimate(fam, lambda x: x.sum(), 1.0, [0.2, 0.1, 0.3], 5000, np.random.default_rng(4))
        assert np.array_equal(h, h.T)

    def test_quadrature(self):
        rng = np.random.default_rng(5)
        est = hessian_estimate(FAM1, ident, 0.0, [0.0], 10**6, rng)[0, 0]
        exact, _ = integrate.quad(lambda x: (1 + x * x) * norm.pdf(x), 0, np.inf)
        x = np.random.default_rng(5).normal(size=10**6)
        se = np.std((x > 0) * (1 + x * x)) / 1e3
        assert abs(est - exact) < 4 * se


class ConstantSource:
    """Test source: fixed whitened gradient contribution, records the parameters it sees."""

    def __init__(self, weight=0.0, score=(1.0,), overflow=False):
        self.weight, self.score, self.overflow = weight, np.asarray(score, float), overflow
        self.seen = []

    def __call__(self, phi, n):
        self.seen.append(phi.copy())
        return GradientSample(phi.copy(), 0.0, 0.0, self.weight, self.score, self.overflow)


class TestSAStep:
    def test_zero_field(self):
        st = SAState.initial(FAM1, [0.7])
        src = ConstantSource()
        for i in range(50):
            sa_step(st, StepSchedule(), CompactCovering(), src)
            assert st.theta[0] == 0.7 and st.kappa == 0 and st.nu == i + 2

    def test_forced_large_update(self):
        st = SAState.initial(FAM1)
        st.zeta = 6
        src = ConstantSource(weight=1e6)
        sa_step(st, StepSchedule(scaling="none"), CompactCovering(), src)
        assert (st.nu, st.kappa, st.zeta) == (0, 1, 3)
        assert not st.accepted and st.theta[0] == 0.0

    def test_leaving_active_set(self):
        st = SAState.initial(FAM1, [4.9])
        src = ConstantSource(weight=0.5, score=(0.5,))
        sa_step(st, StepSchedule(scaling="none"), CompactCovering(), src)
        assert st.nu == 0 and st.kappa == 1

    def test_reset_after_truncation(self):
        st = SAState.initial(FAM1, [0.25])
        st.phi = np.array([3.0])
        st.nu = 0
        src = ConstantSource()
        sa_step(st, StepSchedule(), CompactCovering(), src)
        assert src.seen[0][0] == 0.25 and st.theta[0] == 0.25

    def test_overflow_is_truncation(self):
        st = SAState.initial(FAM1)
        sa_step(st, StepSchedule(), CompactCovering(), ConstantSource(overflow=True))
        assert st.nu == 0 and st.kappa == 1 and st.overflows == 1

    def test_diverged(self):
        st = SAState.initial(FAM1)
        src = ConstantSource(overflow=True)
        sched = StepSchedule(max_truncations=3)
        for _ in range(4):
            sa_step(st, sched, CompactCovering(), src)
        assert st.status == "diverged"
        with pytest.raises(RuntimeError):
            sa_step(st, sched, CompactCovering(), src)


class TestRunSA:
    def test_zero_gradient(self):
        res = run_sa(FAM1, ident, GradientSpec(1e9, 1e9), n_iters=500, rng=np.random.default_rng(0),
                     theta_init=[0.7])
        assert res.theta_bar[0] == res.theta_hat[0] == 0.7

    def test_deterministic(self):
        spec = GradientSpec(1.0, Q)
        a = run_sa(FAM1, ident, spec, n_iters=3000, rng=np.random.default_rng(1))
        b = run_sa(FAM1, ident, spec, n_iters=3000, rng=np.random.default_rng(1))
        assert np.array_equal(a.trajectory.theta, b.trajectory.theta)
        assert np.array_equal(a.log_weights, b.log_weights)

    def test_bridged_target(self):
        # with b(n) -> 0 slowly the chain tracks the minimizer of the blended criterion
        n = 100_000
        b = default_bridge(n)
        target = minimize_scalar(lambda t: b * m_f(t, 1.0) + (1 - b) * m_f(t, Q),
                                 bounds=(0, 5), method="bounded").x
        res = run_chains(FAM1, ident, GradientSpec(1.0, Q), n_iters=n,
                         rngs=[np.random.default_rng(s) for s in range(3)])
        for r in res:
            assert abs(r.theta_bar[0] - target) < 0.15

    def test_descent(self):
        res = run_sa(FAM1, ident, GradientSpec(1.0, 1.0), n_iters=20_000, rng=np.random.default_rng(2))
        assert m_f(res.theta_bar[0], 1.0) < m_f(0.0, 1.0)

    def test_counters_and_containment(self):
        cov = CompactCovering(1.0, 1.0)
        res = run_sa(FAM1, ident, GradientSpec(Q, Q), covering=cov, n_iters=20_000,
                     rng=np.random.default_rng(3))
        t = res.trajectory
        assert res.truncations > 0
        assert np.all(np.diff(t.kappa) >= 0)
        z_prev = np.concatenate(([0], t.zeta[:-1]))
        acc = t.accepted
        assert np.array_equal(t.zeta[acc], z_prev[acc] + 1)
        assert np.array_equal(t.zeta[~acc], (z_prev[~acc] + 1) // 2)
        live = t.nu != 0
        assert np.all(t.theta[live, 0] ** 2 <= cov.r0 + t.kappa[live] * cov.delta)
        assert t.kappa[-1] <= StepSchedule().max_truncations

    def test_diverged_partial(self):
        res = run_sa(FAM1, ident, GradientSpec(1.0, 1.0), StepSchedule(max_truncations=2),
                     CompactCovering(0.01, 0.01), n_iters=20_000, rng=np.random.default_rng(4))
        assert res.status == "diverged"
        assert res.n < 20_000 and len(res.trajectory.kappa) == res.n

    def test_requires_rng(self):
        with pytest.raises(ValueError):
            run_sa(FAM1, ident, GradientSpec(Q, Q), n_iters=10)

    def test_trajectory_csv(self, tmp_path):
        res = run_sa(FAM1, ident, GradientSpec(Q, Q), n_iters=3, rng=np.random.default_rng(5))
        res.trajectory.to_csv(tmp_path / "t.csv")
        lines = (tmp_path / "t.csv").read_text().splitlines()
        assert lines[0] == "n,theta_0,kappa,nu,zeta,gamma,accepted"
        assert len(lines) == 4 and lines[1].startswith("1,")


class TestRunChains:
    @pytest.mark.parametrize("scaling", ["hessian", "none"])
    def test_matches_run_sa(self, scaling):
        sched = StepSchedule(scaling=scaling)
        spec = GradientSpec(1.0, Q)
        batch = run_chains(FAM1, ident, spec, sched, n_iters=5000,
                           rngs=[np.random.default_rng(s) for s in range(3)], record=True)
        for s, b in enumerate(batch):
            a = run_sa(FAM1, ident, spec, sched, n_iters=5000, rng=np.random.default_rng(s))
            assert np.array_equal(a.trajectory.theta, b.trajectory.theta)
            assert np.array_equal(a.theta_bar, b.theta_bar)
            assert np.array_equal(a.log_weights, b.log_weights)
            assert a.truncations == b.truncations

    def test_matches_run_sa_2d(self):
        fam = GaussianFamily([[1.0, 0.4], [0.4, 1.0]])
        spec = GradientSpec(2.0, 2.5)
        psi = lambda x: x.sum(axis=-1)
        batch = run_chains(fam, psi, spec, n_iters=3000, rngs=[np.random.default_rng(s) for s in range(2)])
        for s, b in enumerate(batch):
            a = run_sa(fam, psi, spec, n_iters=3000, rng=np.random.default_rng(s), record=False)
            assert np.array_equal(a.theta_bar, b.theta_bar)

    def test_batch_independence(self):
        spec = GradientSpec(Q, Q)
        many = run_chains(FAM1, ident, spec, n_iters=3000, rngs=[np.random.default_rng(s) for s in range(4)])
        one = run_chains(FAM1, ident, spec, n_iters=3000, rngs=[np.random.default_rng(2)])
        assert np.array_equal(many[2].theta_bar, one[0].theta_bar)
        assert np.array_equal(many[2].losses, one[0].losses)

    def test_diverged_chain(self):
        res = run_chains(FAM1, ident, GradientSpec(1.0, 1.0), StepSchedule(max_truncations=2),
                         CompactCovering(0.01, 0.01), 5000, [np.random.default_rng(0)])
        assert res[0].status == "diverged" and res[0].n < 5000

    @pytest.mark.slow
    def test_truncation_decay(self):
        res = run_chains(FAM1, ident, GradientSpec(Q, Q), n_iters=10_000,
                         rngs=[np.random.default_rng(s) for s in range(500)])
        assert sum(r.truncations > 3 for r in res) < 5


def test_source_block_alignment():
    # drawing in blocks of different sizes changes the stream layout but not validity
    src = TailGradientSource(FAM1, ident, GradientSpec(Q, Q), np.random.default_rng(0), block=4)
    xs = [src(np.zeros(1), n + 1).x[0] for n in range(8)]
    ref = np.random.default_rng(0).standard_normal((2, 4, 1)).ravel()
    assert np.array_equal(xs, ref)
