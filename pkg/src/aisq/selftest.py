"""Fast built-in checks against stored oracle values."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .credit import calibrate_thresholds
from .density import GaussianFamily
from .quantiles import (NormalizationSpec, WeightedECDF, WeightedSample, normalization_nu,
                        quantile_estimate, tail_probability)
from .rng import stream
from .sa import StepSchedule, step_size, tail_gradient

# independently derived reference values
ORACLES = {
    "tail_gradient_x2_theta1": -math.exp(-3.0),
    "lil_nu_right_1e6_099": 1.0e6 + 1.1 / 0.01 * math.sqrt(2 * 2.5e5 * math.log(math.log(2.5e5))),
    "ft_index_1e5_05": 49615,
    "probit_001": -2.3263478740408408,
    "gamma_classic_a2_n3": 0.5,
    "gamma_polyak_a1_n7": 0.25,
}


@dataclass(frozen=True)
class Check:
    name: str
    passed: bool
    detail: str = ""


def _order_statistic_oracle() -> Check:
    g = stream(11)
    for trial in range(300):
        n = int(g.integers(1, 201))
        y = np.round(g.normal(size=n), int(g.integers(0, 3)))  # rounding creates ties
        alpha = float(g.uniform(0.001, 0.999))
        j = next(j for j in range(1, n + 1) if j / n >= alpha)
        want = np.sort(y)[j - 1]
        got = quantile_estimate(WeightedSample.unweighted(y), alpha, "right")
        if got != want:
            return Check("order_statistic_oracle", False, f"trial {trial}: {got!r} != {want!r}")
    return Check("order_statistic_oracle", True, "300 datasets")


def _inverse_laws() -> Check:
    g = stream(12)
    for trial in range(500):
        n = int(g.integers(1, 40))
        y = np.round(g.normal(size=n), 1)
        w = g.exponential(size=n)
        kind = ("renorm", "left", "right")[trial % 3]
        F = WeightedECDF(WeightedSample(y, w), kind, float(g.uniform(0.5, 2.0)) * (1 if kind == "renorm" else n))
        for alpha in g.uniform(0.01, 0.99, 5):
            try:
                q = F.inverse(alpha)
            except ValueError:
                if F.values[-1] >= alpha:
                    return Check("inverse_laws", False, f"trial {trial}: spurious unreachable level")
                continue
            for x in F.y:
                if (F(x) >= alpha) != (q <= x):
                    return Check("inverse_laws", False, f"trial {trial}: F(x) >= a <=> q <= x fails")
            if math.isfinite(q) and F(q) < alpha:
                return Check("inverse_laws", False, f"trial {trial}: F(F^-1(a)) < a")
    return Check("inverse_laws", True, "500 step functions")


def _unit_weight_identities() -> Check:
    g = stream(13)
    y = g.normal(size=257)
    s = WeightedSample.unweighted(y)
    for alpha in (0.1, 0.5, 0.9, 0.99):
        vals = {quantile_estimate(s, alpha, k) for k in ("renorm", "left", "right")}
        if len(vals) != 1:
            return Check("unit_weight_identities", False, f"kinds disagree at alpha={alpha}")
    for lam in (-1.0, 0.0, 0.7):
        if tail_probability(s, lam) != np.count_nonzero(y <= lam) / len(y):
            return Check("unit_weight_identities", False, f"counting oracle fails at {lam}")
    fam = GaussianFamily(1.0)
    x = fam.sample([2.0], stream(14), 100_000)
    m = float(np.mean(fam.likelihood_ratio(x, [2.0])))
    if abs(m - 1.0) > 0.03:
        return Check("unit_weight_identities", False, f"mean weight {m:.4f}")
    return Check("unit_weight_identities", True)


def _constants() -> list[Check]:
    out = []
    fam = GaussianFamily(1.0)
    h = float(tail_gradient(np.array([2.0]), [1.0], 0.0, lambda x: x[0], fam)[0])
    out.append(Check("tail_gradient_example", abs(h - ORACLES["tail_gradient_x2_theta1"]) < 1e-12, f"{h:.6g}"))
    nu = normalization_nu(10**6, 0.99, "right", NormalizationSpec("lil"))
    out.append(Check("lil_normalization_example", abs(nu / ORACLES["lil_nu_right_1e6_099"] - 1) < 1e-9, f"{nu:.7g}"))
    ft = normalization_nu(10**5, 0.5, "right", NormalizationSpec("feldman_tucker"))
    out.append(Check("feldman_tucker_example", ft == ORACLES["ft_index_1e5_05"], f"{ft:.0f}"))
    th = float(calibrate_thresholds([0.01])[0])
    out.append(Check("threshold_calibration", abs(th - ORACLES["probit_001"]) < 1e-4, f"{th:.6f}"))
    g1 = step_size(StepSchedule(a=2.0, mode="classic"), 3)[0]
    g2 = step_size(StepSchedule(a=1.0, mode="polyak"), 7)[0]
    ok = abs(g1 - ORACLES["gamma_classic_a2_n3"]) < 1e-12 and abs(g2 - ORACLES["gamma_polyak_a1_n7"]) < 1e-12
    out.append(Check("step_sizes", ok, f"{g1:.6g}, {g2:.6g}"))
    return out


def selftest() -> list[Check]:
    """Run all checks; deterministic."""
    return [_order_statistic_oracle(), _inverse_laws(), _unit_weight_identities(), *_constants()]
