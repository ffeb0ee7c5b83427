"""Gaussian mean-shift sampling families with a fixed covariance.

Parameters are mean shifts away from the zero reference mean. All weights are
evaluated in log space and exponentiated at the boundary.

Both family classes share a small internal interface used by the tuning
engine: ``dim`` (parameter dimension), ``k`` (sample-space dimension),
``sampling_factor`` ``L`` with ``Sigma = L L^T``, and the whitening maps
``to_white`` / ``from_white``. In whitened coordinates ``phi`` a draw is
``x = L (z + [phi, 0])`` with ``z ~ N(0, I_k)``, the Fisher metric is the
identity and ``log w = -z[:dim] . phi - |phi|^2 / 2``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


def _as_vector(v, k: int, name: str) -> np.ndarray:
    arr = np.asarray(v, dtype=float)
    if arr.ndim == 0:
        arr = arr.reshape(1)
    if arr.shape[-1] != k:
        raise ValueError(f"{name} has dimension {arr.shape[-1]}, expected {k}")
    return arr


class GaussianFamily:
    """The family N(theta, Sigma), theta in R^k, with Sigma fixed.

    Parameters
    ----------
    cov : array_like
        Symmetric positive-definite ``k x k`` covariance. A scalar is read as
        a 1x1 matrix.

    Raises
    ------
    ValueError
        If ``cov`` is not square, not symmetric to 1e-12 relative, or has an
        eigenvalue below ``1e-12`` times the largest one.
    """

    def __init__(self, cov):
        cov = np.atleast_2d(np.asarray(cov, dtype=float))
        if cov.ndim != 2 or cov.shape[0] != cov.shape[1]:
            raise ValueError(f"covariance must be square, got shape {cov.shape}")
        if not np.all(np.isfinite(cov)):
            raise ValueError("covariance has non-finite entries")
        scale = np.max(np.abs(cov))
        if scale == 0.0:
            raise ValueError("covariance is zero")
        if np.max(np.abs(cov - cov.T)) > 1e-12 * scale:
            raise ValueError("covariance is not symmetric")
        cov = 0.5 * (cov + cov.T)

        evals, evecs = np.linalg.eigh(cov)
        order = np.argsort(-evals, kind="stable")
        evals = evals[order]
        evecs = evecs[:, order]
        if evals[-1] <= 1e-12 * evals[0]:
            raise ValueError(
                f"covariance is not positive definite (eigenvalues {evals[-1]:.3g} .. {evals[0]:.3g})"
            )
        # deterministic sign: largest-magnitude entry of each eigenvector positive
        pivot = np.argmax(np.abs(evecs), axis=0)
        signs = np.sign(evecs[pivot, np.arange(evecs.shape[1])])
        evecs = evecs * signs

        self.cov = cov
        self.k = cov.shape[0]
        self.eigenvalues = evals
        self.eigenvectors = evecs
        self.precision = (evecs / evals) @ evecs.T
        self.sampling_factor = evecs * np.sqrt(evals)
        self.reference_mean = np.zeros(self.k)
        for a in (self.cov, self.eigenvalues, self.eigenvectors, self.precision, self.sampling_factor):
            a.setflags(write=False)

    def __repr__(self) -> str:
        return f"GaussianFamily(k={self.k})"

    @property
    def dim(self) -> int:
        return self.k

    def mean(self, theta) -> np.ndarray:
        return _as_vector(theta, self.k, "theta")

    def sample(self, theta, rng: np.random.Generator, size: int | None = None) -> np.ndarray:
        """Draw from N(theta, Sigma); ``size`` rows if given."""
        theta = _as_vector(theta, self.k, "theta")
        shape = (self.k,) if size is None else (size, self.k)
        z = rng.standard_normal(shape)
        return theta + z @ self.sampling_factor.T

    def log_likelihood_ratio(self, x, theta) -> np.ndarray | float:
        """log w_x(theta) = -x^T P theta + theta^T P theta / 2, P = Sigma^-1."""
        x = _as_vector(x, self.k, "x")
        theta = _as_vector(theta, self.k, "theta")
        p_theta = self.precision @ theta
        out = -(x @ p_theta) + 0.5 * (theta @ p_theta)
        return out if np.ndim(out) else float(out)

    def likelihood_ratio(self, x, theta):
        return np.exp(self.log_likelihood_ratio(x, theta))

    def log_density(self, x, theta):
        """Log of the N(theta, Sigma) density; used for finite-difference checks."""
        x = _as_vector(x, self.k, "x")
        theta = _as_vector(theta, self.k, "theta")
        d = x - theta
        quad = np.einsum("...i,ij,...j->...", d, self.precision, d)
        logdet = float(np.sum(np.log(self.eigenvalues)))
        return -0.5 * (quad + logdet + self.k * np.log(2.0 * np.pi))

    def grad_log_likelihood(self, x, theta) -> np.ndarray:
        """Fisher-metric gradient of the log-likelihood, ``x - theta``.

        The Euclidean gradient is ``Sigma^-1 (x - theta)``.
        """
        return _as_vector(x, self.k, "x") - _as_vector(theta, self.k, "theta")

    def fisher_inner(self, u, v) -> float:
        u = _as_vector(u, self.k, "u")
        v = _as_vector(v, self.k, "v")
        return u @ self.precision @ v

    def fisher_norm(self, u) -> float:
        return float(np.sqrt(self.fisher_inner(u, u)))

    def to_white(self, theta) -> np.ndarray:
        theta = _as_vector(theta, self.k, "theta")
        return (self.eigenvectors.T @ theta) / np.sqrt(self.eigenvalues)

    def from_white(self, phi) -> np.ndarray:
        return self.sampling_factor @ _as_vector(phi, self.k, "phi")

    def reduce(self, l: int) -> "ReducedFamily":
        return reduce(self, l)


@dataclass(frozen=True)
class ReducedFamily:
    """Mean shifts restricted to the span of the leading ``l`` principal axes.

    A reduced parameter ``a`` maps to the full mean ``theta(a) = U_l a``.
    """

    base: GaussianFamily
    l: int
    variance_explained: float = field(init=False)

    def __post_init__(self):
        if not 1 <= self.l <= self.base.k:
            raise ValueError(f"reduced dimension l={self.l} outside [1, {self.base.k}]")
        lam = self.base.eigenvalues
        object.__setattr__(self, "variance_explained", float(lam[: self.l].sum() / lam.sum()))

    @property
    def dim(self) -> int:
        return self.l

    @property
    def k(self) -> int:
        return self.base.k

    @property
    def basis(self) -> np.ndarray:
        return self.base.eigenvectors[:, : self.l]

    @property
    def eigenvalues(self) -> np.ndarray:
        return self.base.eigenvalues[: self.l]

    @property
    def sampling_factor(self) -> np.ndarray:
        return self.base.sampling_factor

    def mean(self, a) -> np.ndarray:
        return self.basis @ _as_vector(a, self.l, "a")

    def sample(self, a, rng: np.random.Generator, size: int | None = None) -> np.ndarray:
        return self.base.sample(self.mean(a), rng, size)

    def log_likelihood_ratio(self, x, a):
        return self.base.log_likelihood_ratio(x, self.mean(a))

    def likelihood_ratio(self, x, a):
        return np.exp(self.log_likelihood_ratio(x, a))

    def grad_log_likelihood(self, x, a) -> np.ndarray:
        """``U_l^T x - a``, the gradient for the metric ``Lambda_l^-1``."""
        x = _as_vector(x, self.k, "x")
        return x @ self.basis - _as_vector(a, self.l, "a")

    def fisher_inner(self, u, v) -> float:
        u = _as_vector(u, self.l, "u")
        v = _as_vector(v, self.l, "v")
        return float(np.sum(u * v / self.eigenvalues))

    def fisher_norm(self, u) -> float:
        return float(np.sqrt(self.fisher_inner(u, u)))

    def to_white(self, a) -> np.ndarray:
        return _as_vector(a, self.l, "a") / np.sqrt(self.eigenvalues)

    def from_white(self, phi) -> np.ndarray:
        return _as_vector(phi, self.l, "phi") * np.sqrt(self.eigenvalues)


def reduce(family: GaussianFamily, l: int) -> ReducedFamily:
    """Restrict ``family`` to its first ``l`` principal components."""
    return ReducedFamily(family, int(l))


def sample(family, theta, rng: np.random.Generator) -> np.ndarray:
    return family.sample(theta, rng)


def likelihood_ratio(family, x, theta):
    return family.likelihood_ratio(x, theta)


def grad_log_likelihood(family, x, theta):
    return family.grad_log_likelihood(x, theta)


def fisher_inner(family, u, v) -> float:
    return family.fisher_inner(u, v)
