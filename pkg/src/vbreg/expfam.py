"""Exponential-family distributions used by the samplers and the variational updates.

Conventions
-----------
* ``GammaParams(shape, rate)``: density ``rate**shape / Gamma(shape) x**(shape-1) exp(-rate x)``.
* ``InvGammaParams(shape, scale)``: density ``scale**shape / Gamma(shape) x**-(shape+1) exp(-scale/x)``.
* ``InvWishartParams(dof, scale)``: density proportional to
  ``|W|**-(dof+d+1)/2 exp(-tr(scale W^-1)/2)``, so ``W^-1 ~ Wishart(dof, scale^-1)``,
  ``E[W^-1] = dof * scale^-1`` and ``E[W] = scale / (dof-d-1)``.

All random draws go through a :class:`numpy.random.Generator` built on PCG64.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy import linalg
from scipy.special import digamma, gammaln, logsumexp, multigammaln

LOG_2PI = np.log(2.0 * np.pi)


class NotPositiveDefiniteError(np.linalg.LinAlgError):
    """Raised when a matrix that must be SPD fails its Cholesky factorisation."""

    def __init__(self, what: str, minor: int | None = None, iteration: int | None = None):
        self.what = what
        self.minor = minor
        self.iteration = iteration
        msg = f"{what} is not symmetric positive definite"
        if minor is not None:
            msg += f" (leading minor of order {minor} is not positive)"
        if iteration is not None:
            msg += f" at iteration {iteration}"
        super().__init__(msg)


# ---------------------------------------------------------------------------
# RNG
# ---------------------------------------------------------------------------

def make_rng(seed: int | np.random.SeedSequence | None = 0) -> np.random.Generator:
    """PCG64 generator for ``seed``; equal seeds give bitwise-equal streams."""
    if isinstance(seed, np.random.SeedSequence):
        return np.random.Generator(np.random.PCG64(seed))
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))


def spawn_rngs(seed: int, n: int) -> list[np.random.Generator]:
    """``n`` independent child streams derived from one root seed (child ``i`` is fixed by ``i``)."""
    children = np.random.SeedSequence(seed).spawn(n)
    return [np.random.Generator(np.random.PCG64(c)) for c in children]


# ---------------------------------------------------------------------------
# Linear algebra helpers
# ---------------------------------------------------------------------------

def _failing_minor(a: np.ndarray) -> int | None:
    for k in range(1, a.shape[0] + 1):
        try:
            np.linalg.cholesky(a[:k, :k])
        except np.linalg.LinAlgError:
            return k
    return None


def cholesky(a: np.ndarray, what: str = "matrix", jitter: bool = False,
             iteration: int | None = None) -> np.ndarray:
    """Lower Cholesky factor of ``a``.

    With ``jitter=True`` a single retry adds ``1e-10 * trace/p`` to the diagonal.
    """
    a = np.asarray(a, dtype=float)
    if not np.all(np.isfinite(a)):
        raise NotPositiveDefiniteError(what, iteration=iteration)
    try:
        return np.linalg.cholesky(a)
    except np.linalg.LinAlgError:
        if jitter:
            p = a.shape[0]
            eps = 1e-10 * max(np.trace(a), np.finfo(float).tiny) / p
            try:
                return np.linalg.cholesky(a + eps * np.eye(p))
            except np.linalg.LinAlgError:
                pass
        raise NotPositiveDefiniteError(what, _failing_minor(a), iteration) from None


def spd_inverse(a: np.ndarray, what: str = "matrix", jitter: bool = False) -> np.ndarray:
    """Inverse of an SPD matrix through its Cholesky factor (result symmetrised)."""
    chol = cholesky(a, what, jitter=jitter)
    inv = linalg.cho_solve((chol, True), np.eye(a.shape[0]))
    return 0.5 * (inv + inv.T)


def logdet_spd(a: np.ndarray, what: str = "matrix") -> float:
    chol = cholesky(a, what)
    return 2.0 * float(np.sum(np.log(np.diag(chol))))


def gaussian_from_natural(precision: np.ndarray, linear: np.ndarray, what: str = "precision"):
    """Convert (precision, precision @ mean) into (mean, covariance)."""
    chol = cholesky(precision, what, jitter=True)
    cov = linalg.cho_solve((chol, True), np.eye(precision.shape[0]))
    cov = 0.5 * (cov + cov.T)
    mean = linalg.cho_solve((chol, True), linear)
    return mean, cov


# ---------------------------------------------------------------------------
# Parameter containers
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MvnParams:
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, dtype=float))
        cov = np.atleast_2d(np.asarray(self.cov, dtype=float))
        if cov.shape != (mean.size, mean.size):
            raise ValueError(f"cov shape {cov.shape} does not match mean length {mean.size}")
        if not np.allclose(cov, cov.T, rtol=1e-10, atol=1e-12):
            raise ValueError("cov must be symmetric")
        cholesky(cov, "MVN covariance")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)

    @property
    def dim(self) -> int:
        return self.mean.size


def _check_positive(**kw):
    for name, value in kw.items():
        if not (np.all(np.isfinite(value)) and np.all(np.asarray(value) > 0)):
            raise ValueError(f"{name} must be positive and finite, got {value!r}")


@dataclass(frozen=True)
class GammaParams:
    shape: float
    rate: float

    def __post_init__(self):
        _check_positive(shape=self.shape, rate=self.rate)


@dataclass(frozen=True)
class InvGammaParams:
    shape: float
    scale: float

    def __post_init__(self):
        _check_positive(shape=self.shape, scale=self.scale)


@dataclass(frozen=True)
class InvWishartParams:
    dof: float
    scale: np.ndarray

    def __post_init__(self):
        scale = np.atleast_2d(np.asarray(self.scale, dtype=float))
        d = scale.shape[0]
        if scale.shape != (d, d):
            raise ValueError("scale must be square")
        if not self.dof > d - 1:
            raise ValueError(f"dof must exceed d - 1 = {d - 1}, got {self.dof}")
        cholesky(scale, "inverse-Wishart scale")
        object.__setattr__(self, "scale", scale)

    @property
    def dim(self) -> int:
        return self.scale.shape[0]


@dataclass(frozen=True)
class DirichletParams:
    conc: np.ndarray

    def __post_init__(self):
        conc = np.atleast_1d(np.asarray(self.conc, dtype=float))
        _check_positive(conc=conc)
        object.__setattr__(self, "conc", conc)


# ---------------------------------------------------------------------------
# Samplers
# ---------------------------------------------------------------------------

def mvn_sample(rng: np.random.Generator, p: MvnParams, size: int | None = None) -> np.ndarray:
    chol = cholesky(p.cov, "MVN covariance")
    if size is None:
        return p.mean + chol @ rng.standard_normal(p.dim)
    z = rng.standard_normal((size, p.dim))
    return p.mean + z @ chol.T


def mvn_sample_precision(rng: np.random.Generator, precision: np.ndarray, linear: np.ndarray,
                         what: str = "precision", iteration: int | None = None) -> np.ndarray:
    """Draw from N(P^-1 h, P^-1) given precision P and linear term h, without forming P^-1."""
    chol = cholesky(precision, what, jitter=True, iteration=iteration)
    mean = linalg.cho_solve((chol, True), linear)
    z = rng.standard_normal(linear.shape[0])
    return mean + linalg.solve_triangular(chol.T, z, lower=False)


def gamma_sample(rng: np.random.Generator, p: GammaParams, size=None):
    return rng.gamma(p.shape, 1.0 / p.rate, size=size)


def invgamma_sample(rng: np.random.Generator, p: InvGammaParams, size=None):
    return 1.0 / rng.gamma(p.shape, 1.0 / p.scale, size=size)


def wishart_sample(rng: np.random.Generator, dof: float, scale_chol: np.ndarray) -> np.ndarray:
    """Bartlett draw from Wishart(dof, L L^T) given the lower factor ``L``."""
    d = scale_chol.shape[0]
    a = np.zeros((d, d))
    a[np.diag_indices(d)] = np.sqrt(rng.chisquare(dof - np.arange(d)))
    a[np.tril_indices(d, -1)] = rng.standard_normal(d * (d - 1) // 2)
    la = scale_chol @ a
    return la @ la.T


def invwishart_sample(rng: np.random.Generator, p: InvWishartParams) -> np.ndarray:
    """Draw W ~ IW(dof, scale): Bartlett-sample the Wishart on ``scale^-1`` and invert."""
    prec_chol = cholesky(spd_inverse(p.scale, "inverse-Wishart scale"), "inverse-Wishart scale")
    w_inv = wishart_sample(rng, p.dof, prec_chol)
    return spd_inverse(w_inv, "Wishart draw")


def dirichlet_sample_log(rng: np.random.Generator, conc: np.ndarray) -> np.ndarray:
    """Log of a Dirichlet draw.

    Uses G(a) = G(a + 1) U^(1/a) so that concentrations well below one (alpha0 = 1/K)
    never underflow to an exact zero weight.
    """
    conc = np.asarray(conc, float)
    logg = np.log(rng.gamma(conc + 1.0, 1.0)) + np.log(rng.uniform(size=conc.size)) / conc
    return logg - logsumexp(logg)


def dirichlet_sample(rng: np.random.Generator, p: DirichletParams) -> np.ndarray:
    return np.exp(dirichlet_sample_log(rng, p.conc))


def categorical_sample(rng: np.random.Generator, weights: np.ndarray, log: bool = False) -> int:
    """Sample an index with probability proportional to ``weights`` (or ``exp(weights)``)."""
    w = np.asarray(weights, dtype=float)
    if log:
        w = np.exp(w - np.max(w))
    total = w.sum()
    if not (total > 0 and np.isfinite(total)):
        raise ValueError("categorical weights must have a positive finite sum")
    cdf = np.cumsum(w / total)
    return int(min(np.searchsorted(cdf, rng.uniform(), side="right"), w.size - 1))


def categorical_sample_rows(rng: np.random.Generator, log_weights: np.ndarray) -> np.ndarray:
    """One categorical draw per row of a matrix of unnormalised log-probabilities."""
    lw = log_weights - log_weights.max(axis=1, keepdims=True)
    w = np.exp(lw)
    cdf = np.cumsum(w, axis=1)
    u = rng.uniform(size=(w.shape[0], 1)) * cdf[:, -1:]
    idx = (cdf <= u).sum(axis=1)
    return np.minimum(idx, w.shape[1] - 1)


# ---------------------------------------------------------------------------
# Log densities
# ---------------------------------------------------------------------------

def mvn_logpdf(x: np.ndarray, p: MvnParams) -> float:
    chol = cholesky(p.cov, "MVN covariance")
    z = linalg.solve_triangular(chol, np.asarray(x, float) - p.mean, lower=True)
    return float(-0.5 * p.dim * LOG_2PI - np.sum(np.log(np.diag(chol))) - 0.5 * z @ z)


def gamma_logpdf(x, p: GammaParams):
    x = np.asarray(x, float)
    return p.shape * np.log(p.rate) - gammaln(p.shape) + (p.shape - 1) * np.log(x) - p.rate * x


def invgamma_logpdf(x, p: InvGammaParams):
    x = np.asarray(x, float)
    return p.shape * np.log(p.scale) - gammaln(p.shape) - (p.shape + 1) * np.log(x) - p.scale / x


def invwishart_logpdf(w: np.ndarray, p: InvWishartParams) -> float:
    d = p.dim
    nu = p.dof
    w_inv = spd_inverse(w, "inverse-Wishart argument")
    return float(0.5 * nu * logdet_spd(p.scale) - 0.5 * nu * d * np.log(2.0)
                 - multigammaln(0.5 * nu, d) - 0.5 * (nu + d + 1) * logdet_spd(w)
                 - 0.5 * np.trace(p.scale @ w_inv))


def dirichlet_logpdf(x, p: DirichletParams) -> float:
    x = np.asarray(x, float)
    a = p.conc
    return float(gammaln(a.sum()) - gammaln(a).sum() + np.sum((a - 1) * np.log(x)))


def categorical_logpmf(x: int, probs) -> float:
    return float(np.log(np.asarray(probs, float)[x]))


def multinomial_logpmf(x, probs) -> float:
    """Log-pmf only; the multinomial plays no part in either regression model."""
    x = np.asarray(x)
    probs = np.asarray(probs, float)
    n = x.sum()
    return float(gammaln(n + 1) - gammaln(x + 1).sum() + np.sum(x * np.log(probs)))


# ---------------------------------------------------------------------------
# Closed-form expectations
# ---------------------------------------------------------------------------

def gamma_expectations(p: GammaParams) -> tuple[float, float]:
    """(E[x], E[log x])."""
    return p.shape / p.rate, float(digamma(p.shape) - np.log(p.rate))


def invgamma_expectations(p: InvGammaParams, need_mean: bool = True) -> tuple[float, float, float]:
    """(E[x], E[1/x], E[log x]). ``E[x]`` requires shape > 1 unless ``need_mean`` is False."""
    if p.shape <= 1.0:
        if need_mean:
            raise ValueError(f"E[x] of an inverse gamma needs shape > 1, got {p.shape}")
        e_x = np.inf
    else:
        e_x = p.scale / (p.shape - 1.0)
    return e_x, p.shape / p.scale, float(np.log(p.scale) - digamma(p.shape))


def invwishart_mean_inv(p: InvWishartParams) -> np.ndarray:
    return p.dof * spd_inverse(p.scale, "inverse-Wishart scale")


def invwishart_mean(p: InvWishartParams) -> np.ndarray:
    if p.dof <= p.dim + 1:
        raise ValueError("E[W] needs dof > d + 1")
    return p.scale / (p.dof - p.dim - 1)


def invwishart_elogdet(p: InvWishartParams) -> float:
    """E[log|W|] = log|scale| - d log 2 - sum_i psi((dof + 1 - i)/2)."""
    d = p.dim
    i = np.arange(1, d + 1)
    return float(logdet_spd(p.scale) - d * np.log(2.0) - np.sum(digamma(0.5 * (p.dof + 1 - i))))


def dirichlet_elog(p: DirichletParams) -> np.ndarray:
    return digamma(p.conc) - digamma(p.conc.sum())


# Negative entropies E_q[log q] --------------------------------------------

def mvn_neg_entropy(cov: np.ndarray) -> float:
    d = cov.shape[0]
    return float(-0.5 * d * (LOG_2PI + 1.0) - 0.5 * logdet_spd(cov, "Gaussian covariance"))


def gamma_neg_entropy(p: GammaParams) -> float:
    a, b = p.shape, p.rate
    return float(np.log(b) - gammaln(a) + (a - 1) * digamma(a) - a)


def invgamma_neg_entropy(p: InvGammaParams) -> float:
    a, b = p.shape, p.scale
    return float(-np.log(b) - gammaln(a) + (a + 1) * digamma(a) - a)


def dirichlet_neg_entropy(p: DirichletParams) -> float:
    a = p.conc
    return float(gammaln(a.sum()) - gammaln(a).sum() + np.sum((a - 1) * dirichlet_elog(p)))


def invwishart_neg_entropy(p: InvWishartParams) -> float:
    d, nu = p.dim, p.dof
    return float(0.5 * nu * logdet_spd(p.scale) - 0.5 * nu * d * np.log(2.0)
                 - multigammaln(0.5 * nu, d) - 0.5 * (nu + d + 1) * invwishart_elogdet(p)
                 - 0.5 * nu * d)


# ---------------------------------------------------------------------------
# Natural parametrisation
# ---------------------------------------------------------------------------

def gamma_to_natural(p: GammaParams) -> np.ndarray:
    return np.array([p.shape - 1.0, -p.rate])


def gamma_from_natural(eta) -> GammaParams:
    return GammaParams(eta[0] + 1.0, -eta[1])


def invgamma_to_natural(p: InvGammaParams) -> np.ndarray:
    return np.array([-p.shape - 1.0, -p.scale])


def invgamma_from_natural(eta) -> InvGammaParams:
    return InvGammaParams(-eta[0] - 1.0, -eta[1])


@dataclass
class NefDescriptor:
    """A natural-exponential-family member h(x) exp{eta . t(x) - a(eta)}."""

    natural_param: np.ndarray
    suff_stat: Callable[[np.ndarray], np.ndarray]
    log_partition: Callable[[np.ndarray], float]
    base_measure_log: Callable[[np.ndarray], np.ndarray] = field(default=lambda x: 0.0)

    def logpdf(self, x):
        t = self.suff_stat(x)
        return self.base_measure_log(x) + t @ self.natural_param - self.log_partition(self.natural_param)

    def mean_suff_stat(self, h: float = 1e-6) -> np.ndarray:
        """Gradient of the log partition at ``natural_param`` (central differences)."""
        eta = np.asarray(self.natural_param, float)
        grad = np.empty_like(eta)
        for i in range(eta.size):
            e = np.zeros_like(eta)
            e[i] = h
            grad[i] = (self.log_partition(eta + e) - self.log_partition(eta - e)) / (2 * h)
        return grad


def gamma_nef(p: GammaParams) -> NefDescriptor:
    return NefDescriptor(
        natural_param=gamma_to_natural(p),
        suff_stat=lambda x: np.stack([np.log(x), x], axis=-1),
        log_partition=lambda eta: float(gammaln(eta[0] + 1.0) - (eta[0] + 1.0) * np.log(-eta[1])),
    )


def invgamma_nef(p: InvGammaParams) -> NefDescriptor:
    return NefDescriptor(
        natural_param=invgamma_to_natural(p),
        suff_stat=lambda x: np.stack([np.log(x), 1.0 / x], axis=-1),
        log_partition=lambda eta: float(gammaln(-eta[0] - 1.0) - (-eta[0] - 1.0) * np.log(-eta[1])),
    )


def poisson_nef(rate: float) -> NefDescriptor:
    """Discrete member used to check normalisation by brute-force summation."""
    return NefDescriptor(
        natural_param=np.array([np.log(rate)]),
        suff_stat=lambda x: np.atleast_1d(np.asarray(x, float))[..., None],
        log_partition=lambda eta: float(np.exp(eta[0])),
        base_measure_log=lambda x: -gammaln(np.asarray(x, float) + 1.0),
    )


# ---------------------------------------------------------------------------
# KL divergence
# ---------------------------------------------------------------------------

def gaussian_kl(p: MvnParams, q: MvnParams) -> float:
    """KL(p || q) between two multivariate normals."""
    d = p.dim
    q_inv = spd_inverse(q.cov, "q covariance")
    diff = q.mean - p.mean
    return float(0.5 * (np.trace(q_inv @ p.cov) + diff @ q_inv @ diff - d
                        + logdet_spd(q.cov) - logdet_spd(p.cov)))

