"""Bayesian linear regression with a N(beta0, Sigma0) x IG(nu0/2, nu0 sigma0^2/2) prior.

Two engines share the model: a two-block Gibbs sampler and mean-field CAVI with
q(beta, sigma^2) = N(mu, Sigma) IG(a, b).
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np
from scipy import integrate, linalg, optimize
from scipy.special import digamma, gammaln

from .data import GroupedDataset
from .expfam import (
    LOG_2PI,
    InvGammaParams,
    cholesky,
    gaussian_from_natural,
    invgamma_logpdf,
    invgamma_neg_entropy,
    logdet_spd,
    make_rng,
    mvn_neg_entropy,
    mvn_sample_precision,
    spd_inverse,
)

log = logging.getLogger(__name__)


class ElboDecreaseError(RuntimeError):
    """CAVI produced a lower ELBO than the previous sweep (beyond tolerance)."""


@dataclass
class RegressionData:
    """Single-group regression data. ``n = 0`` is allowed (prior-only fixed point)."""

    y: np.ndarray
    X: np.ndarray

    def __post_init__(self):
        self.y = np.asarray(self.y, float).ravel()
        self.X = np.asarray(self.X, float).reshape(self.y.size, -1) if self.y.size else \
            np.atleast_2d(np.asarray(self.X, float))
        if self.X.shape[0] != self.y.size:
            raise ValueError(f"X has {self.X.shape[0]} rows but y has {self.y.size}")
        if not (np.all(np.isfinite(self.y)) and np.all(np.isfinite(self.X))):
            raise ValueError("non-finite values in regression data")
        self.XtX = self.X.T @ self.X
        self.Xty = self.X.T @ self.y
        self.yty = float(self.y @ self.y)

    @property
    def n(self) -> int:
        return self.y.size

    @property
    def p(self) -> int:
        return self.X.shape[1]


def as_regression(data) -> RegressionData:
    if isinstance(data, RegressionData):
        return data
    if isinstance(data, GroupedDataset):
        return RegressionData(data.y, data.X)
    y, X = data
    return RegressionData(y, X)


def ols(data) -> tuple[np.ndarray, float]:
    """OLS coefficients and the unbiased residual variance."""
    d = as_regression(data)
    if d.n < d.p + 1:
        raise ValueError(f"OLS needs n >= p + 1 (n={d.n}, p={d.p})")
    rank = np.linalg.matrix_rank(d.X)
    if rank < d.p:
        raise np.linalg.LinAlgError(f"design matrix is rank deficient (rank {rank} < p = {d.p})")
    beta = linalg.cho_solve((cholesky(d.XtX, "X'X"), True), d.Xty)
    resid = d.y - d.X @ beta
    return beta, float(resid @ resid / (d.n - d.p))


@dataclass
class LrmPrior:
    beta0: np.ndarray
    Sigma0: np.ndarray
    nu0: float
    sigma0_sq: float

    def __post_init__(self):
        self.beta0 = np.atleast_1d(np.asarray(self.beta0, float))
        self.Sigma0 = np.atleast_2d(np.asarray(self.Sigma0, float))
        cholesky(self.Sigma0, "prior covariance Sigma0")
        if not (self.nu0 > 0 and self.sigma0_sq > 0):
            raise ValueError("nu0 and sigma0_sq must be positive")
        self.Sigma0_inv = spd_inverse(self.Sigma0, "prior covariance Sigma0")


def unit_info_prior(data) -> LrmPrior:
    """Prior centred at OLS carrying about one observation's worth of information."""
    d = as_regression(data)
    beta, s2 = ols(d)
    return LrmPrior(beta, d.n * s2 * spd_inverse(d.XtX, "X'X"), 1.0, s2)


def zellner_prior(data, g: float | None = None) -> LrmPrior:
    """Zellner g-prior: zero mean, covariance g sigma0^2 (X'X)^-1 with g = n by default."""
    d = as_regression(data)
    g = d.n if g is None else g
    if not g > 0:
        raise ValueError(f"g must be positive, got {g}")
    _, s2 = ols(d)
    return LrmPrior(np.zeros(d.p), g * s2 * spd_inverse(d.XtX, "X'X"), 1.0, s2)


# ---------------------------------------------------------------------------
# Draw containers
# ---------------------------------------------------------------------------

@dataclass
class PosteriorDraws:
    """Retained draws, one row per draw: the p coefficients then sigma^2."""

    names: list[str]
    draws: np.ndarray
    meta: dict = field(default_factory=dict)
    log_joint: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def beta(self) -> np.ndarray:
        return self.draws[:, :-1]

    @property
    def sigma2(self) -> np.ndarray:
        return self.draws[:, -1]

    def __len__(self) -> int:
        return self.draws.shape[0]

    def subsample(self, n: int) -> "PosteriorDraws":
        """Evenly spaced subset of ``n`` draws (all draws if fewer are available)."""
        B = len(self)
        if n >= B:
            return self
        idx = np.linspace(0, B - 1, n).round().astype(int)
        return PosteriorDraws(self.names, self.draws[idx], dict(self.meta), self.log_joint)

    def to_store(self):
        return "lrm-draws", {"draws": self.draws, "log_joint": self.log_joint}, \
            {**self.meta, "names": self.names}

    @classmethod
    def from_store(cls, arrays, meta):
        meta = dict(meta)
        names = meta.pop("names")
        return cls(names, arrays["draws"], meta, arrays["log_joint"])


def _names(p: int) -> list[str]:
    return [f"beta[{i}]" for i in range(p)] + ["sigma2"]


# ---------------------------------------------------------------------------
# Gibbs sampler
# ---------------------------------------------------------------------------

def log_joint(beta, sigma2, data: RegressionData, prior: LrmPrior) -> float:
    r = data.y - data.X @ beta
    ll = -0.5 * data.n * (LOG_2PI + np.log(sigma2)) - 0.5 * r @ r / sigma2
    diff = beta - prior.beta0
    lp_beta = (-0.5 * prior.beta0.size * LOG_2PI - 0.5 * logdet_spd(prior.Sigma0)
               - 0.5 * diff @ prior.Sigma0_inv @ diff)
    lp_s2 = invgamma_logpdf(sigma2, InvGammaParams(prior.nu0 / 2, prior.nu0 * prior.sigma0_sq / 2))
    return float(ll + lp_beta + lp_s2)


def lrm_gibbs(data, prior: LrmPrior, n_samples: int = 11000, burn_in: int | None = None,
              thin: int = 1, seed: int = 0, sigma2_fixed: float | None = None,
              init: tuple[np.ndarray, float] | None = None) -> PosteriorDraws:
    """Gibbs sampler alternating beta | sigma^2 and sigma^2 | beta.

    ``n_samples`` counts every iteration including burn-in; draws after burn-in are
    kept every ``thin`` iterations. ``sigma2_fixed`` clamps sigma^2 (conjugate check).
    """
    d = as_regression(data)
    burn_in = n_samples // 10 if burn_in is None else burn_in
    if not n_samples > burn_in >= 0 or thin < 1:
        raise ValueError("need n_samples > burn_in >= 0 and thin >= 1")
    rng = make_rng(seed)
    if init is None:
        try:
            beta, s2 = ols(d)
        except (ValueError, np.linalg.LinAlgError):
            beta, s2 = prior.beta0.copy(), prior.sigma0_sq
    else:
        beta, s2 = np.asarray(init[0], float), float(init[1])
    if sigma2_fixed is not None:
        s2 = float(sigma2_fixed)
    prior_lin = prior.Sigma0_inv @ prior.beta0
    a_post = 0.5 * (d.n + prior.nu0)
    keep = []
    trace = np.empty(n_samples)
    t0 = time.perf_counter()
    for it in range(n_samples):
        prec = prior.Sigma0_inv + d.XtX / s2
        beta = mvn_sample_precision(rng, prec, prior_lin + d.Xty / s2, "beta precision V^-1", it)
        if sigma2_fixed is None:
            r = d.y - d.X @ beta
            b_post = 0.5 * (prior.nu0 * prior.sigma0_sq + r @ r)
            s2 = b_post / rng.gamma(a_post)
        trace[it] = log_joint(beta, s2, d, prior)
        if it >= burn_in and (it - burn_in) % thin == 0:
            keep.append(np.append(beta, s2))
    meta = {"method": "mcmc", "seed": seed, "n_samples": n_samples, "burn_in": burn_in,
            "thin": thin, "runtime_sec": time.perf_counter() - t0}
    return PosteriorDraws(_names(d.p), np.array(keep), meta, trace)


# ---------------------------------------------------------------------------
# CAVI
# ---------------------------------------------------------------------------

@dataclass
class LrmVarState:
    mu_beta: np.ndarray
    Sigma_beta: np.ndarray
    a: float
    b: float
    elbo_trace: list[float] = field(default_factory=list)
    converged: bool = False
    runtime_sec: float = 0.0

    @property
    def e_inv_sigma2(self) -> float:
        return self.a / self.b

    def to_store(self):
        arrays = {"mu_beta": self.mu_beta, "Sigma_beta": self.Sigma_beta,
                  "ab": np.array([self.a, self.b]), "elbo_trace": np.asarray(self.elbo_trace, float)}
        return "lrm-state", arrays, {"converged": self.converged, "runtime_sec": self.runtime_sec}

    @classmethod
    def from_store(cls, arrays, meta):
        a, b = arrays["ab"]
        return cls(arrays["mu_beta"], arrays["Sigma_beta"], float(a), float(b),
                   arrays["elbo_trace"].tolist(), meta["converged"], meta["runtime_sec"])


def expected_rss(mu, Sigma, d: RegressionData) -> float:
    """E_q[(y - X beta)'(y - X beta)] for beta ~ N(mu, Sigma)."""
    r = d.y - d.X @ mu
    return float(r @ r + np.sum(d.XtX * Sigma))


def lrm_elbo(state: LrmVarState, data, prior: LrmPrior, sigma2_fixed: float | None = None) -> float:
    d = as_regression(data)
    p = d.p
    mu, S = state.mu_beta, state.Sigma_beta
    erss = expected_rss(mu, S, d)
    if sigma2_fixed is None:
        e_log_s2 = np.log(state.b) - digamma(state.a)
        e_inv = state.a / state.b
    else:
        e_log_s2 = np.log(sigma2_fixed)
        e_inv = 1.0 / sigma2_fixed
    e_lik = -0.5 * d.n * LOG_2PI - 0.5 * d.n * e_log_s2 - 0.5 * e_inv * erss
    diff = mu - prior.beta0
    e_p_beta = (-0.5 * p * LOG_2PI - 0.5 * logdet_spd(prior.Sigma0)
                - 0.5 * (diff @ prior.Sigma0_inv @ diff + np.sum(prior.Sigma0_inv * S)))
    e_q_beta = mvn_neg_entropy(S)
    total = e_lik + e_p_beta - e_q_beta
    if sigma2_fixed is None:
        h = 0.5 * prior.nu0
        scale0 = h * prior.sigma0_sq
        e_p_s2 = h * np.log(scale0) - gammaln(h) - (h + 1.0) * e_log_s2 - scale0 * e_inv
        total += e_p_s2 - invgamma_neg_entropy(InvGammaParams(state.a, state.b))
    return float(total)


def _beta_update(e_inv: float, d: RegressionData, prior: LrmPrior):
    prec = prior.Sigma0_inv + e_inv * d.XtX
    return gaussian_from_natural(prec, prior.Sigma0_inv @ prior.beta0 + e_inv * d.Xty,
                                 "q(beta) precision")


def lrm_cavi(data, prior: LrmPrior, max_iter: int = 1000, rel_tol: float = 1e-9,
             sigma2_fixed: float | None = None, init: LrmVarState | None = None,
             monotone_tol: float = 1e-8) -> LrmVarState:
    """Coordinate ascent on q(beta) q(sigma^2) until the relative ELBO change drops below ``rel_tol``."""
    d = as_regression(data)
    t0 = time.perf_counter()
    if init is not None:
        state = LrmVarState(init.mu_beta.copy(), init.Sigma_beta.copy(), init.a, init.b)
    else:
        a = 0.5 * (d.n + prior.nu0)
        try:
            mu, s2 = ols(d)
        except (ValueError, np.linalg.LinAlgError):
            mu, s2 = prior.beta0.copy(), prior.sigma0_sq
        state = LrmVarState(mu, prior.Sigma0.copy(), a, a * s2)
    prev = None
    for it in range(max_iter):
        e_inv = 1.0 / sigma2_fixed if sigma2_fixed is not None else state.a / state.b
        state.mu_beta, state.Sigma_beta = _beta_update(e_inv, d, prior)
        if sigma2_fixed is None:
            state.a = 0.5 * (d.n + prior.nu0)
            state.b = 0.5 * (prior.nu0 * prior.sigma0_sq
                             + expected_rss(state.mu_beta, state.Sigma_beta, d))
        elbo = lrm_elbo(state, d, prior, sigma2_fixed)
        state.elbo_trace.append(elbo)
        if prev is not None:
            if elbo < prev - monotone_tol * abs(prev):
                raise ElboDecreaseError(f"ELBO decreased from {prev!r} to {elbo!r} at iteration {it}")
            if abs(elbo - prev) <= rel_tol * abs(prev):
                state.converged = True
                break
        prev = elbo
    state.runtime_sec = time.perf_counter() - t0
    return state


def lrm_sample_variational(state: LrmVarState, n_draws: int = 1000, seed: int = 0) -> PosteriorDraws:
    """Independent draws beta ~ q(beta), sigma^2 ~ q(sigma^2)."""
    rng = make_rng(seed)
    chol = cholesky(state.Sigma_beta, "q(beta) covariance")
    beta = state.mu_beta + rng.standard_normal((n_draws, state.mu_beta.size)) @ chol.T
    s2 = state.b / rng.gamma(state.a, size=n_draws)
    meta = {"method": "vi", "seed": seed, "n_draws": n_draws}
    return PosteriorDraws(_names(state.mu_beta.size), np.column_stack([beta, s2]), meta)


# ---------------------------------------------------------------------------
# Marginal likelihood (semi-conjugate model, 1-d quadrature over sigma^2)
# ---------------------------------------------------------------------------

def log_marginal_given_sigma2(data, prior: LrmPrior, sigma2: float) -> float:
    """log N(y | X beta0, sigma^2 I + X Sigma0 X') via the determinant lemma and Woodbury."""
    d = as_regression(data)
    r = d.y - d.X @ prior.beta0
    Xtr = d.X.T @ r
    inner = prior.Sigma0_inv + d.XtX / sigma2
    chol = cholesky(inner, "Sigma0^-1 + X'X/sigma^2")
    logdet = d.n * np.log(sigma2) + logdet_spd(prior.Sigma0) + 2 * np.sum(np.log(np.diag(chol)))
    u = linalg.cho_solve((chol, True), Xtr / sigma2)
    quad = r @ r / sigma2 - (Xtr / sigma2) @ u
    return float(-0.5 * d.n * LOG_2PI - 0.5 * logdet - 0.5 * quad)


def lrm_log_marginal(data, prior: LrmPrior) -> float:
    """log p(y), integrating sigma^2 out numerically on the log scale."""
    d = as_regression(data)
    ig = InvGammaParams(prior.nu0 / 2, prior.nu0 * prior.sigma0_sq / 2)

    def f(s):
        s2 = np.exp(s)
        return log_marginal_given_sigma2(d, prior, s2) + invgamma_logpdf(s2, ig) + s

    res = optimize.minimize_scalar(lambda s: -f(s), bounds=(-40.0, 40.0), method="bounded",
                                   options={"xatol": 1e-10})
    s_hat, f_hat = res.x, -res.fun
    val, _ = integrate.quad(lambda s: np.exp(f(s) - f_hat), s_hat - 30.0, s_hat + 30.0,
                            points=[s_hat], limit=400, epsabs=0.0, epsrel=1e-12)
    return float(f_hat + np.log(val))


# ---------------------------------------------------------------------------
# Predictive quantities consumed by diagnostics
# ---------------------------------------------------------------------------

def pointwise_loglik(draws: PosteriorDraws, data) -> np.ndarray:
    """B x n matrix of log N(y_i | x_i' beta_b, sigma^2_b)."""
    d = as_regression(data)
    mean = draws.beta @ d.X.T
    s2 = draws.sigma2[:, None]
    return -0.5 * (LOG_2PI + np.log(s2)) - 0.5 * (d.y[None, :] - mean) ** 2 / s2


def loglik_at_mean(draws: PosteriorDraws, data) -> np.ndarray:
    d = as_regression(data)
    beta = draws.beta.mean(axis=0)
    s2 = draws.sigma2.mean()
    return -0.5 * (LOG_2PI + np.log(s2)) - 0.5 * (d.y - d.X @ beta) ** 2 / s2


def predictive_mean(draws: PosteriorDraws, data) -> np.ndarray:
    d = as_regression(data)
    return d.X @ draws.beta.mean(axis=0)


def replicate(draws: PosteriorDraws, data, rng: np.random.Generator, b: int) -> np.ndarray:
    d = as_regression(data)
    return d.X @ draws.beta[b] + np.sqrt(draws.sigma2[b]) * rng.standard_normal(d.n)
