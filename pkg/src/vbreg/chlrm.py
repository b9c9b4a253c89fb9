"""Clustered hierarchical linear regression.

Groups j = 1..m are assigned to K latent regression components:

    y_j | gamma_j = k ~ N(X_j beta_k, sigma_k^2 I)
    gamma_j ~ Cat(omega),  beta_k ~ N(beta, Sigma),  sigma_k^2 ~ IG(nu0/2, nu0 xi^2/2)
    omega ~ Dir(alpha0),   beta ~ N(mu0, Lambda0),   Sigma ~ IW(n0, S0),  xi^2 ~ G(a0, b0)

Sigma ~ IW(n, S) means density proportional to |Sigma|^{-(n+p+1)/2} exp(-tr(S Sigma^-1)/2),
so E[Sigma^-1] = n S^-1.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, fields

import numpy as np
from scipy.cluster.vq import kmeans2
from scipy.special import digamma, gammaln, logsumexp, multigammaln

from .data import GroupedDataset
from .expfam import (
    LOG_2PI,
    DirichletParams,
    GammaParams,
    InvGammaParams,
    InvWishartParams,
    NotPositiveDefiniteError,
    cholesky,
    dirichlet_neg_entropy,
    gamma_neg_entropy,
    gaussian_from_natural,
    invgamma_neg_entropy,
    invwishart_elogdet,
    invwishart_neg_entropy,
    invwishart_sample,
    logdet_spd,
    make_rng,
    mvn_neg_entropy,
    spawn_rngs,
    spd_inverse,
)
from .lrm import ElboDecreaseError, ols

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# Prior
# ---------------------------------------------------------------------------

@dataclass
class ChlrmPrior:
    mu0: np.ndarray
    Lambda0: np.ndarray
    n0: float
    S0: np.ndarray
    nu0: float
    a0: float
    b0: float
    alpha0: np.ndarray

    def __post_init__(self):
        self.mu0 = np.atleast_1d(np.asarray(self.mu0, float))
        self.Lambda0 = np.atleast_2d(np.asarray(self.Lambda0, float))
        self.S0 = np.atleast_2d(np.asarray(self.S0, float))
        self.alpha0 = np.atleast_1d(np.asarray(self.alpha0, float))
        p = self.mu0.size
        if self.Lambda0.shape != (p, p) or self.S0.shape != (p, p):
            raise ValueError(f"prior matrices must be {p}x{p}")
        self.Lambda0_inv = spd_inverse(self.Lambda0, "prior covariance Lambda0")
        cholesky(self.S0, "prior scale S0")
        if not self.n0 > p - 1:
            raise ValueError(f"n0 must exceed p - 1 = {p - 1}, got {self.n0}")
        for name in ("nu0", "a0", "b0"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.alpha0.size < 1 or np.any(self.alpha0 <= 0):
            raise ValueError("alpha0 must be a nonempty positive vector")

    @property
    def K(self) -> int:
        return self.alpha0.size

    @property
    def p(self) -> int:
        return self.mu0.size

    def with_K(self, K: int) -> "ChlrmPrior":
        return ChlrmPrior(self.mu0, self.Lambda0, self.n0, self.S0, self.nu0, self.a0, self.b0,
                          np.full(K, 1.0 / K))


def chlrm_default_prior(data: GroupedDataset, K: int) -> ChlrmPrior:
    """Weak prior built from one stacked OLS fit; E[xi^2] = a0/b0 equals the OLS variance."""
    if K < 1:
        raise ValueError(f"K must be at least 1, got {K}")
    beta, s2 = ols((data.y, data.X))
    Lambda0 = data.N * s2 * spd_inverse(data.XtX.sum(axis=0), "X'X")
    return ChlrmPrior(beta, Lambda0, data.p + 2.0, Lambda0.copy(), 1.0, 1.0, 1.0 / s2,
                      np.full(K, 1.0 / K))


# ---------------------------------------------------------------------------
# Shared linear algebra on stacks of small matrices
# ---------------------------------------------------------------------------

def _batched_chol(P, what, iteration=None):
    try:
        return np.linalg.cholesky(P)
    except np.linalg.LinAlgError:
        for k in range(P.shape[0]):
            cholesky(P[k], f"{what}[{k}]", iteration=iteration)
        raise NotPositiveDefiniteError(what, None, iteration)


def _sample_gaussians(rng, P, h, what, iteration=None):
    """One draw per slice from N(P_k^-1 h_k, P_k^-1)."""
    L = _batched_chol(P, what, iteration)
    mean = np.linalg.solve(P, h[..., None])[..., 0]
    z = rng.standard_normal(h.shape)
    return mean + np.linalg.solve(np.swapaxes(L, -1, -2), z[..., None])[..., 0]


def _expected_rss(data: GroupedDataset, mu, Sigma=None):
    """m x K matrix of E[(y_j - X_j b_k)'(y_j - X_j b_k)] for b_k ~ N(mu_k, Sigma_k)."""
    out = (data.yty[:, None] - 2.0 * data.Xty @ mu.T
           + np.einsum("kp,jpq,kq->jk", mu, data.XtX, mu))
    if Sigma is not None:
        out = out + np.einsum("jpq,kqp->jk", data.XtX, Sigma)
    return out


# ---------------------------------------------------------------------------
# Gibbs sampler
# ---------------------------------------------------------------------------

@dataclass
class ChlrmDraws:
    gamma: np.ndarray        # B x m, 0-based cluster labels
    omega: np.ndarray        # B x K
    beta_k: np.ndarray       # B x K x p
    sigma2_k: np.ndarray     # B x K
    beta: np.ndarray         # B x p
    Sigma: np.ndarray        # B x p x p
    xi2: np.ndarray          # B
    log_joint: np.ndarray = field(default_factory=lambda: np.zeros(0))
    meta: dict = field(default_factory=dict)

    _arrays = ("gamma", "omega", "beta_k", "sigma2_k", "beta", "Sigma", "xi2", "log_joint")

    def __len__(self) -> int:
        return self.gamma.shape[0]

    @property
    def K(self) -> int:
        return self.omega.shape[1]

    def cluster_sizes(self) -> np.ndarray:
        """B x K counts of groups per cluster."""
        return np.stack([np.bincount(g, minlength=self.K) for g in self.gamma])

    def kappa(self) -> np.ndarray:
        return (self.cluster_sizes() > 0).sum(axis=1)

    def take(self, idx) -> "ChlrmDraws":
        kw = {f: getattr(self, f)[idx] for f in self._arrays if f != "log_joint"}
        return ChlrmDraws(**kw, log_joint=self.log_joint, meta=dict(self.meta))

    def subsample(self, n: int) -> "ChlrmDraws":
        B = len(self)
        if n >= B:
            return self
        return self.take(np.linspace(0, B - 1, n).round().astype(int))

    def relabeled(self) -> "ChlrmDraws":
        """Per draw, reorder clusters by their first regression coefficient.

        Only needed for per-cluster summaries; co-clustering and kappa are label free.
        """
        order = np.argsort(self.beta_k[:, :, 0], axis=1, kind="stable")
        rank = np.argsort(order, axis=1)
        rows = np.arange(len(self))[:, None]
        out = self.take(slice(None))
        out.omega = self.omega[rows, order]
        out.beta_k = self.beta_k[rows, order]
        out.sigma2_k = self.sigma2_k[rows, order]
        out.gamma = rank[rows, self.gamma]
        return out

    def to_store(self):
        return "chlrm-draws", {f: getattr(self, f) for f in self._arrays}, dict(self.meta)

    @classmethod
    def from_store(cls, arrays, meta):
        arrays = dict(arrays)
        arrays["gamma"] = arrays["gamma"].astype(np.int64)
        return cls(**arrays, meta=dict(meta))


def _group_estimates(data: GroupedDataset, prior: ChlrmPrior) -> np.ndarray:
    """Per-group coefficient estimates shrunk lightly toward mu0 (defined for any n_j)."""
    s2 = prior.b0 ** -1
    P = prior.Lambda0_inv[None] + data.XtX / s2
    h = (prior.Lambda0_inv @ prior.mu0)[None] + data.Xty / s2
    return np.linalg.solve(P, h[..., None])[..., 0]


def _initial_partition(data: GroupedDataset, prior: ChlrmPrior, K: int, rng) -> np.ndarray:
    est = _group_estimates(data, prior)
    k = min(K, data.m)
    if k == 1:
        return np.zeros(data.m, dtype=int)
    _, labels = kmeans2(est, k, minit="++", seed=rng)
    return labels.astype(int)


def chlrm_log_joint(data: GroupedDataset, prior: ChlrmPrior, gamma, log_omega, beta_k, sigma2_k,
                    beta, Sigma, xi2) -> float:
    K, p = beta_k.shape
    Z = np.zeros((data.m, K))
    Z[np.arange(data.m), gamma] = 1.0
    rss = (Z * _expected_rss(data, beta_k)).sum(axis=0)
    Nk = Z.T @ data.n
    ll = float(np.sum(-0.5 * Nk * (LOG_2PI + np.log(sigma2_k)) - 0.5 * rss / sigma2_k))
    lp = float(log_omega[gamma].sum())
    a0 = prior.alpha0
    lp += gammaln(a0.sum()) - gammaln(a0).sum() + np.sum((a0 - 1) * log_omega)
    Sinv = spd_inverse(Sigma, "Sigma")
    d = beta_k - beta
    lp += -0.5 * K * (p * LOG_2PI + logdet_spd(Sigma)) - 0.5 * np.einsum("kp,pq,kq->", d, Sinv, d)
    h = 0.5 * prior.nu0
    lp += np.sum(h * np.log(h * xi2) - gammaln(h) - (h + 1) * np.log(sigma2_k) - h * xi2 / sigma2_k)
    d0 = beta - prior.mu0
    lp += -0.5 * (p * LOG_2PI + logdet_spd(prior.Lambda0)) - 0.5 * d0 @ prior.Lambda0_inv @ d0
    n0 = prior.n0
    lp += (0.5 * n0 * logdet_spd(prior.S0) - 0.5 * n0 * p * np.log(2.0) - multigammaln(0.5 * n0, p)
           - 0.5 * (n0 + p + 1) * logdet_spd(Sigma) - 0.5 * np.sum(prior.S0 * Sinv))
    lp += prior.a0 * np.log(prior.b0) - gammaln(prior.a0) + (prior.a0 - 1) * np.log(xi2) - prior.b0 * xi2
    return ll + float(lp)


def chlrm_gibbs(data: GroupedDataset, prior: ChlrmPrior, n_samples: int = 11000,
                burn_in: int | None = None, thin: int = 1, seed: int = 0,
                trace: bool = True) -> ChlrmDraws:
    """Gibbs sampler over (gamma, omega, beta_k, sigma_k^2, beta, Sigma, xi^2).

    ``n_samples`` counts all iterations; draws after ``burn_in`` are kept every ``thin``.
    beta, Sigma and xi^2 are updated from the nonempty clusters only, with the empty
    clusters' parameters integrated out; those are then refreshed from their prior
    conditionals at the end of the sweep.
    """
    burn_in = n_samples // 10 if burn_in is None else burn_in
    if not n_samples > burn_in >= 0 or thin < 1:
        raise ValueError("need n_samples > burn_in >= 0 and thin >= 1")
    K, p, m = prior.K, data.p, data.m
    rng = make_rng(seed)
    nu0, n0 = prior.nu0, prior.n0
    L0_inv, L0_lin = prior.Lambda0_inv, prior.Lambda0_inv @ prior.mu0

    # initial state: k-means on per-group estimates, cluster values from the partition
    gamma = _initial_partition(data, prior, K, rng)
    est = _group_estimates(data, prior)
    beta = prior.mu0.copy()
    Sigma = prior.S0 / (n0 + p + 1)
    xi2 = prior.a0 / prior.b0
    beta_k = beta + rng.standard_normal((K, p)) @ cholesky(Sigma, "Sigma").T
    for k in np.unique(gamma):
        beta_k[k] = est[gamma == k].mean(axis=0)
    sigma2_k = np.full(K, xi2)
    log_omega = np.full(K, -np.log(K))

    n_keep = len(range(burn_in, n_samples, thin))
    out = {
        "gamma": np.empty((n_keep, m), dtype=np.int64), "omega": np.empty((n_keep, K)),
        "beta_k": np.empty((n_keep, K, p)), "sigma2_k": np.empty((n_keep, K)),
        "beta": np.empty((n_keep, p)), "Sigma": np.empty((n_keep, p, p)), "xi2": np.empty(n_keep),
    }
    lj = np.empty(n_samples if trace else 0)
    rows = np.arange(m)
    t0 = time.perf_counter()
    keep = 0
    for it in range(n_samples):
        # gamma_j | rest
        rss = _expected_rss(data, beta_k)
        logw = log_omega - 0.5 * np.outer(data.n, np.log(sigma2_k)) - 0.5 * rss / sigma2_k
        u = rng.uniform(size=(m, 1))
        w = np.exp(logw - logw.max(axis=1, keepdims=True))
        cdf = np.cumsum(w, axis=1)
        gamma = np.minimum((cdf <= u * cdf[:, -1:]).sum(axis=1), K - 1)
        Z = np.zeros((m, K))
        Z[rows, gamma] = 1.0
        counts = Z.sum(axis=0)
        nonempty = counts > 0
        kappa = int(nonempty.sum())

        # omega | gamma
        g = np.log(rng.gamma(prior.alpha0 + counts + 1.0)) + np.log(rng.uniform(size=K)) / (prior.alpha0 + counts)
        log_omega = g - logsumexp(g)

        # beta_k, sigma_k^2 | rest
        Sinv = spd_inverse(Sigma, "Sigma", jitter=True)
        XtX_k = np.einsum("jk,jpq->kpq", Z, data.XtX)
        Xty_k = Z.T @ data.Xty
        P = Sinv[None] + XtX_k / sigma2_k[:, None, None]
        h = (Sinv @ beta)[None] + Xty_k / sigma2_k[:, None]
        beta_k = _sample_gaussians(rng, P, h, "beta_k precision V_k^-1", it)
        rss_k = (Z * _expected_rss(data, beta_k)).sum(axis=0)
        Nk = Z.T @ data.n
        sigma2_k = 0.5 * (nu0 * xi2 + rss_k) / rng.gamma(0.5 * (nu0 + Nk))

        # beta, Sigma, xi^2 | nonempty clusters
        bk = beta_k[nonempty]
        Pb = L0_inv + kappa * Sinv
        beta = _sample_gaussians(rng, Pb[None], (L0_lin + Sinv @ bk.sum(axis=0))[None],
                                 "beta precision V_beta^-1", it)[0]
        d = bk - beta
        Sigma = invwishart_sample(rng, InvWishartParams(n0 + kappa, prior.S0 + d.T @ d))
        xi2 = rng.gamma(prior.a0 + 0.5 * kappa * nu0) / (prior.b0 + 0.5 * nu0 * np.sum(1.0 / sigma2_k[nonempty]))

        # empty clusters from their prior conditionals
        n_empty = K - kappa
        if n_empty:
            chol = cholesky(Sigma, "Sigma", jitter=True, iteration=it)
            beta_k[~nonempty] = beta + rng.standard_normal((n_empty, p)) @ chol.T
            sigma2_k[~nonempty] = 0.5 * nu0 * xi2 / rng.gamma(0.5 * nu0, size=n_empty)

        if trace:
            lj[it] = chlrm_log_joint(data, prior, gamma, log_omega, beta_k, sigma2_k, beta, Sigma, xi2)
        if it >= burn_in and (it - burn_in) % thin == 0:
            out["gamma"][keep] = gamma
            out["omega"][keep] = np.exp(log_omega)
            out["beta_k"][keep] = beta_k
            out["sigma2_k"][keep] = sigma2_k
            out["beta"][keep] = beta
            out["Sigma"][keep] = Sigma
            out["xi2"][keep] = xi2
            keep += 1
    meta = {"method": "mcmc", "seed": seed, "K": K, "n_samples": n_samples, "burn_in": burn_in,
            "thin": thin, "runtime_sec": time.perf_counter() - t0}
    return ChlrmDraws(**out, log_joint=lj, meta=meta)


# ---------------------------------------------------------------------------
# Variational state
# ---------------------------------------------------------------------------

@dataclass
class ChlrmVarState:
    """Mean-field factors. Gaussians are kept both as (P, h) and as (mu, Sigma)."""

    rho: np.ndarray          # m x K responsibilities
    alpha: np.ndarray        # K, q(omega) = Dir(alpha)
    P_k: np.ndarray          # K x p x p precision of q(beta_k)
    h_k: np.ndarray          # K x p, P_k @ mu_k
    a_k: np.ndarray          # K, q(sigma_k^2) = IG(a_k, b_k)
    b_k: np.ndarray
    P_beta: np.ndarray
    h_beta: np.ndarray
    nu_Sigma: float          # q(Sigma) = IW(nu_Sigma, S_Sigma)
    S_Sigma: np.ndarray
    a_xi: float              # q(xi^2) = G(a_xi, b_xi)
    b_xi: float
    mu_k: np.ndarray = None
    Sigma_k: np.ndarray = None
    mu_beta: np.ndarray = None
    Sigma_beta: np.ndarray = None
    elbo_trace: list = field(default_factory=list)
    converged: bool = False
    n_iter: int = 0
    runtime_sec: float = 0.0
    method: str = "vi"

    _arrays = ("rho", "alpha", "P_k", "h_k", "a_k", "b_k", "P_beta", "h_beta", "S_Sigma")

    def __post_init__(self):
        if self.mu_k is None:
            self.refresh_moments()

    @property
    def K(self) -> int:
        return self.alpha.size

    def refresh_moments(self):
        K = self.alpha.size
        self.mu_k = np.empty_like(self.h_k)
        self.Sigma_k = np.empty_like(self.P_k)
        for k in range(K):
            self.mu_k[k], self.Sigma_k[k] = gaussian_from_natural(self.P_k[k], self.h_k[k],
                                                                  f"q(beta_k) precision [{k}]")
        self.mu_beta, self.Sigma_beta = gaussian_from_natural(self.P_beta, self.h_beta, "q(beta) precision")

    def copy(self) -> "ChlrmVarState":
        kw = {}
        for f in fields(self):
            v = getattr(self, f.name)
            kw[f.name] = v.copy() if isinstance(v, (np.ndarray, list)) else v
        return ChlrmVarState(**kw)

    def to_store(self):
        arrays = {f: np.asarray(getattr(self, f), float) for f in self._arrays}
        arrays["elbo_trace"] = np.asarray(self.elbo_trace, float)
        meta = {"nu_Sigma": self.nu_Sigma, "a_xi": self.a_xi, "b_xi": self.b_xi,
                "converged": self.converged, "n_iter": self.n_iter,
                "runtime_sec": self.runtime_sec, "method": self.method}
        return "chlrm-state", arrays, meta

    @classmethod
    def from_store(cls, arrays, meta):
        kw = {f: arrays[f] for f in cls._arrays}
        return cls(**kw, nu_Sigma=meta["nu_Sigma"], a_xi=meta["a_xi"], b_xi=meta["b_xi"],
                   elbo_trace=arrays["elbo_trace"].tolist(), converged=meta["converged"],
                   n_iter=meta["n_iter"], runtime_sec=meta["runtime_sec"], method=meta["method"])


@dataclass
class _Expect:
    e_log_omega: np.ndarray
    e_inv_s: np.ndarray
    e_log_s: np.ndarray
    e_Sinv: np.ndarray
    e_logdet_S: float
    e_xi: float
    e_log_xi: float


def _expectations(st: ChlrmVarState) -> _Expect:
    iw = InvWishartParams(st.nu_Sigma, st.S_Sigma)
    return _Expect(
        e_log_omega=digamma(st.alpha) - digamma(st.alpha.sum()),
        e_inv_s=st.a_k / st.b_k,
        e_log_s=np.log(st.b_k) - digamma(st.a_k),
        e_Sinv=st.nu_Sigma * spd_inverse(st.S_Sigma, "q(Sigma) scale"),
        e_logdet_S=invwishart_elogdet(iw),
        e_xi=st.a_xi / st.b_xi,
        e_log_xi=float(digamma(st.a_xi) - np.log(st.b_xi)),
    )


# ---------------------------------------------------------------------------
# Local and global updates
# ---------------------------------------------------------------------------

def _local_log_rho(st: ChlrmVarState, data: GroupedDataset, rows=None) -> np.ndarray:
    e = _expectations(st)
    erss = _expected_rss(data, st.mu_k, st.Sigma_k)
    n = data.n
    if rows is not None:
        erss, n = erss[rows], n[rows]
    return e.e_log_omega - 0.5 * np.outer(n, e.e_log_s) - 0.5 * erss * e.e_inv_s


def update_local(st: ChlrmVarState, data: GroupedDataset, rows=None) -> None:
    """Set q(gamma_j) for ``rows`` (all groups by default), normalised in log space."""
    lr = _local_log_rho(st, data, rows)
    rho = np.exp(lr - logsumexp(lr, axis=1, keepdims=True))
    if rows is None:
        st.rho = rho
    else:
        st.rho[rows] = rho


# Each _nat_* returns the (intermediate) natural parameters of one global factor given
# the current state and the weighted responsibilities r_jk = c_j rho_jk.

def _nat_omega(st, data, prior, r):
    return prior.alpha0 + r.sum(axis=0)


def _nat_beta_k(st, data, prior, r):
    e = _expectations(st)
    P = e.e_Sinv[None] + e.e_inv_s[:, None, None] * np.einsum("jk,jpq->kpq", r, data.XtX)
    h = (e.e_Sinv @ st.mu_beta)[None] + e.e_inv_s[:, None] * (r.T @ data.Xty)
    return P, h


def _nat_sigma_k(st, data, prior, r):
    e = _expectations(st)
    a = 0.5 * (prior.nu0 + r.T @ data.n)
    b = 0.5 * (prior.nu0 * e.e_xi + (r * _expected_rss(data, st.mu_k, st.Sigma_k)).sum(axis=0))
    return a, b


def _nat_beta(st, data, prior, r):
    e = _expectations(st)
    K = st.K
    P = prior.Lambda0_inv + K * e.e_Sinv
    h = prior.Lambda0_inv @ prior.mu0 + e.e_Sinv @ st.mu_k.sum(axis=0)
    return P, h


def _nat_Sigma(st, data, prior, r):
    d = st.mu_k - st.mu_beta
    return prior.S0 + d.T @ d + st.Sigma_k.sum(axis=0) + st.K * st.Sigma_beta


def _nat_xi(st, data, prior, r):
    return prior.b0 + 0.5 * prior.nu0 * np.sum(st.a_k / st.b_k)


def _blend(old, new, step):
    return (1.0 - step) * old + step * new


def global_sweep(st: ChlrmVarState, data: GroupedDataset, prior: ChlrmPrior, weights, step: float = 1.0) -> None:
    """Update the global factors in turn, each from the latest values of the others.

    ``weights`` scales each group's contribution (ones for CAVI, m/|S| on a minibatch for
    SVI). Every factor is blended with step ``step`` right after its intermediate value
    is formed; Gaussians blend in (precision, precision @ mean).
    """
    r = np.asarray(weights, float)[:, None] * st.rho
    st.alpha = _blend(st.alpha, _nat_omega(st, data, prior, r), step)

    P, h = _nat_beta_k(st, data, prior, r)
    st.P_k, st.h_k = _blend(st.P_k, P, step), _blend(st.h_k, h, step)
    for k in range(st.K):
        st.mu_k[k], st.Sigma_k[k] = gaussian_from_natural(st.P_k[k], st.h_k[k], f"q(beta_k) precision [{k}]")

    a, b = _nat_sigma_k(st, data, prior, r)
    st.a_k, st.b_k = _blend(st.a_k, a, step), _blend(st.b_k, b, step)

    P, h = _nat_beta(st, data, prior, r)
    st.P_beta, st.h_beta = _blend(st.P_beta, P, step), _blend(st.h_beta, h, step)
    st.mu_beta, st.Sigma_beta = gaussian_from_natural(st.P_beta, st.h_beta, "q(beta) precision")

    st.S_Sigma = _blend(st.S_Sigma, _nat_Sigma(st, data, prior, r), step)
    st.b_xi = _blend(st.b_xi, _nat_xi(st, data, prior, r), step)


def intermediate_globals(st: ChlrmVarState, data: GroupedDataset, prior: ChlrmPrior, weights) -> dict:
    """Intermediate natural parameters of every global factor, all formed from ``st``.

    Each entry is linear in the weighted responsibilities, so averaging over all
    equally likely minibatches with weights m/|S| recovers the full-data value.
    """
    r = np.asarray(weights, float)[:, None] * st.rho
    P_k, h_k = _nat_beta_k(st, data, prior, r)
    a_k, b_k = _nat_sigma_k(st, data, prior, r)
    P_beta, h_beta = _nat_beta(st, data, prior, r)
    return {"alpha": _nat_omega(st, data, prior, r), "P_k": P_k, "h_k": h_k, "a_k": a_k, "b_k": b_k,
            "P_beta": P_beta, "h_beta": h_beta, "S_Sigma": _nat_Sigma(st, data, prior, r),
            "b_xi": np.float64(_nat_xi(st, data, prior, r))}


def chlrm_init_state(data: GroupedDataset, prior: ChlrmPrior, rng) -> ChlrmVarState:
    """Random Dir(1,...,1) responsibilities, placeholder globals, then one global sweep."""
    K, p, m = prior.K, prior.p, data.m
    rho = rng.dirichlet(np.ones(K), size=m)
    s2 = prior.b0 ** -1
    P0 = spd_inverse(prior.Lambda0, "Lambda0")
    nu = prior.n0 + K
    a_k = np.full(K, 0.5 * (prior.nu0 + data.N / K))
    a_xi = prior.a0 + 0.5 * K * prior.nu0
    st = ChlrmVarState(
        rho=rho, alpha=prior.alpha0 + rho.sum(axis=0),
        P_k=np.repeat(P0[None], K, axis=0), h_k=np.repeat((P0 @ prior.mu0)[None], K, axis=0),
        a_k=a_k, b_k=a_k * s2, P_beta=P0.copy(), h_beta=P0 @ prior.mu0,
        nu_Sigma=nu, S_Sigma=(nu - p - 1) * prior.Lambda0, a_xi=a_xi, b_xi=a_xi / s2,
    )
    global_sweep(st, data, prior, np.ones(m))
    return st


def cavi_step(st: ChlrmVarState, data: GroupedDataset, prior: ChlrmPrior) -> None:
    update_local(st, data)
    global_sweep(st, data, prior, np.ones(data.m))


# ---------------------------------------------------------------------------
# ELBO
# ---------------------------------------------------------------------------

def elbo_terms(st: ChlrmVarState, data: GroupedDataset, prior: ChlrmPrior) -> dict:
    """The ELBO split into its likelihood, gamma, omega, beta_k, beta, Sigma, sigma_k^2 and xi^2 parts."""
    e = _expectations(st)
    K, p = st.K, prior.p
    rho = st.rho
    erss = _expected_rss(data, st.mu_k, st.Sigma_k)
    lik = np.sum(rho * (-0.5 * np.outer(data.n, LOG_2PI + e.e_log_s) - 0.5 * erss * e.e_inv_s))

    with np.errstate(divide="ignore", invalid="ignore"):
        rlogr = np.where(rho > 0, rho * np.log(rho), 0.0)
    t_gamma = np.sum(rho * e.e_log_omega) - rlogr.sum()

    a0 = prior.alpha0
    t_omega = (gammaln(a0.sum()) - gammaln(a0).sum() + np.sum((a0 - 1) * e.e_log_omega)
               - dirichlet_neg_entropy(DirichletParams(st.alpha)))

    d = st.mu_k - st.mu_beta
    quad = np.einsum("kp,pq,kq->", d, e.e_Sinv, d) + np.sum(e.e_Sinv * (st.Sigma_k.sum(axis=0) + K * st.Sigma_beta))
    t_beta_k = -0.5 * K * (p * LOG_2PI + e.e_logdet_S) - 0.5 * quad
    t_beta_k -= sum(mvn_neg_entropy(st.Sigma_k[k]) for k in range(K))

    d0 = st.mu_beta - prior.mu0
    t_beta = (-0.5 * (p * LOG_2PI + logdet_spd(prior.Lambda0))
              - 0.5 * (d0 @ prior.Lambda0_inv @ d0 + np.sum(prior.Lambda0_inv * st.Sigma_beta))
              - mvn_neg_entropy(st.Sigma_beta))

    n0 = prior.n0
    t_Sigma = (0.5 * n0 * logdet_spd(prior.S0) - 0.5 * n0 * p * np.log(2.0) - multigammaln(0.5 * n0, p)
               - 0.5 * (n0 + p + 1) * e.e_logdet_S - 0.5 * np.sum(prior.S0 * e.e_Sinv)
               - invwishart_neg_entropy(InvWishartParams(st.nu_Sigma, st.S_Sigma)))

    h = 0.5 * prior.nu0
    t_sigma = np.sum(h * (np.log(h) + e.e_log_xi) - gammaln(h) - (h + 1) * e.e_log_s - h * e.e_xi * e.e_inv_s)
    t_sigma -= sum(invgamma_neg_entropy(InvGammaParams(st.a_k[k], st.b_k[k])) for k in range(K))

    t_xi = (prior.a0 * np.log(prior.b0) - gammaln(prior.a0) + (prior.a0 - 1) * e.e_log_xi - prior.b0 * e.e_xi
            - gamma_neg_entropy(GammaParams(st.a_xi, st.b_xi)))
    return {"likelihood": float(lik), "gamma": float(t_gamma), "omega": float(t_omega),
            "beta_k": float(t_beta_k), "beta": float(t_beta), "Sigma": float(t_Sigma),
            "sigma2_k": float(t_sigma), "xi2": float(t_xi)}


def chlrm_elbo(st: ChlrmVarState, data: GroupedDataset, prior: ChlrmPrior) -> float:
    return float(sum(elbo_terms(st, data, prior).values()))


# ---------------------------------------------------------------------------
# CAVI and SVI drivers
# ---------------------------------------------------------------------------

def _run_cavi(st, data, prior, max_iter, rel_tol, monotone_tol):
    prev = chlrm_elbo(st, data, prior)
    st.elbo_trace = [prev]
    for it in range(1, max_iter + 1):
        cavi_step(st, data, prior)
        elbo = chlrm_elbo(st, data, prior)
        st.elbo_trace.append(elbo)
        st.n_iter = it
        if elbo < prev - monotone_tol * abs(prev):
            raise ElboDecreaseError(f"ELBO decreased from {prev!r} to {elbo!r} at iteration {it}")
        if abs(elbo - prev) <= rel_tol * abs(prev):
            st.converged = True
            break
        prev = elbo
    return st


def chlrm_cavi(data: GroupedDataset, prior: ChlrmPrior, max_iter: int = 1000, rel_tol: float = 1e-9,
               restarts: int = 5, seed: int = 0, init: ChlrmVarState | None = None,
               monotone_tol: float = 1e-8) -> ChlrmVarState:
    """CAVI from ``restarts`` seeded random starts; the run with the highest final ELBO is returned.

    The first trace entry is the ELBO of the initial state (after one global sweep).
    """
    t0 = time.perf_counter()
    if init is not None:
        starts = [init.copy()]
    else:
        starts = [chlrm_init_state(data, prior, r) for r in spawn_rngs(seed, max(restarts, 1))]
    best = None
    for i, st in enumerate(starts):
        _run_cavi(st, data, prior, max_iter, rel_tol, monotone_tol)
        log.debug("restart %d: ELBO %.6f after %d iterations", i, st.elbo_trace[-1], st.n_iter)
        if best is None or st.elbo_trace[-1] > best.elbo_trace[-1]:
            best = st
    best.runtime_sec = time.perf_counter() - t0
    best.method = "vi"
    return best


@dataclass
class SviConfig:
    minibatch: int
    tau: float = 1.0
    chi: float = 0.7
    iters: int = 100
    seed: int = 0

    def validate(self, m: int) -> None:
        if not 1 <= self.minibatch <= m:
            raise ValueError(f"minibatch must lie in 1..{m}, got {self.minibatch}")
        if not 0.5 < self.chi <= 1.0:
            raise ValueError(f"chi must lie in (0.5, 1], got {self.chi}")
        if self.tau < 0:
            raise ValueError(f"tau must be nonnegative, got {self.tau}")
        if self.iters < 1:
            raise ValueError("iters must be positive")

    def step_size(self, t: int) -> float:
        """Robbins-Monro step for iteration t = 1, 2, ..."""
        return float((t + self.tau) ** -self.chi)


def svi_step(st: ChlrmVarState, data: GroupedDataset, prior: ChlrmPrior, batch, step: float) -> None:
    """Local update on ``batch``, then globals blended toward the rescaled minibatch update."""
    batch = np.asarray(batch)
    update_local(st, data, batch)
    w = np.zeros(data.m)
    w[batch] = data.m / batch.size
    global_sweep(st, data, prior, w, step)


def chlrm_svi(data: GroupedDataset, prior: ChlrmPrior, cfg: SviConfig, restarts: int = 1,
              init: ChlrmVarState | None = None) -> ChlrmVarState:
    cfg.validate(data.m)
    t0 = time.perf_counter()
    rngs = spawn_rngs(cfg.seed, 2 * max(restarts, 1))
    best = None
    for i in range(max(restarts, 1)):
        init_rng, batch_rng = rngs[2 * i], rngs[2 * i + 1]
        st = init.copy() if init is not None else chlrm_init_state(data, prior, init_rng)
        st.elbo_trace = [chlrm_elbo(st, data, prior)]
        for t in range(1, cfg.iters + 1):
            batch = batch_rng.choice(data.m, size=cfg.minibatch, replace=False)
            svi_step(st, data, prior, batch, cfg.step_size(t))
            st.elbo_trace.append(chlrm_elbo(st, data, prior))
        st.n_iter = cfg.iters
        if best is None or st.elbo_trace[-1] > best.elbo_trace[-1]:
            best = st
        if init is not None:
            break
    best.runtime_sec = time.perf_counter() - t0
    best.method = "svi"
    return best


# ---------------------------------------------------------------------------
# Sampling from q and predictive helpers
# ---------------------------------------------------------------------------

def chlrm_sample_variational(st: ChlrmVarState, n_draws: int = 1000, seed: int = 0) -> ChlrmDraws:
    rng = make_rng(seed)
    K, p = st.K, st.mu_k.shape[1]
    m = st.rho.shape[0]
    cdf = np.cumsum(st.rho, axis=1)
    u = rng.uniform(size=(n_draws, m, 1)) * cdf[None, :, -1:]
    gamma = np.minimum((cdf[None] <= u).sum(axis=2), K - 1).astype(np.int64)
    omega = rng.dirichlet(st.alpha, size=n_draws)
    beta_k = np.empty((n_draws, K, p))
    for k in range(K):
        L = cholesky(st.Sigma_k[k], f"q(beta_k) covariance [{k}]")
        beta_k[:, k] = st.mu_k[k] + rng.standard_normal((n_draws, p)) @ L.T
    sigma2_k = st.b_k / rng.gamma(st.a_k, size=(n_draws, K))
    L = cholesky(st.Sigma_beta, "q(beta) covariance")
    beta = st.mu_beta + rng.standard_normal((n_draws, p)) @ L.T
    iw = InvWishartParams(st.nu_Sigma, st.S_Sigma)
    Sigma = np.stack([invwishart_sample(rng, iw) for _ in range(n_draws)])
    xi2 = rng.gamma(st.a_xi, 1.0 / st.b_xi, size=n_draws)
    meta = {"method": st.method, "seed": seed, "K": K, "n_draws": n_draws}
    return ChlrmDraws(gamma, omega, beta_k, sigma2_k, beta, Sigma, xi2, meta=meta)


def _per_obs(draws: ChlrmDraws, data: GroupedDataset):
    """B x N x p coefficients and B x N variances seen by each observation."""
    gi = data.group_index
    rows = np.arange(len(draws))[:, None]
    labels = draws.gamma[:, gi]
    return draws.beta_k[rows, labels], draws.sigma2_k[rows, labels]


def pointwise_loglik(draws: ChlrmDraws, data: GroupedDataset) -> np.ndarray:
    """B x N log-likelihood conditional on each draw's group assignments."""
    b, s2 = _per_obs(draws, data)
    mean = np.einsum("bnp,np->bn", b, data.X)
    return -0.5 * (LOG_2PI + np.log(s2)) - 0.5 * (data.y[None] - mean) ** 2 / s2


def group_posterior_means(draws: ChlrmDraws) -> tuple[np.ndarray, np.ndarray]:
    """Per-group posterior means of beta_{gamma_j} and sigma^2_{gamma_j} (label free)."""
    rows = np.arange(len(draws))[:, None]
    return draws.beta_k[rows, draws.gamma].mean(axis=0), draws.sigma2_k[rows, draws.gamma].mean(axis=0)


def loglik_at_mean(draws: ChlrmDraws, data: GroupedDataset) -> np.ndarray:
    beta_g, s2_g = group_posterior_means(draws)
    gi = data.group_index
    mean = np.einsum("np,np->n", data.X, beta_g[gi])
    return -0.5 * (LOG_2PI + np.log(s2_g[gi])) - 0.5 * (data.y - mean) ** 2 / s2_g[gi]


def predictive_mean(draws: ChlrmDraws, data: GroupedDataset) -> np.ndarray:
    beta_g, _ = group_posterior_means(draws)
    return np.einsum("np,np->n", data.X, beta_g[data.group_index])


def replicate(draws: ChlrmDraws, data: GroupedDataset, rng: np.random.Generator, b: int) -> np.ndarray:
    gi = data.group_index
    k = draws.gamma[b, gi]
    mean = np.einsum("np,np->n", data.X, draws.beta_k[b, k])
    return mean + np.sqrt(draws.sigma2_k[b, k]) * rng.standard_normal(data.N)


def hard_partition(st: ChlrmVarState) -> np.ndarray:
    return np.argmax(st.rho, axis=1)
