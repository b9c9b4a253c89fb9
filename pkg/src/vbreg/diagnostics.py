"""Model comparison and adequacy checks computed from posterior (or variational) draws."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np
from scipy.special import logsumexp

from . import chlrm, lrm
from .data import GroupedDataset


def _check_ll(ll) -> np.ndarray:
    ll = np.asarray(ll, float)
    if ll.ndim != 2:
        raise ValueError("log-likelihood matrix must be B x N")
    if ll.shape[0] < 2:
        raise ValueError(f"need at least 2 draws, got {ll.shape[0]}")
    if not np.all(np.isfinite(ll)):
        raise ValueError("log-likelihood matrix has non-finite entries")
    return ll


def lppd(ll) -> float:
    ll = _check_ll(ll)
    return float(np.sum(logsumexp(ll, axis=0) - np.log(ll.shape[0])))


def waic(ll, return_parts: bool = False):
    """-2 (lppd - p_waic) with p_waic the summed per-observation sample variance."""
    ll = _check_ll(ll)
    l = lppd(ll)
    p = float(np.sum(np.var(ll, axis=0, ddof=1)))
    w = -2.0 * (l - p)
    return (w, l, p) if return_parts else w


def dic(ll, ll_at_mean, return_parts: bool = False):
    ll = _check_ll(ll)
    ll_at_mean = np.asarray(ll_at_mean, float)
    if ll_at_mean.shape != (ll.shape[1],):
        raise ValueError(f"ll_at_mean has shape {ll_at_mean.shape}, expected ({ll.shape[1]},)")
    d_bar = -2.0 * float(np.mean(ll.sum(axis=1)))
    d_hat = -2.0 * float(ll_at_mean.sum())
    p = d_bar - d_hat
    val = d_hat + 2.0 * p
    return (val, p) if return_parts else val


def fit_metrics(y, yhat) -> tuple[float, float]:
    y, yhat = np.asarray(y, float), np.asarray(yhat, float)
    if y.shape != yhat.shape:
        raise ValueError(f"length mismatch: {y.shape} vs {yhat.shape}")
    sse = float(np.sum((y - yhat) ** 2))
    sst = float(np.sum((y - y.mean()) ** 2))
    return sse / y.size, 1.0 - sse / sst


# ---------------------------------------------------------------------------
# Posterior predictive p-values
# ---------------------------------------------------------------------------

def _iqr(y):
    q75, q25 = np.percentile(y, [75, 25])
    return q75 - q25


PPP_STATS: dict[str, Callable[[np.ndarray], float]] = {
    "min": np.min,
    "max": np.max,
    "iqr": _iqr,
    "mean": np.mean,
    "median": np.median,
    "sd": lambda y: np.std(y, ddof=1),
}

_REPLICATORS = {"lrm": lrm.replicate, "chlrm": chlrm.replicate}


def ppp(observed: GroupedDataset, draws, model_tag: str, stats: dict | None = None,
        reps: int = 1000, seed: int = 0) -> dict[str, float]:
    """Fraction of replicated datasets whose statistic is >= the observed one (ties count 1/2).

    Replicate r is drawn from posterior draw r mod B with its own RNG stream.
    """
    if model_tag not in _REPLICATORS:
        raise ValueError(f"unknown model tag {model_tag!r}; expected one of {sorted(_REPLICATORS)}")
    if reps < 100:
        raise ValueError(f"reps must be at least 100, got {reps}")
    stats = PPP_STATS if stats is None else stats
    rep = _REPLICATORS[model_tag]
    data = observed if model_tag == "chlrm" else lrm.as_regression(observed)
    y = observed.y
    t_obs = {k: f(y) for k, f in stats.items()}
    above = dict.fromkeys(stats, 0.0)
    B = len(draws)
    streams = np.random.SeedSequence(seed).spawn(reps)
    for r in range(reps):
        y_rep = rep(draws, data, np.random.Generator(np.random.PCG64(streams[r])), r % B)
        for k, f in stats.items():
            t = f(y_rep)
            above[k] += 1.0 if t > t_obs[k] else (0.5 if t == t_obs[k] else 0.0)
    return {k: v / reps for k, v in above.items()}


# ---------------------------------------------------------------------------
# Clustering summaries
# ---------------------------------------------------------------------------

def cocluster_matrix(assign) -> np.ndarray:
    """Co-clustering probabilities from a B x m integer draw matrix or an m x K float rho."""
    a = np.asarray(assign)
    if a.ndim != 2:
        raise ValueError("expected a 2-d array of assignment draws or responsibilities")
    if np.issubdtype(a.dtype, np.integer):
        B, m = a.shape
        out = np.zeros((m, m))
        for g in a:
            out += g[:, None] == g[None, :]
        out /= B
    else:
        if np.any(a < -1e-12) or not np.allclose(a.sum(axis=1), 1.0, atol=1e-8):
            raise ValueError("responsibility rows must be probability vectors")
        out = a @ a.T
    np.fill_diagonal(out, 1.0)
    return out


def k_posterior(assign_draws, K: int | None = None) -> np.ndarray:
    """Frequencies of kappa = number of nonempty clusters; entry i is P(kappa = i)."""
    a = np.asarray(assign_draws)
    kappa = np.array([np.unique(g).size for g in a])
    K = int(kappa.max()) if K is None else K
    return np.bincount(kappa, minlength=K + 1)[: K + 1] / kappa.size


def adjusted_rand_index(a, b) -> float:
    a, b = np.asarray(a), np.asarray(b)
    if a.shape != b.shape:
        raise ValueError("partitions must have equal length")
    _, ai = np.unique(a, return_inverse=True)
    _, bi = np.unique(b, return_inverse=True)
    table = np.zeros((ai.max() + 1, bi.max() + 1))
    np.add.at(table, (ai, bi), 1)

    def pairs(x):
        return np.sum(x * (x - 1) / 2.0)

    n = a.size
    s_ij = pairs(table)
    s_a, s_b = pairs(table.sum(axis=1)), pairs(table.sum(axis=0))
    expected = s_a * s_b / (n * (n - 1) / 2.0)
    top = 0.5 * (s_a + s_b)
    if top == expected:
        return 1.0
    return float((s_ij - expected) / (top - expected))


def point_partition(assign_draws) -> np.ndarray:
    """Least-squares partition: the draw closest to the co-clustering matrix."""
    a = np.asarray(assign_draws)
    pi = cocluster_matrix(a)
    loss = [np.sum(((g[:, None] == g[None, :]) - pi) ** 2) for g in a]
    return a[int(np.argmin(loss))].copy()


# ---------------------------------------------------------------------------
# Report
# ---------------------------------------------------------------------------

@dataclass
class FitReport:
    model: str
    method: str
    waic: float
    dic: float
    mse: float
    r2: float
    runtime_sec: float
    lppd: float = float("nan")
    p_waic: float = float("nan")
    p_dic: float = float("nan")
    n_draws: int = 0
    K: int | None = None
    elbo: float | None = None
    iterations: int | None = None
    dataset: str = ""
    settings: str = ""
    ppp: dict = field(default_factory=dict)
    k_posterior: list | None = None
    cocluster: np.ndarray | None = None

    def flat(self) -> dict:
        """Scalar-only record; ppp entries become ``ppp_<stat>`` keys."""
        d = asdict(self)
        d.pop("cocluster")
        kp = d.pop("k_posterior")
        for k, v in d.pop("ppp").items():
            d[f"ppp_{k}"] = v
        if kp is not None:
            for i, v in enumerate(kp):
                if v > 0:
                    d[f"kappa_{i}"] = v
        return d


def evaluate(model: str, draws, data: GroupedDataset, method: str, runtime_sec: float,
             n_draws: int = 1000, reps: int = 1000, seed: int = 0, **extra) -> FitReport:
    """All criteria from (at most) ``n_draws`` evenly spaced draws."""
    draws = draws.subsample(n_draws)
    mod = {"lrm": lrm, "chlrm": chlrm}.get(model)
    if mod is None:
        raise ValueError(f"unknown model {model!r}")
    d = lrm.as_regression(data) if model == "lrm" else data
    ll = mod.pointwise_loglik(draws, d)
    w, l, pw = waic(ll, return_parts=True)
    dc, pd = dic(ll, mod.loglik_at_mean(draws, d), return_parts=True)
    mse, r2 = fit_metrics(data.y, mod.predictive_mean(draws, d))
    rep = FitReport(model, method, w, dc, mse, r2, runtime_sec, lppd=l, p_waic=pw, p_dic=pd,
                    n_draws=len(draws), dataset=data.fingerprint(), **extra)
    if reps:
        rep.ppp = ppp(data, draws, model, reps=reps, seed=seed)
    if model == "chlrm":
        rep.K = draws.K
        rep.k_posterior = k_posterior(draws.gamma, draws.K).tolist()
        rep.cocluster = cocluster_matrix(draws.gamma)
    return rep
