"""Gaussian mixture prior over clean-patch features, fitted with EM, and the
reference-free quality score built on it.

All densities are handled in the log domain: at feature dimensions of a few
dozen the raw Gaussian normaliser under- or overflows double precision.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.linalg import LinAlgError, cholesky, solve_triangular
from scipy.special import logsumexp

from .encoder import UGDNet, encode_patches, heads_forward
from .pointcloud import PipelineConfig, PointCloud, extract_patches, patches_to_array
from .rng import derive_rng

LOG_2PI = math.log(2.0 * math.pi)


class PriorError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class GmmPrior:
    pi: np.ndarray
    mu: np.ndarray
    sigma: np.ndarray
    ridge: float = 1e-6
    covariance_type: str = "full"
    log_likelihood_trace: tuple = field(default=(), repr=False)
    converged: bool = True

    def __post_init__(self):
        pi = np.asarray(self.pi, dtype=np.float64)
        mu = np.atleast_2d(np.asarray(self.mu, dtype=np.float64))
        sigma = np.asarray(self.sigma, dtype=np.float64)
        if sigma.ndim == 2:
            sigma = sigma[None]
        K, d = mu.shape
        if pi.shape != (K,) or sigma.shape != (K, d, d):
            raise PriorError("inconsistent GMM parameter shapes")
        if (pi <= 0).any() or abs(pi.sum() - 1.0) > 1e-9:
            raise PriorError("mixing coefficients must be positive and sum to 1")
        if np.abs(sigma - sigma.transpose(0, 2, 1)).max() > 1e-9 * max(1.0, np.abs(sigma).max()):
            raise PriorError("covariances must be symmetric")
        chol = np.empty_like(sigma)
        for k in range(K):
            try:
                chol[k] = cholesky(sigma[k], lower=True)
            except LinAlgError:
                raise PriorError(f"covariance of component {k} is not positive definite") from None
        for name, val in (("pi", pi), ("mu", mu), ("sigma", sigma), ("chol", chol)):
            val.flags.writeable = False
            object.__setattr__(self, name, val)
        logdet = 2.0 * np.log(np.diagonal(chol, axis1=1, axis2=2)).sum(axis=1)
        object.__setattr__(self, "logdet", logdet)

    @property
    def K(self) -> int:
        return self.mu.shape[0]

    @property
    def d(self) -> int:
        return self.mu.shape[1]

    def component_log_density(self, features: np.ndarray) -> np.ndarray:
        """``log pi_k + log N(f | mu_k, Sigma_k)`` for every row, shape (n, K)."""
        X = np.atleast_2d(np.asarray(features, dtype=np.float64))
        if X.shape[1] != self.d:
            raise PriorError(f"feature dimension {X.shape[1]} != prior dimension {self.d}")
        out = np.empty((X.shape[0], self.K))
        for k in range(self.K):
            y = solve_triangular(self.chol[k], (X - self.mu[k]).T, lower=True, check_finite=False)
            maha2 = (y * y).sum(axis=0)
            out[:, k] = math.log(self.pi[k]) - 0.5 * maha2 - 0.5 * self.d * LOG_2PI - 0.5 * self.logdet[k]
        return out

    def log_scores(self, features: np.ndarray) -> np.ndarray:
        return logsumexp(self.component_log_density(features), axis=1)

    def to_record(self) -> dict:
        return {
            "K": self.K,
            "d": self.d,
            "pi": self.pi.tolist(),
            "mu": self.mu.tolist(),
            "sigma": self.sigma.tolist(),
            "ridge": self.ridge,
            "covariance_type": self.covariance_type,
            "converged": self.converged,
            "log_likelihood_trace": list(self.log_likelihood_trace),
        }

    @classmethod
    def from_record(cls, rec: dict) -> "GmmPrior":
        return cls(np.array(rec["pi"]), np.array(rec["mu"]), np.array(rec["sigma"]),
                   ridge=rec.get("ridge", 1e-6), covariance_type=rec.get("covariance_type", "full"),
                   log_likelihood_trace=tuple(rec.get("log_likelihood_trace", ())),
                   converged=rec.get("converged", True))


# ---------------------------------------------------------------------------
# EM


def kmeans_plus_plus(X: np.ndarray, K: int, rng: np.random.Generator) -> np.ndarray:
    """Indices of K seed rows chosen by k-means++ (D^2 sampling)."""
    S = X.shape[0]
    centers = [int(rng.integers(S))]
    d2 = ((X - X[centers[0]]) ** 2).sum(axis=1)
    for _ in range(1, K):
        total = d2.sum()
        if total > 0:
            nxt = int(rng.choice(S, p=d2 / total))
        else:
            nxt = int(rng.integers(S))
        centers.append(nxt)
        np.minimum(d2, ((X - X[nxt]) ** 2).sum(axis=1), out=d2)
    return np.asarray(centers)


def _m_step(X: np.ndarray, resp: np.ndarray, ridge: float, covariance_type: str):
    S, d = X.shape
    nk = resp.sum(axis=0) + 10 * np.finfo(np.float64).eps
    pi = nk / nk.sum()
    mu = (resp.T @ X) / nk[:, None]
    K = resp.shape[1]
    sigma = np.empty((K, d, d))
    for k in range(K):
        diff = X - mu[k]
        if covariance_type == "diag":
            cov = np.diag((resp[:, k] @ (diff * diff)) / nk[k])
        else:
            cov = (resp[:, k, None] * diff).T @ diff / nk[k]
            cov = 0.5 * (cov + cov.T)
        scale = np.trace(cov) / d
        cov[np.diag_indices(d)] += ridge * scale
        sigma[k] = cov
    return pi, mu, sigma


def _log_resp(X, pi, mu, sigma):
    """(per-sample log-likelihood, log responsibilities) or None if a
    covariance fails to factorise."""
    K, d = mu.shape
    logp = np.empty((X.shape[0], K))
    for k in range(K):
        try:
            L = cholesky(sigma[k], lower=True, check_finite=False)
        except LinAlgError:
            return None
        y = solve_triangular(L, (X - mu[k]).T, lower=True, check_finite=False)
        logdet = 2.0 * np.log(np.diag(L)).sum()
        logp[:, k] = math.log(pi[k]) - 0.5 * (y * y).sum(axis=0) - 0.5 * d * LOG_2PI - 0.5 * logdet
    ll = logsumexp(logp, axis=1)
    return ll, logp - ll[:, None]


def _em_run(X, K, tol, max_iter, ridge, covariance_type, rng):
    seeds = kmeans_plus_plus(X, K, rng)
    d2 = ((X[:, None, :] - X[seeds][None, :, :]) ** 2).sum(axis=2)
    resp = np.zeros((X.shape[0], K))
    resp[np.arange(X.shape[0]), d2.argmin(axis=1)] = 1.0
    pi, mu, sigma = _m_step(X, resp, ridge, covariance_type)
    trace = []
    converged = False
    for _ in range(max_iter):
        res = _log_resp(X, pi, mu, sigma)
        if res is None:
            raise PriorError("covariance lost positive definiteness despite ridge "
                             f"(ridge={ridge}, K={K}, d={X.shape[1]}, S={X.shape[0]})")
        ll, log_resp = res
        trace.append(float(ll.mean()))
        if len(trace) > 1 and abs(trace[-1] - trace[-2]) < tol * abs(trace[-2]):
            converged = True
            break
        pi, mu, sigma = _m_step(X, np.exp(log_resp), ridge, covariance_type)
    return pi, mu, sigma, trace, converged


def fit_gmm(features, K: int = 8, tol: float = 1e-6, max_iter: int = 300, restarts: int = 3,
            seed: int = 0, ridge: float = 1e-6, covariance_type: str = "full") -> GmmPrior:
    """Maximum-likelihood GMM by EM, best of ``restarts`` k-means++ starts.

    Every M-step covariance gets ``ridge * trace(cov) / d`` added to its
    diagonal.  The returned prior records the mean per-sample log-likelihood
    after every E-step of the winning run in ``log_likelihood_trace``.
    """
    X = np.atleast_2d(np.asarray(features, dtype=np.float64))
    S, d = X.shape
    if K < 1:
        raise PriorError("K must be >= 1")
    if S < K:
        raise PriorError(f"need at least K={K} samples, got {S}")
    if covariance_type not in ("full", "diag"):
        raise PriorError(f"unknown covariance_type {covariance_type!r}")
    best = None
    for r in range(max(1, restarts)):
        rng = derive_rng(seed, "gmm", r)
        run = _em_run(X, K, tol, max_iter, ridge, covariance_type, rng)
        if best is None or run[3][-1] > best[3][-1]:
            best = run
    pi, mu, sigma, trace, converged = best
    return GmmPrior(pi / pi.sum(), mu, sigma, ridge=ridge, covariance_type=covariance_type,
                    log_likelihood_trace=tuple(trace), converged=converged)


# ---------------------------------------------------------------------------
# scoring


def mahalanobis(f, mu, chol) -> float:
    """sqrt((f - mu)^T Sigma^{-1} (f - mu)) given the lower Cholesky factor."""
    f = np.asarray(f, dtype=np.float64)
    mu = np.asarray(mu, dtype=np.float64)
    if f.shape != mu.shape:
        raise PriorError("dimension mismatch")
    diag = np.diag(chol)
    if (diag == 0).any():
        raise PriorError("singular covariance factor")
    y = solve_triangular(chol, f - mu, lower=True)
    return float(math.sqrt((y * y).sum()))


def patch_score(f, prior: GmmPrior) -> float:
    """Log of the mixture density of feature ``f`` under ``prior``."""
    return float(prior.log_scores(np.asarray(f, dtype=np.float64)[None])[0])


@dataclass(frozen=True, eq=False)
class UGDResult:
    score: float
    log_scores: np.ndarray
    weights: np.ndarray
    mode: str


def ugd_details(cloud: PointCloud, net: UGDNet, prior: GmmPrior, cfg: PipelineConfig,
                mode: str = "log-density", seed: Optional[int] = None,
                weighting: str = "learned", normalize: bool = False) -> UGDResult:
    """Score a cloud against the prior; higher means better quality.

    ``mode="density"`` sums weighted mixture densities, ``"log-density"``
    sums weighted log-densities.  ``weighting="uniform"`` replaces the learned
    patch weights by 1/m.
    """
    if mode not in ("density", "log-density"):
        raise ValueError(f"unknown mode {mode!r}")
    if net.d != prior.d:
        raise PriorError(f"encoder feature dimension {net.d} != prior dimension {prior.d}")
    patches = extract_patches(cloud, cfg, seed=seed)
    feats = encode_patches(net, patches_to_array(patches), s=cfg.s)
    if weighting == "learned":
        w = np.atleast_1d(heads_forward(net, feats)["w"])
    elif weighting == "uniform":
        w = np.full(len(feats), 1.0 / len(feats))
    else:
        raise ValueError(f"unknown weighting {weighting!r}")
    if normalize:
        w = w / w.sum()
    ls = prior.log_scores(feats)
    if mode == "density":
        score = float(np.sum(w * np.exp(ls)))
    else:
        score = float(np.sum(w * ls))
    return UGDResult(score, ls, w, mode)


def ugd(cloud: PointCloud, net: UGDNet, prior: GmmPrior, cfg: PipelineConfig,
        mode: str = "log-density", seed: Optional[int] = None, **kw) -> float:
    return ugd_details(cloud, net, prior, cfg, mode, seed, **kw).score


def clean_features(clouds, net: UGDNet, cfg: PipelineConfig, seed: Optional[int] = None,
                   m: Optional[int] = None) -> np.ndarray:
    """Stacked patch features of (clean) clouds, used to fit the prior."""
    base = cfg.seed if seed is None else seed
    feats = []
    for i, cloud in enumerate(clouds):
        patches = extract_patches(cloud, cfg, seed=base + i, m=m)
        feats.append(encode_patches(net, patches_to_array(patches), s=cfg.s))
    return np.concatenate(feats)
