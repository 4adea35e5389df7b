"""Classical baselines: linear autoregressive innovation energy and a full-covariance GMM fitted by EM."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve, solve_triangular
from scipy.special import logsumexp

from .data import FrameSequence, rng_for
from .errors import InvalidArgument

RIDGE = 1e-8
LOG_2PI = math.log(2.0 * math.pi)


def _values(rec) -> np.ndarray:
    return rec.values if isinstance(rec, FrameSequence) else np.asarray(rec, dtype=np.float64)


# ---------------------------------------------------------------------------
# linear AR predictor


def lagged(values: np.ndarray, L: int):
    """Regressors X(t) = [x(t), x(t-1), ..., x(t-L+1)] and targets x(t+1)."""
    t_len, p = values.shape
    n = t_len - L
    if n < 1:
        return np.empty((0, L * p)), np.empty((0, p))
    cols = [values[L - 1 - k : L - 1 - k + n] for k in range(L)]
    return np.concatenate(cols, axis=1), values[L:]


@dataclass
class LinearAR:
    W: np.ndarray
    L: int
    ridge_used: bool = False

    def innovations(self, rec) -> np.ndarray:
        x, y = lagged(_values(rec), self.L)
        if x.shape[0] == 0:
            raise InvalidArgument(f"recording too short for context {self.L}")
        return y - x @ self.W

    def score(self, rec) -> float:
        """Mean squared innovation energy over the recording."""
        e = self.innovations(rec)
        return float(np.mean(np.sum(e * e, axis=1)))


def linear_ar_baseline(train, L: int, P: int | None = None) -> LinearAR:
    """Least-squares fit of W minimizing sum ||x(t+1) - W^T X(t)||^2.

    Falls back to normal equations with a 1e-8 ridge when the regressors are
    rank deficient.
    """
    if L < 1:
        raise InvalidArgument("context L must be >= 1")
    xs, ys = [], []
    for rec in train:
        v = _values(rec)
        if P is not None and v.shape[1] != P:
            raise InvalidArgument(f"recording has {v.shape[1]} dimensions, expected {P}")
        x, y = lagged(v, L)
        xs.append(x)
        ys.append(y)
    x = np.concatenate(xs) if xs else np.empty((0, 0))
    y = np.concatenate(ys) if ys else np.empty((0, 0))
    if x.shape[0] == 0:
        raise InvalidArgument("not enough frames to form a single regression pair")
    rank = np.linalg.matrix_rank(x)
    if rank == x.shape[1]:
        W = np.linalg.lstsq(x, y, rcond=None)[0]
        return LinearAR(W, L, False)
    warnings.warn(
        f"AR regressors are rank deficient (rank {rank} < {x.shape[1]}); solving with ridge {RIDGE:g}",
        RuntimeWarning,
        stacklevel=2,
    )
    gram = x.T @ x + RIDGE * np.eye(x.shape[1])
    W = cho_solve(cho_factor(gram), x.T @ y)
    return LinearAR(W, L, True)


# ---------------------------------------------------------------------------
# Gaussian mixture, full covariance, EM


@dataclass
class GMM:
    weights: np.ndarray
    means: np.ndarray
    covariances: np.ndarray
    log_likelihood: list = field(default_factory=list)
    n_iter: int = 0
    converged: bool = False
    n_reseeded: int = 0

    @property
    def n_components(self) -> int:
        return self.weights.size

    def component_logpdf(self, x) -> np.ndarray:
        """log(w_k N(x | mean_k, cov_k)) for every frame and component, shape (n, c)."""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        out = np.empty((x.shape[0], self.n_components))
        for k in range(self.n_components):
            chol = np.linalg.cholesky(self.covariances[k])
            z = solve_triangular(chol, (x - self.means[k]).T, lower=True)
            half_logdet = np.sum(np.log(np.diag(chol)))
            out[:, k] = (
                math.log(self.weights[k]) - 0.5 * np.sum(z * z, axis=0) - half_logdet - 0.5 * x.shape[1] * LOG_2PI
            )
        return out

    def logpdf(self, x) -> np.ndarray:
        return logsumexp(self.component_logpdf(x), axis=1)

    def total_log_likelihood(self, x) -> float:
        return float(np.sum(self.logpdf(x)))

    def score(self, rec) -> float:
        """Mean NLL of the recording's frames."""
        return float(-np.mean(self.logpdf(_values(rec))))


def kmeans_pp(x: np.ndarray, c: int, rng: np.random.Generator) -> np.ndarray:
    """Seed c centres by D^2 sampling."""
    n = x.shape[0]
    centres = [x[rng.integers(n)]]
    d2 = np.sum((x - centres[0]) ** 2, axis=1)
    for _ in range(1, c):
        total = d2.sum()
        idx = rng.integers(n) if total <= 0 else rng.choice(n, p=d2 / total)
        centres.append(x[idx])
        d2 = np.minimum(d2, np.sum((x - x[idx]) ** 2, axis=1))
    return np.array(centres)


def _collapsed(cov: np.ndarray) -> bool:
    sign, logdet = np.linalg.slogdet(cov)
    return sign <= 0 or not np.isfinite(logdet) or logdet < math.log(1e-300)


def gmm_em(frames, c: int = 10, seed: int = 0, tol: float = 1e-6, max_iter: int = 200) -> GMM:
    """Fit a full-covariance GMM by EM.

    Initial means come from k-means++ seeding, covariances start at the
    pooled data covariance and weights are uniform. Iterates until the
    relative change in total log-likelihood drops below ``tol`` or
    ``max_iter`` E-steps have run. ``log_likelihood[i]`` is the total
    log-likelihood of the parameters entering iteration i. A component whose
    covariance determinant falls below 1e-300 is re-seeded at a random frame
    with the pooled covariance.
    """
    if isinstance(frames, (list, tuple)):
        x = np.concatenate([_values(r) for r in frames])
    else:
        x = np.asarray(frames, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 1:
        raise InvalidArgument("frames must be an (n, P) matrix")
    if c < 1:
        raise InvalidArgument("c must be >= 1")
    n, p = x.shape
    if n <= c * p:
        raise InvalidArgument(f"need more than c * P = {c * p} frames, got {n}")
    rng = rng_for(seed, "gmm")
    pooled = np.atleast_2d(np.cov(x, rowvar=False, bias=True))
    if _collapsed(pooled):
        raise InvalidArgument("training frames are degenerate (singular covariance)")
    model = GMM(np.full(c, 1.0 / c), kmeans_pp(x, c, rng), np.repeat(pooled[None], c, axis=0))
    prev = None
    for it in range(max_iter):
        log_joint = model.component_logpdf(x)
        log_norm = logsumexp(log_joint, axis=1)
        ll = float(np.sum(log_norm))
        model.log_likelihood.append(ll)
        model.n_iter = it + 1
        if prev is not None and abs(ll - prev) <= tol * abs(prev):
            model.converged = True
            break
        prev = ll
        resp = np.exp(log_joint - log_norm[:, None])
        nk = resp.sum(axis=0)
        means = (resp.T @ x) / np.maximum(nk, np.finfo(float).tiny)[:, None]
        covs = np.empty((c, p, p))
        for k in range(c):
            d = x - means[k]
            covs[k] = (resp[:, k, None] * d).T @ d / max(nk[k], np.finfo(float).tiny)
            covs[k] = 0.5 * (covs[k] + covs[k].T)
        weights = nk / n
        for k in range(c):
            if nk[k] <= 0 or _collapsed(covs[k]):
                means[k] = x[rng.integers(n)]
                covs[k] = pooled
                weights[k] = 1.0 / c
                model.n_reseeded += 1
        model.weights = weights / weights.sum()
        model.means = means
        model.covariances = covs
    return model
