"""Log-densities of Gaussian and Student-t mixtures with analytic gradients.

Everything is computed in log space. A mixture component is described by its
location, the lower Cholesky factor ``L`` of its scale matrix
(``Sigma = L @ L.T``) and, for the Student-t family, the degrees of freedom.

Two parameterizations coexist:

* :class:`MixtureParams` holds constrained values (simplex weights, positive
  Cholesky diagonal, bounded degrees of freedom) for one prediction.
* :class:`RawMixture` holds the unconstrained head outputs for a batch of
  predictions. :func:`batch_logpdf_and_grad` differentiates the mixture
  log-density with respect to these raw values, which is what training needs.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.linalg import solve_triangular
from scipy.special import digamma, gammaln, logsumexp

from .errors import InvalidArgument, NumericalError

LOG_2PI = math.log(2.0 * math.pi)
NU_LO = 1.0
NU_HI = 10.0
# added to softplus(raw) so that log L_ii stays finite for very negative raw values
DIAG_FLOOR = 1e-6


class Family(str, enum.Enum):
    GAUSSIAN = "gaussian"
    STUDENT_T = "student_t"

    @classmethod
    def parse(cls, value) -> "Family":
        if isinstance(value, cls):
            return value
        key = str(value).strip().lower().replace("-", "_")
        aliases = {"gauss": "gaussian", "normal": "gaussian", "t": "student_t", "studentt": "student_t"}
        return cls(aliases.get(key, key))


@dataclass
class ComponentParams:
    mu: np.ndarray
    chol_lower: np.ndarray
    nu: float = math.inf

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=float).reshape(-1)
        self.chol_lower = np.atleast_2d(np.asarray(self.chol_lower, dtype=float))
        p = self.mu.shape[0]
        if self.chol_lower.shape != (p, p):
            raise InvalidArgument(
                f"chol_lower has shape {self.chol_lower.shape}, expected ({p}, {p})"
            )
        if not np.all(np.diag(self.chol_lower) > 0):
            raise InvalidArgument("Cholesky factor must have a strictly positive diagonal")
        self.chol_lower = np.tril(self.chol_lower)
        self.nu = float(self.nu)

    @property
    def dim(self) -> int:
        return self.mu.shape[0]

    @property
    def covariance(self) -> np.ndarray:
        return self.chol_lower @ self.chol_lower.T


@dataclass
class MixtureParams:
    alpha: np.ndarray
    components: list
    family: Family = Family.STUDENT_T

    def __post_init__(self):
        self.alpha = np.asarray(self.alpha, dtype=float).reshape(-1)
        self.family = Family.parse(self.family)
        if len(self.components) != self.alpha.shape[0]:
            raise InvalidArgument("alpha length must equal the number of components")
        if np.any(self.alpha < 0) or abs(self.alpha.sum() - 1.0) > 1e-12:
            raise InvalidArgument("alpha must lie on the probability simplex")
        dims = {comp.dim for comp in self.components}
        if len(dims) != 1:
            raise InvalidArgument("all components must share the same dimension")

    @property
    def dim(self) -> int:
        return self.components[0].dim

    @property
    def n_components(self) -> int:
        return len(self.components)


@dataclass(frozen=True)
class ContaminationSpec:
    """Fraction of contaminated frames and the variance of the added noise."""

    epsilon: float = 0.10
    sigma2: float = 5.0

    def __post_init__(self):
        if not 0.0 <= self.epsilon <= 1.0:
            raise InvalidArgument("epsilon must lie in [0, 1]")
        if not self.sigma2 > 0:
            raise InvalidArgument("sigma2 must be positive")


# ---------------------------------------------------------------------------
# transforms


def softplus(x):
    x = np.asarray(x, dtype=float)
    # log1p(exp(x)) overflows past ~709; above 30 the correction is below 1e-13
    safe = np.minimum(x, 30.0)
    return np.where(x > 30.0, x + np.log1p(np.exp(-np.abs(x))), np.log1p(np.exp(safe)))


def sigmoid(x):
    x = np.asarray(x, dtype=float)
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def scaled_sigmoid(x, lo=NU_LO, hi=NU_HI):
    if not lo < hi:
        raise InvalidArgument("scaled_sigmoid requires lo < hi")
    return lo + (hi - lo) * sigmoid(x)


def simplex_softmax(v, axis=-1):
    v = np.asarray(v, dtype=float)
    e = np.exp(v - np.max(v, axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def softplus_inverse(y):
    y = np.asarray(y, dtype=float)
    return np.where(y > 30.0, y + np.log(-np.expm1(-y)), np.log(np.expm1(y)))


def scaled_logit(y, lo=NU_LO, hi=NU_HI):
    s = (np.asarray(y, dtype=float) - lo) / (hi - lo)
    return np.log(s) - np.log1p(-s)


# ---------------------------------------------------------------------------
# single-point densities


def _check_point(y, comp: ComponentParams) -> np.ndarray:
    y = np.asarray(y, dtype=float).reshape(-1)
    if y.shape[0] != comp.dim:
        raise InvalidArgument(f"point has dimension {y.shape[0]}, component has {comp.dim}")
    return y


def _mahalanobis(y: np.ndarray, comp: ComponentParams) -> float:
    z = solve_triangular(comp.chol_lower, y - comp.mu, lower=True, check_finite=False)
    return max(float(z @ z), 0.0)


def _half_logdet(comp: ComponentParams) -> float:
    return float(np.sum(np.log(np.diag(comp.chol_lower))))


def gaussian_logpdf(y, comp: ComponentParams) -> float:
    """log N(y | mu, L L^T) via a triangular solve."""
    y = _check_point(y, comp)
    q = _mahalanobis(y, comp)
    return -0.5 * comp.dim * LOG_2PI - _half_logdet(comp) - 0.5 * q


def _student_t_const(nu: float, p: int) -> float:
    return gammaln(0.5 * (nu + p)) - gammaln(0.5 * nu) - 0.5 * p * math.log(nu * math.pi)


def student_t_logpdf(y, comp: ComponentParams) -> float:
    """Multivariate Student-t log-density with scale matrix L L^T."""
    y = _check_point(y, comp)
    nu = comp.nu
    if not nu > 0:
        raise InvalidArgument("degrees of freedom must be positive")
    p = comp.dim
    q = _mahalanobis(y, comp)
    return (
        _student_t_const(nu, p)
        - _half_logdet(comp)
        - 0.5 * (nu + p) * math.log1p(q / nu)
    )


def _scale_mixture_rule(q: float, nu: float, p: int, half_logdet: float, nodes: int) -> float:
    # integrand in s = log z:  N(y | mu, Sigma / z) * Ga(z | nu/2, nu/2) * z
    k = 0.5 * (nu + p)
    s_peak = math.log(k / (0.5 * (nu + q)))
    left = s_peak - 80.0 / k
    right = s_peak + math.log(80.0 / k + 2.0) + 1.0
    s, h = np.linspace(left, right, nodes, retstep=True)
    z = np.exp(s)
    a = 0.5 * nu
    log_gauss = -0.5 * p * LOG_2PI - half_logdet + 0.5 * p * s - 0.5 * z * q
    log_gamma = a * math.log(a) - gammaln(a) + (a - 1.0) * s - a * z
    g = log_gauss + log_gamma + s
    w = np.full(nodes, math.log(h))
    w[0] = w[-1] = math.log(0.5 * h)
    return float(logsumexp(g + w))


def scale_mixture_logpdf_quadrature(y, comp: ComponentParams, nodes: int = 512) -> float:
    """Student-t log-density by integrating the Gaussian scale mixture.

    Independent of :func:`student_t_logpdf`: the gamma-distributed precision
    multiplier is integrated numerically with the trapezoid rule on a
    log-transformed axis, where the integrand decays exponentially on both
    sides. The result is checked against a run with twice as many nodes.

    Raises
    ------
    NumericalError
        If doubling ``nodes`` moves the result by more than 1e-8.
    """
    y = _check_point(y, comp)
    if not comp.nu > 0:
        raise InvalidArgument("degrees of freedom must be positive")
    if nodes < 64:
        raise InvalidArgument("at least 64 quadrature nodes are required")
    q = _mahalanobis(y, comp)
    hld = _half_logdet(comp)
    coarse = _scale_mixture_rule(q, comp.nu, comp.dim, hld, nodes)
    fine = _scale_mixture_rule(q, comp.nu, comp.dim, hld, 2 * nodes)
    if abs(coarse - fine) > 1e-8:
        raise NumericalError(
            f"quadrature with {nodes} nodes is not converged (|delta|={abs(coarse - fine):.3e})"
        )
    return coarse


def component_logpdf(y, comp: ComponentParams, family) -> float:
    if Family.parse(family) is Family.GAUSSIAN:
        return gaussian_logpdf(y, comp)
    return student_t_logpdf(y, comp)


def mixture_logpdf(y, params: MixtureParams) -> float:
    logs = np.array([component_logpdf(y, comp, params.family) for comp in params.components])
    with np.errstate(divide="ignore"):
        log_alpha = np.log(params.alpha)
    return float(logsumexp(log_alpha + logs))


def nll(y, params: MixtureParams) -> float:
    return -mixture_logpdf(y, params)


# ---------------------------------------------------------------------------
# batched raw parameterization


def n_lower(p: int) -> int:
    return p * (p - 1) // 2


@dataclass
class RawMixture:
    """Unconstrained head outputs for a batch of ``B`` predictions.

    Shapes: ``alpha_logits (B, c)``, ``mu (B, c, P)``, ``diag_raw (B, c, P)``,
    ``lower_raw (B, c, P(P-1)/2)`` and ``nu_raw (B, c)``. ``nu_raw`` is None
    for the Gaussian family. Strictly-lower entries are laid out in the order
    of ``np.tril_indices(P, -1)``.
    """

    alpha_logits: np.ndarray
    mu: np.ndarray
    diag_raw: np.ndarray
    lower_raw: np.ndarray
    nu_raw: Optional[np.ndarray] = None
    family: Family = Family.STUDENT_T
    nu_lo: float = NU_LO
    nu_hi: float = NU_HI

    def __post_init__(self):
        self.family = Family.parse(self.family)
        if self.family is Family.STUDENT_T and self.nu_raw is None:
            raise InvalidArgument("Student-t mixture needs nu_raw")

    @property
    def batch(self) -> int:
        return self.mu.shape[0]

    @property
    def dim(self) -> int:
        return self.mu.shape[2]

    @property
    def n_components(self) -> int:
        return self.mu.shape[1]

    def arrays(self) -> dict:
        out = {
            "alpha_logits": self.alpha_logits,
            "mu": self.mu,
            "diag_raw": self.diag_raw,
            "lower_raw": self.lower_raw,
        }
        if self.nu_raw is not None:
            out["nu_raw"] = self.nu_raw
        return out

    def replace(self, **arrays) -> "RawMixture":
        fields = self.arrays()
        fields.update(arrays)
        return RawMixture(
            family=self.family, nu_lo=self.nu_lo, nu_hi=self.nu_hi, **fields
        )

    def cholesky(self) -> np.ndarray:
        p = self.dim
        b, c = self.mu.shape[:2]
        chol = np.zeros((b, c, p, p))
        idx = np.arange(p)
        chol[:, :, idx, idx] = softplus(self.diag_raw) + DIAG_FLOOR
        rows, cols = np.tril_indices(p, -1)
        chol[:, :, rows, cols] = self.lower_raw
        return chol

    def nu(self) -> Optional[np.ndarray]:
        if self.nu_raw is None:
            return None
        return scaled_sigmoid(self.nu_raw, self.nu_lo, self.nu_hi)

    def to_params(self, index: int = 0) -> MixtureParams:
        chol = self.cholesky()[index]
        nu = self.nu()
        alpha = simplex_softmax(self.alpha_logits[index])
        # keep the simplex invariant exact to rounding
        alpha = alpha / alpha.sum()
        comps = [
            ComponentParams(
                self.mu[index, i],
                chol[i],
                math.inf if nu is None else float(nu[index, i]),
            )
            for i in range(self.n_components)
        ]
        return MixtureParams(alpha, comps, self.family)

    @classmethod
    def from_params(cls, params: MixtureParams, nu_lo=NU_LO, nu_hi=NU_HI) -> "RawMixture":
        """Invert the head transforms for a single prediction (batch of one)."""
        p = params.dim
        rows, cols = np.tril_indices(p, -1)
        chol = np.stack([comp.chol_lower for comp in params.components])
        diag = np.diagonal(chol, axis1=1, axis2=2) - DIAG_FLOOR
        if np.any(diag <= 0):
            raise InvalidArgument(f"Cholesky diagonal must exceed {DIAG_FLOOR}")
        nu_raw = None
        if params.family is Family.STUDENT_T:
            nu = np.array([comp.nu for comp in params.components])
            if np.any(nu <= nu_lo) or np.any(nu >= nu_hi):
                raise InvalidArgument("nu outside the open interval (nu_lo, nu_hi)")
            nu_raw = scaled_logit(nu, nu_lo, nu_hi)[None]
        with np.errstate(divide="ignore"):
            logits = np.log(params.alpha)
        return cls(
            alpha_logits=logits[None],
            mu=np.stack([comp.mu for comp in params.components])[None],
            diag_raw=softplus_inverse(diag)[None],
            lower_raw=chol[:, rows, cols][None],
            nu_raw=nu_raw,
            family=params.family,
            nu_lo=nu_lo,
            nu_hi=nu_hi,
        )


def _forward_substitution(chol: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    p = rhs.shape[-1]
    z = np.empty_like(rhs)
    for i in range(p):
        acc = rhs[..., i] - np.einsum("...j,...j->...", chol[..., i, :i], z[..., :i])
        z[..., i] = acc / chol[..., i, i]
    return z


def _back_substitution_transposed(chol: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    # solves L^T s = rhs
    p = rhs.shape[-1]
    s = np.empty_like(rhs)
    for i in range(p - 1, -1, -1):
        acc = rhs[..., i] - np.einsum("...j,...j->...", chol[..., i + 1 :, i], s[..., i + 1 :])
        s[..., i] = acc / chol[..., i, i]
    return s


def batch_logpdf_and_grad(y, raw: RawMixture, need_grad: bool = True):
    """Mixture log-density of ``y`` (B, P) and its gradient w.r.t. ``raw``.

    Returns ``(logp, grad)`` where ``logp`` has shape (B,) and ``grad`` is a
    :class:`RawMixture` of the same shapes as ``raw`` holding
    d logp / d raw (``None`` when ``need_grad`` is false).
    """
    y = np.asarray(y, dtype=float)
    b, c, p = raw.mu.shape
    if y.shape != (b, p):
        raise InvalidArgument(f"targets have shape {y.shape}, expected {(b, p)}")
    chol = raw.cholesky()
    diag = np.diagonal(chol, axis1=2, axis2=3)
    delta = y[:, None, :] - raw.mu
    z = _forward_substitution(chol, delta)
    q = np.maximum(np.einsum("bcp,bcp->bc", z, z), 0.0)
    half_logdet = np.log(diag).sum(axis=-1)

    if raw.family is Family.GAUSSIAN:
        comp_log = -0.5 * p * LOG_2PI - half_logdet - 0.5 * q
        dlog_dq = np.full_like(q, -0.5)
        nu = None
    else:
        nu = raw.nu()
        comp_log = (
            gammaln(0.5 * (nu + p))
            - gammaln(0.5 * nu)
            - 0.5 * p * np.log(nu * math.pi)
            - half_logdet
            - 0.5 * (nu + p) * np.log1p(q / nu)
        )
        dlog_dq = -0.5 * (nu + p) / (nu + q)

    log_alpha = raw.alpha_logits - logsumexp(raw.alpha_logits, axis=1, keepdims=True)
    joint = log_alpha + comp_log
    logp = logsumexp(joint, axis=1)
    if not need_grad:
        return logp, None

    resp = np.exp(joint - logp[:, None])
    alpha = np.exp(log_alpha)
    g_logits = resp - alpha

    # d comp_log / d mu = -2 w s,  d comp_log / d L = -2 w s z^T - diag(1/L_ii)
    s = _back_substitution_transposed(chol, z)
    w = (resp * dlog_dq)[..., None]
    g_mu = -2.0 * w * s
    g_chol = -2.0 * w[..., None] * (s[..., :, None] * z[..., None, :])
    rows, cols = np.tril_indices(p, -1)
    g_lower = g_chol[:, :, rows, cols]
    idx = np.arange(p)
    g_diag_val = g_chol[:, :, idx, idx] - resp[..., None] / diag
    g_diag = g_diag_val * sigmoid(raw.diag_raw)

    g_nu = None
    if nu is not None:
        dlog_dnu = 0.5 * (
            digamma(0.5 * (nu + p))
            - digamma(0.5 * nu)
            - p / nu
            - np.log1p(q / nu)
            + (nu + p) * q / (nu * (nu + q))
        )
        sig = sigmoid(raw.nu_raw)
        g_nu = resp * dlog_dnu * (raw.nu_hi - raw.nu_lo) * sig * (1.0 - sig)

    grad = RawMixture(
        alpha_logits=g_logits,
        mu=g_mu,
        diag_raw=g_diag,
        lower_raw=g_lower,
        nu_raw=g_nu,
        family=raw.family,
        nu_lo=raw.nu_lo,
        nu_hi=raw.nu_hi,
    )
    return logp, grad


def grad_logpdf(y, params, nu_lo=NU_LO, nu_hi=NU_HI) -> RawMixture:
    """Gradient of the mixture log-density in the unconstrained parameterization.

    ``params`` may be a single-prediction :class:`RawMixture` or a
    :class:`MixtureParams`, in which case the head transforms are inverted first.
    """
    raw = params if isinstance(params, RawMixture) else RawMixture.from_params(params, nu_lo, nu_hi)
    y = np.asarray(y, dtype=float).reshape(1, -1)
    return batch_logpdf_and_grad(y, raw)[1]


def logpdf_batch(y, raw: RawMixture) -> np.ndarray:
    return batch_logpdf_and_grad(y, raw, need_grad=False)[0]

