"""Exchangeable latent process with O(1) recurrent posterior-predictive updates.

Each latent dimension follows a compound-symmetric joint (common variance v
on the diagonal, common covariance rho off it, location mu) in either a
Gaussian or a Student-t family. Conditioning on n observations reduces to
three sufficient statistics per dimension (count, sum of residuals, sum of
squared residuals); the closed-form predictive is

    c_n   = rho / (v + (n-1) rho)
    m_n   = mu + c_n * S
    s2_n  = v - n rho c_n                      (Gaussian)
    Q_n   = (q - c_n S^2) / (v - rho)
    s2_n  = ((nu + Q_n) / (nu + n)) (v - n rho c_n),  dof nu + n   (Student-t)

The brute-force matrix oracles below validate the recurrence and densities.
All arithmetic is expressed through operators shared by NumPy arrays and
tracked tensors, so the same formulas serve inference and training.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

VARIANCE_FLOOR = 1e-6
# keep rho strictly below v and nu strictly above 2 even where float32
# saturates sigmoid/softplus
COVARIANCE_MARGIN = 1e-6
DOF_FLOOR = 1e-4
LOG_2PI = math.log(2.0 * math.pi)


def softplus_inverse(y):
    y = np.asarray(y, dtype=np.float64)
    return np.where(y > 30.0, y, np.log(np.expm1(np.minimum(y, 30.0))))


def _logit(p):
    return np.log(p) - np.log1p(-p)


def _as_np(x):
    return x.data if isinstance(x, Tensor) else np.asarray(x)


@dataclass
class ProcessParams:
    """Constrained per-dimension parameters; ``dof is None`` means Gaussian."""

    mean: object
    variance: object
    covariance: object
    dof: object = None

    @property
    def is_student_t(self) -> bool:
        return self.dof is not None

    def validate(self) -> "ProcessParams":
        v, rho = _as_np(self.variance), _as_np(self.covariance)
        if np.any(rho < 0) or np.any(rho >= v):
            raise ValueError("compound symmetry requires 0 <= covariance < variance")
        if self.dof is not None and np.any(_as_np(self.dof) <= 2):
            raise ValueError("degrees of freedom must exceed 2")
        return self


@dataclass
class ProcessState:
    """Sufficient statistics of the conditioning set, O(1) per update."""

    count: int
    obs_sum: object  # S = sum(z - mu), trailing axis is the latent dimension
    obs_sq_sum: object  # q = sum((z - mu)^2)


def init_state(params: ProcessParams, batch_shape: tuple = ()) -> ProcessState:
    dim = _as_np(params.mean).shape[-1]
    zeros = np.zeros(batch_shape + (dim,), dtype=_as_np(params.mean).dtype)
    return ProcessState(count=0, obs_sum=zeros, obs_sq_sum=zeros.copy())


def update_state(state: ProcessState, z, params: ProcessParams) -> ProcessState:
    """Fold one latent vector into the statistics; returns a new state."""
    if not isinstance(z, Tensor) and not np.isfinite(z).all():
        raise ValueError("latent observation contains non-finite values")
    e = z - params.mean
    return ProcessState(
        count=state.count + 1,
        obs_sum=state.obs_sum + e,
        obs_sq_sum=state.obs_sq_sum + e * e,
    )


def predictive_params(state: ProcessState, params: ProcessParams):
    """Per-dimension (location, squared scale, dof) of the next observation.

    The dof entry is None in Gaussian mode. The closed form covers n = 0
    (the prior) without branching.
    """
    if not isinstance(params.variance, Tensor):
        params.validate()
    n = state.count
    mu, v, rho = params.mean, params.variance, params.covariance
    c = rho / (v + (n - 1) * rho)
    loc = mu + c * state.obs_sum
    base = v - (n * 1.0) * rho * c
    if not params.is_student_t:
        return loc, base, None
    nu = params.dof
    q_form = (state.obs_sq_sum - c * state.obs_sum * state.obs_sum) / (v - rho)
    dof_n = nu + (n * 1.0)
    scale_sq = ((nu + q_form) / dof_n) * base
    return loc, scale_sq, dof_n


def predictive_logpdf(z, state: ProcessState, params: ProcessParams):
    """Log density of a latent vector under the current predictive.

    Sums the per-dimension univariate Gaussian / location-scale Student-t
    terms over the trailing axis; differentiable when given tensors.
    """
    loc, s2, dof = predictive_params(state, params)
    resid = z - loc
    if dof is None:
        lp = -0.5 * (LOG_2PI + ad.log(s2)) - (resid * resid) / (2.0 * s2)
    else:
        r2 = (resid * resid) / s2
        lp = (
            ad.lgamma((dof + 1.0) / 2.0)
            - ad.lgamma(dof / 2.0)
            - 0.5 * ad.log(dof * math.pi)
            - 0.5 * ad.log(s2)
            - ((dof + 1.0) / 2.0) * ad.log1p(r2 / dof)
        )
    if isinstance(lp, Tensor):
        return lp.sum(axis=-1)
    return np.sum(lp, axis=-1)


def sample_predictive(state: ProcessState, params: ProcessParams,
                      rng: np.random.Generator, n_samples: int | None = None) -> np.ndarray:
    """Seeded draw(s) from the predictive; Student-t via a normal/chi-square ratio."""
    loc, s2, dof = predictive_params(state, params)
    loc, s2 = _as_np(loc), _as_np(s2)
    shape = loc.shape if n_samples is None else (n_samples,) + loc.shape
    eps = rng.standard_normal(shape)
    scale = np.sqrt(s2)
    if dof is None:
        return loc + scale * eps
    dof = _as_np(dof)
    chi2 = rng.chisquare(np.broadcast_to(dof, shape))
    return loc + scale * eps / np.sqrt(chi2 / dof)


# ---------------------------------------------------------------------------
# brute-force matrix oracles
# ---------------------------------------------------------------------------


def _compound_matrix(v: float, rho: float, n: int) -> np.ndarray:
    return (v - rho) * np.eye(n) + rho * np.ones((n, n))


def oracle_conditioning(params: ProcessParams, observations: np.ndarray):
    """Predictive parameters by explicit O(n^3) matrix conditioning.

    ``observations`` is [n, D]; returns per-dimension (location, squared
    scale, dof or None), agreeing with :func:`predictive_params`.
    """
    params.validate()
    obs = np.asarray(observations, dtype=np.float64)
    if obs.ndim != 2:
        raise ValueError("observations must be [n, D]")
    n, dim = obs.shape
    mu = np.broadcast_to(_as_np(params.mean).astype(np.float64), (dim,))
    v = np.broadcast_to(_as_np(params.variance).astype(np.float64), (dim,))
    rho = np.broadcast_to(_as_np(params.covariance).astype(np.float64), (dim,))
    nu = None if params.dof is None else np.broadcast_to(_as_np(params.dof).astype(np.float64), (dim,))

    loc = np.empty(dim)
    s2 = np.empty(dim)
    if n == 0:
        loc[:] = mu
        s2[:] = v
        return (loc, s2, None) if nu is None else (loc, s2, nu.copy())

    dof_out = None if nu is None else np.empty(dim)
    for d in range(dim):
        sigma = _compound_matrix(v[d], rho[d], n)
        e = obs[:, d] - mu[d]
        alpha = np.linalg.solve(sigma, e)
        k = np.full(n, rho[d])
        w = np.linalg.solve(sigma, k)
        loc[d] = mu[d] + k @ alpha
        cond_var = v[d] - k @ w
        if nu is None:
            s2[d] = cond_var
        else:
            q_form = e @ alpha
            s2[d] = ((nu[d] + q_form) / (nu[d] + n)) * cond_var
            dof_out[d] = nu[d] + n
    return loc, s2, dof_out


def joint_logpdf_oracle(params: ProcessParams, observations: np.ndarray) -> float:
    """Exact joint log density of n exchangeable observations, by matrix algebra."""
    params.validate()
    obs = np.asarray(observations, dtype=np.float64)
    if obs.ndim != 2:
        raise ValueError("observations must be [n, D]")
    n, dim = obs.shape
    if n == 0:
        return 0.0
    mu = np.broadcast_to(_as_np(params.mean).astype(np.float64), (dim,))
    v = np.broadcast_to(_as_np(params.variance).astype(np.float64), (dim,))
    rho = np.broadcast_to(_as_np(params.covariance).astype(np.float64), (dim,))
    nu = None if params.dof is None else np.broadcast_to(_as_np(params.dof).astype(np.float64), (dim,))

    total = 0.0
    for d in range(dim):
        sigma = _compound_matrix(v[d], rho[d], n)
        sign, logdet = np.linalg.slogdet(sigma)
        if sign <= 0:
            raise np.linalg.LinAlgError("compound-symmetric matrix is not positive definite")
        e = obs[:, d] - mu[d]
        q_form = e @ np.linalg.solve(sigma, e)
        if nu is None:
            total += -0.5 * (n * LOG_2PI + logdet + q_form)
        else:
            f = nu[d]
            total += (
                math.lgamma((f + n) / 2.0)
                - math.lgamma(f / 2.0)
                - 0.5 * n * math.log(f * math.pi)
                - 0.5 * logdet
                - 0.5 * (f + n) * math.log1p(q_form / f)
            )
    return float(total)


# ---------------------------------------------------------------------------
# learnable container
# ---------------------------------------------------------------------------


class ExchangeableProcess:
    """Per-dimension process parameters stored unconstrained for training.

    v = softplus(a) + 1e-6, rho = v * sigmoid(b), nu = 2 + softplus(c); every
    unconstrained value therefore satisfies 0 <= rho < v and nu > 2.
    """

    MODES = ("gaussian", "student-t")

    def __init__(self, dim: int, mode: str = "student-t", init_mean: float = 0.0,
                 init_variance: float = 1.0, init_covariance: float = 0.1,
                 init_dof: float = 1000.0):
        if mode not in self.MODES:
            raise ValueError(f"mode must be one of {self.MODES}, got {mode!r}")
        if not 0.0 < init_covariance < init_variance:
            raise ValueError("initial covariance must lie strictly inside (0, variance)")
        self.dim = int(dim)
        self.mode = mode
        dtype = ad.default_dtype()
        full = lambda val: np.full(self.dim, val, dtype=dtype)
        self.mean = Tensor(full(init_mean), requires_grad=True)
        self.raw_variance = Tensor(
            full(softplus_inverse(init_variance - VARIANCE_FLOOR)), requires_grad=True
        )
        self.raw_covariance = Tensor(
            full(_logit(init_covariance / init_variance)), requires_grad=True
        )
        if mode == "student-t":
            self.raw_dof = Tensor(full(softplus_inverse(init_dof - 2.0)), requires_grad=True)
        else:
            self.raw_dof = None

    def parameters(self):
        params = [self.mean, self.raw_variance, self.raw_covariance]
        if self.raw_dof is not None:
            params.append(self.raw_dof)
        return params

    def parameter_items(self):
        items = [
            ("process.mean", self.mean),
            ("process.raw_variance", self.raw_variance),
            ("process.raw_covariance", self.raw_covariance),
        ]
        if self.raw_dof is not None:
            items.append(("process.raw_dof", self.raw_dof))
        return items

    def constrained(self) -> ProcessParams:
        """Tracked constrained parameters for the training graph."""
        v = ad.softplus(self.raw_variance) + VARIANCE_FLOOR
        rho = v * (ad.sigmoid(self.raw_covariance) * (1.0 - COVARIANCE_MARGIN))
        dof = None if self.raw_dof is None else 2.0 + DOF_FLOOR + ad.softplus(self.raw_dof)
        return ProcessParams(self.mean, v, rho, dof)

    def snapshot(self) -> ProcessParams:
        """Plain-array constrained parameters for inference."""
        v = ad.softplus(self.raw_variance.data) + VARIANCE_FLOOR
        rho = v * (ad.sigmoid(self.raw_covariance.data) * (1.0 - COVARIANCE_MARGIN))
        dof = None if self.raw_dof is None else 2.0 + DOF_FLOOR + ad.softplus(self.raw_dof.data)
        return ProcessParams(self.mean.data.copy(), v, rho, dof)
