"""RBF Gaussian-process utilities over the time axis.

Times are expected in normalised units (a record spans ``[0, 1]``), so a
given ``gamma`` means the same correlation length for every sequence.
The kernel has unit marginal variance; noise scale enters separately.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .errors import ContractError, NumericalError

DEFAULT_JITTER = 1e-8
REFINE_STEPS = 3
MAX_JITTER_DOUBLINGS = 4


@dataclass(frozen=True)
class RBFKernelConfig:
    gamma: float = 50.0
    jitter: float = DEFAULT_JITTER

    def __post_init__(self):
        if not self.gamma > 0:
            raise ContractError(f"gamma must be > 0, got {self.gamma}")
        if self.jitter < 0:
            raise ContractError(f"jitter must be >= 0, got {self.jitter}")


@dataclass(frozen=True)
class GPRConditional:
    weights: np.ndarray
    variance: float


def rbf_kernel(t_i, t_j, gamma: float):
    """``exp(-gamma * (t_i - t_j)**2)``; broadcasts over array inputs."""
    if not gamma > 0:
        raise ContractError(f"gamma must be > 0, got {gamma}")
    d = np.asarray(t_i, dtype=np.float64) - np.asarray(t_j, dtype=np.float64)
    out = np.exp(-gamma * d * d)
    return float(out) if out.ndim == 0 else out


def kernel_matrix(times, gamma: float, jitter: float = 0.0) -> np.ndarray:
    t = np.asarray(times, dtype=np.float64).ravel()
    K = rbf_kernel(t[:, None], t[None, :], gamma)
    K = np.atleast_2d(K)
    if jitter:
        K = K + jitter * np.eye(t.shape[0])
    return K


def _check_increasing(times):
    t = np.asarray(times, dtype=np.float64).ravel()
    if t.size == 0:
        raise ContractError("need at least one timestamp")
    if np.any(np.diff(t) <= 0):
        raise ContractError("timestamps must be strictly increasing")
    return t


def robust_cholesky(K: np.ndarray, jitter: float = DEFAULT_JITTER) -> np.ndarray:
    """Lower Cholesky factor of ``K + jitter*I``, doubling jitter on failure."""
    n = K.shape[0]
    eye = np.eye(n)
    j = jitter
    for _ in range(MAX_JITTER_DOUBLINGS + 1):
        try:
            return np.linalg.cholesky(K + j * eye)
        except np.linalg.LinAlgError:
            j = 2 * j if j > 0 else DEFAULT_JITTER
    raise NumericalError(f"Cholesky failed even with jitter {j / 2:.3g}")


def gp_cholesky(times, gamma: float, jitter: float = DEFAULT_JITTER) -> np.ndarray:
    t = _check_increasing(times)
    return robust_cholesky(kernel_matrix(t, gamma), jitter)


def sample_gp_noise(times, core_shape, gamma: float, sigma: float = 1.0, seed=None,
                    jitter: float = DEFAULT_JITTER) -> np.ndarray:
    """Draw noise of shape ``(M, *core_shape)``.

    Every core element gets an independent GP sample across time with
    covariance ``sigma**2 * K``. ``seed`` may be an int or a numpy Generator.
    """
    if sigma < 0:
        raise ContractError("sigma must be >= 0")
    L = gp_cholesky(times, gamma, jitter)
    rng = np.random.default_rng(seed)
    M = L.shape[0]
    z = rng.standard_normal((M, int(np.prod(core_shape))))
    return (sigma * (L @ z)).reshape((M, *tuple(core_shape)))


def gpr_conditional(target_time: float, rest_times, gamma: float,
                    jitter: float = DEFAULT_JITTER) -> GPRConditional:
    """Posterior weights and variance of a unit-variance GP at ``target_time``.

    ``weights = k^T (K_rest + jitter I)^{-1}``, ``variance = 1 - weights @ k``.
    """
    rest = np.asarray(rest_times, dtype=np.float64).ravel()
    if rest.size == 0:
        raise ContractError("rest_times must be nonempty")
    if jitter <= 0:
        d = np.abs(rest - target_time)
        if np.any(d < 1e-12):
            raise ContractError("target time coincides with a rest time; use jitter > 0")
    K = kernel_matrix(rest, gamma, jitter)
    k = np.atleast_1d(rbf_kernel(rest, target_time, gamma))
    try:
        c = scipy.linalg.cho_factor(K, lower=True)
        weights = scipy.linalg.cho_solve(c, k)
    except np.linalg.LinAlgError as exc:
        raise NumericalError("kernel matrix is singular; increase jitter") from exc
    # close time pairs make K badly conditioned; refine with extended-precision residuals
    K_ext, k_ext = K.astype(np.longdouble), k.astype(np.longdouble)
    for _ in range(REFINE_STEPS):
        r = (k_ext - K_ext @ weights.astype(np.longdouble)).astype(np.float64)
        weights = weights + scipy.linalg.cho_solve(c, r)
    variance = 1.0 - float(weights @ k)
    if variance < -1e-9:
        raise NumericalError(f"negative conditional variance {variance:.3g}")
    return GPRConditional(weights=weights, variance=max(variance, 0.0))
