import logging
from typing import Callable, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field
from scipy.linalg import svd

from core import MaskedMatrix
from errors import AllMissing

logger = logging.getLogger(__name__)


class SpectralParams(BaseModel):
    """Free parameters of the spectral comparators."""

    model_config = ConfigDict(frozen=True)

    usvt_eta: float = Field(default=2.02, gt=0, description="USVT threshold multiplier")
    si_lambda: float = Field(default=1.0, ge=0, description="SoftImpute nuclear-norm penalty")
    si_max_iter: int = Field(default=100, ge=1, description="SoftImpute iteration cap")
    si_tol: float = Field(default=1e-5, gt=0, description="Relative Frobenius change that stops SoftImpute")


def _check_observed(m: MaskedMatrix):
    if m.observed_count == 0:
        raise AllMissing(f"no observed entry in {m.n_rows} x {m.n_cols} matrix")


def usvt(m: MaskedMatrix, params: Optional[SpectralParams] = None) -> np.ndarray:
    """Universal singular value thresholding.

    Zero-fill, keep singular values above usvt_eta * sqrt(max(N, T) * p_hat),
    rescale by 1 / p_hat and clip to the observed value range.
    """
    params = params or SpectralParams()
    _check_observed(m)
    n_rows, n_cols = m.shape
    p_hat = m.observed_count / (n_rows * n_cols)

    u, s, vt = svd(m.filled(0.0), full_matrices=False)
    keep = s >= params.usvt_eta * np.sqrt(max(n_rows, n_cols) * p_hat)
    completed = (u[:, keep] * s[keep]) @ vt[keep] / p_hat
    logger.debug(f"USVT kept {int(keep.sum())} of {len(s)} singular values (p_hat={p_hat:.4f})")

    observed = m.observed_values()
    return np.clip(completed, observed.min(), observed.max())


def _singular_value_threshold(y: np.ndarray, lam: float) -> np.ndarray:
    u, s, vt = svd(y, full_matrices=False)
    return (u * np.maximum(s - lam, 0.0)) @ vt


def soft_impute_objective(m: MaskedMatrix, x: np.ndarray, lam: float) -> float:
    """0.5 * ||P_obs(Z - X)||^2 + lam * ||X||_*"""
    residual = np.where(m.mask, m.filled(0.0) - x, 0.0)
    nuclear = svd(x, compute_uv=False).sum()
    return float(0.5 * np.sum(residual**2) + lam * nuclear)


def soft_impute(
    m: MaskedMatrix,
    params: Optional[SpectralParams] = None,
    callback: Optional[Callable[[int, np.ndarray], None]] = None,
) -> np.ndarray:
    """SoftImpute in its SVT fixed-point form, starting from X = 0."""
    params = params or SpectralParams()
    _check_observed(m)
    observed = m.filled(0.0)
    x = np.zeros(m.shape)

    for iteration in range(1, params.si_max_iter + 1):
        y = np.where(m.mask, observed, x)
        x_new = _singular_value_threshold(y, params.si_lambda) if params.si_lambda > 0 else y
        step = x_new - x
        # the next input only differs from y on missing entries
        settled = not np.any(np.where(m.mask, 0.0, step))
        previous = np.linalg.norm(x)
        x = x_new
        if callback is not None:
            callback(iteration, x)
        if settled or (previous > 0 and np.linalg.norm(step) / previous < params.si_tol):
            logger.debug(f"SoftImpute converged after {iteration} iterations (lambda={params.si_lambda})")
            break
    else:
        logger.debug(f"SoftImpute hit the {params.si_max_iter} iteration cap (lambda={params.si_lambda})")
    return x
