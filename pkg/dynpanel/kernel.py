"""Least-squares and instrumental-variables kernel shared by all estimators."""

import logging
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from dynpanel.exceptions import (
    NoRegressors,
    RankDeficient,
    TooFewObservations,
    WeakInstrument,
    handle_linalg_errors,
)

logger = logging.getLogger(__name__)

RANK_TOLERANCE = 1e-10


@dataclass(frozen=True)
class LinearFit:
    """Coefficients and residual bookkeeping of a linear fit."""

    params: np.ndarray
    covariance: np.ndarray
    residuals: np.ndarray
    sigma2: float
    df_resid: int
    ssr: float


def collinear_columns(vt: np.ndarray, singular: np.ndarray, names: Sequence[str]) -> list[str]:
    """Names of the columns that load on the numerical null space of an SVD."""
    null_space = vt[singular <= RANK_TOLERANCE * singular[0]]
    weight = np.abs(null_space).max(axis=0)
    flagged = [name for name, w in zip(names, weight) if w > 1e-6]
    return flagged or list(names)


def _default_names(k: int) -> list[str]:
    return [f"x{j}" for j in range(k)]


@handle_linalg_errors("least squares")
def least_squares(
    x: np.ndarray,
    y: np.ndarray,
    names: Optional[Sequence[str]] = None,
    absorbed: int = 0,
) -> LinearFit:
    """
    Solve ``min ||y - x b||`` through the singular value decomposition.

    Singular values below ``1e-10`` times the largest are treated as zero and
    reported as a rank deficiency naming the columns spanning the null space.

    Args:
        x: (n, k) design matrix.
        y: (n,) response.
        names: Column names used in error messages.
        absorbed: Degrees of freedom already consumed by a transform (e.g. the N
            entity means removed by demeaning).

    Returns:
        LinearFit with the homoskedastic covariance ``s^2 (X'X)^-1``.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n, k = x.shape
    names = list(names) if names is not None else _default_names(k)
    if k == 0:
        raise NoRegressors("Least squares needs at least one regressor")
    if n <= k + absorbed:
        raise TooFewObservations(f"{n} observations for {k} coefficients (+{absorbed} absorbed)")

    u, singular, vt = np.linalg.svd(x, full_matrices=False)
    if singular[0] == 0.0 or singular[-1] <= RANK_TOLERANCE * singular[0]:
        raise RankDeficient(collinear_columns(vt, singular, names))

    params = vt.T @ ((u.T @ y) / singular)
    residuals = y - x @ params
    ssr = float(residuals @ residuals)
    df_resid = n - k - absorbed
    sigma2 = ssr / df_resid
    covariance = sigma2 * (vt.T / singular**2) @ vt
    return LinearFit(params, 0.5 * (covariance + covariance.T), residuals, sigma2, df_resid, ssr)


@handle_linalg_errors("instrumental variables")
def instrumental_variables(
    x: np.ndarray,
    z: np.ndarray,
    y: np.ndarray,
    names: Optional[Sequence[str]] = None,
) -> LinearFit:
    """
    Just-identified IV estimate ``b = (Z'X)^-1 Z'y``.

    Column ``j`` of ``z`` instruments column ``j`` of ``x``. The covariance is the
    conventional homoskedastic IV sandwich ``s^2 (Z'X)^-1 Z'Z (X'Z)^-1``.

    Raises:
        WeakInstrument: If an instrument is (numerically) orthogonal to its regressor.
        RankDeficient: If ``Z'X`` is singular.
    """
    x = np.asarray(x, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n, k = x.shape
    names = list(names) if names is not None else _default_names(k)
    if k == 0:
        raise NoRegressors("Instrumental variables needs at least one regressor")
    if z.shape != x.shape:
        raise ValueError("instrumental_variables expects one instrument per regressor")
    if n <= k:
        raise TooFewObservations(f"{n} observations for {k} coefficients")

    for j, name in enumerate(names):
        cross = abs(float(z[:, j] @ x[:, j]))
        scale = float(np.linalg.norm(z[:, j]) * np.linalg.norm(x[:, j]))
        if scale == 0.0 or cross <= 1e-10 * scale:
            raise WeakInstrument(f"Instrument for '{name}' is uncorrelated with its regressor")

    zx = z.T @ x
    u, singular, vt = np.linalg.svd(zx)
    if singular[-1] <= RANK_TOLERANCE * singular[0]:
        raise RankDeficient(collinear_columns(vt, singular, names), "Singular instrument cross-product")

    zx_inv = (vt.T / singular) @ u.T
    params = zx_inv @ (z.T @ y)
    residuals = y - x @ params
    ssr = float(residuals @ residuals)
    sigma2 = ssr / (n - k)
    covariance = sigma2 * zx_inv @ (z.T @ z) @ zx_inv.T
    return LinearFit(params, 0.5 * (covariance + covariance.T), residuals, sigma2, n - k, ssr)
