"""Late fusion of per-anchor position estimates.

The array functions operate on the last axis (one entry per anchor) and
broadcast over any leading axes, so a whole test set fuses in one call. The
list-based functions wrap them for individual estimates.
"""

from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np

from .errors import DomainError

DEFAULT_LAMBDA = 0.01


@dataclass(frozen=True)
class UncertainEstimate:
    anchor_id: int
    x: float
    y: float
    var_x: float
    var_y: float


@dataclass(frozen=True)
class FusedEstimate:
    x: float
    y: float
    var_x: float
    var_y: float
    method: str


@dataclass(frozen=True)
class SPConfig:
    lam: float = DEFAULT_LAMBDA

    def __post_init__(self):
        if not self.lam > 0:
            raise DomainError(f"lambda must be positive, got {self.lam}")


# -- array cores -----------------------------------------------------------------


def ivw(means: np.ndarray, variances: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Inverse-variance weighting over the last axis: returns (fused mean, fused variance)."""
    means = np.asarray(means, dtype=float)
    variances = np.asarray(variances, dtype=float)
    if means.shape[-1] == 0:
        raise DomainError("nothing to fuse")
    if np.any(~(variances > 0)):
        raise DomainError("inverse-variance fusion needs strictly positive variances")
    precision = 1.0 / variances
    fused_var = 1.0 / precision.sum(axis=-1)
    fused_mean = fused_var * np.sum(means * precision, axis=-1)
    return fused_mean, fused_var


def average(means: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Plain mean; the fused variance is 1/N_B, i.e. IVW with unit variances."""
    means = np.asarray(means, dtype=float)
    n = means.shape[-1]
    if n == 0:
        raise DomainError("nothing to fuse")
    return means.mean(axis=-1), np.full(means.shape[:-1], 1.0 / n)


def sp_variances(means: np.ndarray, variances: np.ndarray, lam: float = DEFAULT_LAMBDA) -> np.ndarray:
    """Inflate each anchor's variance by its disagreement with the others.

    With ``D_n = prod_{l != n} (m_n - m_l)^2`` and
    ``B_n = prod_{l != n} (|m_n - m_l| + lam)^2`` the adjusted variance is
    ``var_n * B_n / (B_n - D_n)``. The ratio ``D_n / B_n`` is accumulated in
    the log domain so large anchor counts cannot overflow; it is always < 1,
    so the result is finite and never smaller than ``var_n``.
    """
    if not lam > 0:
        raise DomainError(f"lambda must be positive, got {lam}")
    means = np.asarray(means, dtype=float)
    variances = np.asarray(variances, dtype=float)
    n = means.shape[-1]
    if n < 2:
        raise DomainError("spurious-robust fusion needs at least two estimates")
    if np.any(~(variances > 0)):
        raise DomainError("variances must be strictly positive")
    diff = np.abs(means[..., :, None] - means[..., None, :])
    off_diag = ~np.eye(n, dtype=bool)
    with np.errstate(divide="ignore"):
        # log(D_n / B_n) = 2 * sum_l [log|d| - log(|d| + lam)]
        log_ratio = 2.0 * np.sum(np.where(off_diag, np.log(diff) - np.log(diff + lam), 0.0), axis=-1)
    # 1 - D/B, computed without cancellation when D/B is tiny
    return variances / -np.expm1(log_ratio)


# -- estimate-level API -----------------------------------------------------------


def _columns(estimates: Sequence[UncertainEstimate]):
    if len(estimates) == 0:
        raise DomainError("need at least one estimate")
    arr = np.array([(e.x, e.y, e.var_x, e.var_y) for e in estimates], dtype=float)
    if not np.isfinite(arr[:, :2]).all():
        raise DomainError("estimate coordinates must be finite")
    return arr[:, 0], arr[:, 1], arr[:, 2], arr[:, 3]


def fuse_average(estimates: Sequence[UncertainEstimate]) -> FusedEstimate:
    x, y, _, _ = _columns(estimates)
    fx, fvar = average(x)
    fy, _ = average(y)
    return FusedEstimate(float(fx), float(fy), float(fvar), float(fvar), "avg")


def fuse_ivw(estimates: Sequence[UncertainEstimate]) -> FusedEstimate:
    """Maximum-likelihood fusion of independent Gaussian estimates, per coordinate."""
    x, y, vx, vy = _columns(estimates)
    fx, fvx = ivw(x, vx)
    fy, fvy = ivw(y, vy)
    return FusedEstimate(float(fx), float(fy), float(fvx), float(fvy), "ivw")


def sp_adjust(estimates: Sequence[UncertainEstimate], cfg: SPConfig = SPConfig()) -> list[UncertainEstimate]:
    x, y, vx, vy = _columns(estimates)
    vx2 = sp_variances(x, vx, cfg.lam)
    vy2 = sp_variances(y, vy, cfg.lam)
    return [UncertainEstimate(e.anchor_id, e.x, e.y, float(a), float(b)) for e, a, b in zip(estimates, vx2, vy2)]


def fuse_sp(estimates: Sequence[UncertainEstimate], cfg: SPConfig = SPConfig()) -> FusedEstimate:
    f = fuse_ivw(sp_adjust(estimates, cfg))
    return FusedEstimate(f.x, f.y, f.var_x, f.var_y, "sp")


def fuse_arrays(method: str, means: np.ndarray, variances: np.ndarray, lam: float = DEFAULT_LAMBDA):
    """Fuse (n, N_B, 2) means/variances into (n, 2) means and variances."""
    mx = np.moveaxis(means, -1, 0)
    vx = np.moveaxis(variances, -1, 0)
    if method == "avg":
        m, v = average(mx)
    elif method == "ivw":
        m, v = ivw(mx, vx)
    elif method == "sp":
        m, v = ivw(mx, sp_variances(mx, vx, lam))
    else:
        raise DomainError(f"unknown fusion method {method!r}")
    return np.moveaxis(m, 0, -1), np.moveaxis(np.broadcast_to(v, m.shape), 0, -1)
