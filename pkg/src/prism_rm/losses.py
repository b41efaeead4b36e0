"""Similarity and regularisation terms, each returned with its gradient."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

DET_FLOOR = 1e-6


@dataclass(frozen=True)
class LossWeights:
    alpha_ph: float = 0.001
    alpha_t: float = 0.1
    lambda_nh: float = 1.0
    eps_tv: float = 1e-6

    def __post_init__(self):
        if min(self.alpha_ph, self.alpha_t, self.lambda_nh) < 0:
            raise ValueError("loss weights must be non-negative")
        if self.eps_tv <= 0:
            raise ValueError("eps_tv must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


def ncc(fixed, warped, return_grad: bool = False):
    """Batch-global normalised cross-correlation.

    Returns ``(value, flagged)`` or ``(value, d value / d warped, flagged)``.
    A batch with zero variance on either side gives 0 and ``flagged=True``;
    its gradient is zero.
    """
    a = np.asarray(fixed, dtype=np.float64)
    b = np.asarray(warped, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("ncc expects two 1-D batches of equal length")
    if a.size < 2:
        raise ValueError("ncc needs at least two samples")
    A = a - a.mean()
    B = b - b.mean()
    saa = A @ A
    sbb = B @ B
    tiny = 1e-12 * max(1.0, float(np.max(np.abs(a))) ** 2, float(np.max(np.abs(b))) ** 2) * a.size
    if saa <= tiny or sbb <= tiny:
        return (0.0, np.zeros_like(b), True) if return_grad else (0.0, True)
    sab = A @ B
    denom = np.sqrt(saa * sbb)
    value = float(np.clip(sab / denom, -1.0, 1.0))
    if not return_grad:
        return value, False
    grad = A / denom - sab * B / (np.sqrt(saa) * sbb ** 1.5)
    return value, grad, False


def _det_inv(J):
    det = np.linalg.det(J)
    return det, np.linalg.inv(J)


def neo_hookean(J, lambda_nh: float = 1.0, return_grad: bool = False, det_floor: float = DET_FLOOR):
    """Hyperelastic energy ``tr(J^T J) - 3 - log(det^2) + lambda (det - 1)^2``.

    ``J`` has shape (..., 3, 3). Below ``det_floor`` the log term is continued
    linearly, giving a large finite penalty whose gradient pushes det upward;
    such entries are reported in the returned ``folded`` mask.
    """
    J = np.asarray(J, dtype=np.float64)
    det = np.linalg.det(J)
    folded = det <= det_floor
    safe = np.where(folded, det_floor, det)
    log_term = np.log(safe * safe)
    log_term = np.where(folded, log_term + (2.0 / det_floor) * (det - det_floor), log_term)
    trace_c = np.einsum("...ij,...ij->...", J, J)
    value = trace_c - 3.0 - log_term + lambda_nh * (det - 1.0) ** 2
    if not return_grad:
        return value, folded
    # d det / dJ = cof(J) = det * J^-T; evaluated via adjugate so folded J stays finite
    cof = _cofactor(J)
    dlog_ddet = np.where(folded, 2.0 / det_floor, 2.0 / safe)
    ddet = -dlog_ddet + 2.0 * lambda_nh * (det - 1.0)
    grad = 2.0 * J + ddet[..., None, None] * cof
    return value, grad, folded


def _cofactor(J):
    a = J
    c = np.empty_like(a)
    c[..., 0, 0] = a[..., 1, 1] * a[..., 2, 2] - a[..., 1, 2] * a[..., 2, 1]
    c[..., 0, 1] = a[..., 1, 2] * a[..., 2, 0] - a[..., 1, 0] * a[..., 2, 2]
    c[..., 0, 2] = a[..., 1, 0] * a[..., 2, 1] - a[..., 1, 1] * a[..., 2, 0]
    c[..., 1, 0] = a[..., 0, 2] * a[..., 2, 1] - a[..., 0, 1] * a[..., 2, 2]
    c[..., 1, 1] = a[..., 0, 0] * a[..., 2, 2] - a[..., 0, 2] * a[..., 2, 0]
    c[..., 1, 2] = a[..., 0, 1] * a[..., 2, 0] - a[..., 0, 0] * a[..., 2, 1]
    c[..., 2, 0] = a[..., 0, 1] * a[..., 1, 2] - a[..., 0, 2] * a[..., 1, 1]
    c[..., 2, 1] = a[..., 0, 2] * a[..., 1, 0] - a[..., 0, 0] * a[..., 1, 2]
    c[..., 2, 2] = a[..., 0, 0] * a[..., 1, 1] - a[..., 0, 1] * a[..., 1, 0]
    return c


def temporal_tv(derivs, dts, eps_tv: float = 1e-6, return_grad: bool = False):
    """Rectangle-rule temporal total variation ``1/2 sum |dt_i| sqrt(|g_i|^2 + eps)``.

    ``derivs`` has shape (..., n_nodes, 3) and ``dts`` broadcasts against
    (..., n_nodes). Leading axes are summed as well.
    """
    g = np.asarray(derivs, dtype=np.float64)
    w = np.abs(np.broadcast_to(np.asarray(dts, dtype=np.float64), g.shape[:-1]))
    root = np.sqrt(np.sum(g * g, axis=-1) + eps_tv)
    value = 0.5 * float(np.sum(w * root))
    if not return_grad:
        return value
    return value, (0.5 * w / root)[..., None] * g


def combined_regularizer(J_batch, tv_derivs, tv_dts, weights: LossWeights) -> float:
    """``alpha_ph * mean(R_ph) + alpha_t * R_t`` (no gradient; see the models for the trained form)."""
    r_ph = 0.0
    if weights.alpha_ph:
        vals, _ = neo_hookean(J_batch, weights.lambda_nh)
        r_ph = float(np.mean(vals))
    r_t = temporal_tv(tv_derivs, tv_dts, weights.eps_tv) if weights.alpha_t else 0.0
    return weights.alpha_ph * r_ph + weights.alpha_t * r_t
