"""Self-supervised occlusion targets, inconsistency masks, and the occlusion loss.

A pixel of frame ``a`` counts as occluded when it has no photometric
correspondent in frame ``b`` — covered by another surface, or its content left
the image.  The target mask is built as a range map: every pixel of the other
frame is pushed through the backward flow into this frame, and positions no
pixel lands on are occluded.  All constructed masks are constants for gradient
purposes; only the predicted soft mask receives gradients.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError, DomainError, ShapeError
from .tensor import Node, as_node, exp, log, mul, reduce_sum, sub
from .warp import BACKWARD, FlowField

HARD = "hard"
SOFT = "soft"


@dataclass
class OcclusionMask:
    """H×W occlusion grid; 1 = occluded.  Hard masks are {0,1}, soft in [0,1]."""

    values: np.ndarray
    kind: str = HARD

    def __post_init__(self):
        self.values = np.asarray(self.values)
        if self.values.ndim != 2:
            raise ShapeError(f"OcclusionMask: expected (H, W), got {self.values.shape}")
        if self.kind == HARD:
            if not np.isin(self.values, (0, 1)).all():
                raise DomainError("OcclusionMask: hard mask must contain only 0 and 1")
        elif self.kind == SOFT:
            if self.values.min() < 0.0 or self.values.max() > 1.0:
                raise DomainError("OcclusionMask: soft mask must lie in [0, 1]")
        else:
            raise ContractError(f"OcclusionMask: unknown kind {self.kind!r}")

    @property
    def shape(self):
        return self.values.shape


def _mask_plane(mask):
    """(H, W, 1) float view of a mask, node, or raw array."""
    if isinstance(mask, Node):
        return mask
    values = mask.values if isinstance(mask, OcclusionMask) else np.asarray(mask)
    if values.ndim == 2:
        values = values[:, :, None]
    return as_node(values.astype(np.float64, copy=False))


def occlusion_target(backward_flow):
    """Range-map occlusion mask for this frame from the other frame's flow.

    Every source pixel q of the other frame lands at q + flow(q); landing
    positions are rounded half-up to the nearest pixel.  Positions covered by
    at least one source pixel are visible, the rest are occluded.  The result
    is a constant: no gradient flows through it.
    """
    if not isinstance(backward_flow, FlowField):
        raise ContractError("occlusion_target: expected a FlowField")
    if backward_flow.direction != BACKWARD:
        raise ContractError("occlusion_target: flow must carry the backward direction tag")
    fv = backward_flow.data
    h, w = fv.shape[:2]
    px = np.arange(w)[None, :] + fv[:, :, 0]
    py = np.arange(h)[:, None] + fv[:, :, 1]
    ix = np.floor(px + 0.5).astype(np.intp)
    iy = np.floor(py + 0.5).astype(np.intp)
    inside = (ix >= 0) & (ix < w) & (iy >= 0) & (iy < h)
    covered = np.zeros((h, w), dtype=bool)
    covered[iy[inside], ix[inside]] = True
    return OcclusionMask((~covered).astype(np.float64), HARD)


def seg_inconsistency_mask(m, m_warped):
    """1 where the argmax labels of two probability maps differ (ties: lowest index)."""
    if m.probs.shape != m_warped.probs.shape:
        raise ShapeError(f"seg_inconsistency_mask: class grids {m.probs.shape} "
                         f"vs {m_warped.probs.shape}")
    differ = m.labels != m_warped.labels
    return OcclusionMask(differ.astype(np.float64), HARD)


def error_mask(o_seg, o_est):
    """max(O_seg - O_est, 0); constant for gradient purposes."""
    if o_seg.shape != o_est.shape:
        raise ShapeError(f"error_mask: {o_seg.shape} vs {o_est.shape}")
    est = o_est.values if isinstance(o_est, OcclusionMask) else np.asarray(o_est)
    seg = o_seg.values if isinstance(o_seg, OcclusionMask) else np.asarray(o_seg)
    return OcclusionMask(np.maximum(seg - est, 0.0), SOFT)


def occlusion_loss(o_est, o_hat, alpha=0.2):
    """Pixel-summed cross entropy against the range-map target plus a penalty.

    loss = -sum[ t*log(o) + (1-t)*log(1-o) ] - alpha * sum exp(-o).
    The penalty pushes the prediction toward "not occluded"; larger alpha
    shrinks the predicted occlusion area.  Gradient flows only into o_est.
    """
    if alpha < 0:
        raise ContractError(f"occlusion_loss: alpha must be >= 0, got {alpha}")
    o_est = _mask_plane(o_est)
    ov = o_est.value
    if np.any(ov <= 0.0) or np.any(ov >= 1.0):
        raise DomainError("occlusion_loss: o_est must lie strictly inside (0, 1)")
    target = _mask_plane(o_hat)
    if target.value.shape != ov.shape:
        raise ShapeError(f"occlusion_loss: {target.value.shape} vs {ov.shape}")
    t = target.value
    ce = mul(as_node(t), log(o_est)) + mul(as_node(1.0 - t), log(sub(1.0, o_est)))
    loss = mul(reduce_sum(ce), -1.0)
    if alpha:
        loss = sub(loss, mul(reduce_sum(exp(mul(o_est, -1.0))), alpha))
    return loss


def occlusion_targets_pair(flow_fwd, flow_bwd):
    """Range-map targets for both frames of a pair.

    The mask of frame a is built from the flow that maps b's pixels into a,
    and symmetrically for frame b.
    """
    o_a = occlusion_target(FlowField(flow_bwd.data, BACKWARD))
    o_b = occlusion_target(FlowField(flow_fwd.data, BACKWARD))
    return o_a, o_b


def threshold_mask(o_soft, level=0.5):
    """Hard {0,1} view of a soft mask, for visualization and metrics only."""
    values = o_soft.values if isinstance(o_soft, OcclusionMask) else np.asarray(o_soft)
    return OcclusionMask((values >= level).astype(np.float64), HARD)
