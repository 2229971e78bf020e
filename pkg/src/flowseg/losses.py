"""Training objectives: temporal consistency, photometric with SSIM,
edge-aware smoothness, segmentation cross entropy, and the weighted joint loss.

All losses are sums over pixels, not means; the default weights below were
tuned against sums, so totals scale with pixel count.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError, DataError, ShapeError
from .occlusion import OcclusionMask, _mask_plane
from .tensor import (Node, absval, as_node, box_mean3, channel_mean,
                     channel_sum, crop, div, mul, reduce_sum, sub)
from .warp import warp_bilinear

SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2


@dataclass
class LossWeights:
    lambda_cons: float = 10.0
    lambda_occ: float = 0.4
    lambda_sm: float = 0.5
    alpha: float = 0.2
    beta: float = 0.85

    def __post_init__(self):
        for name in ("lambda_cons", "lambda_occ", "lambda_sm", "alpha", "beta"):
            if getattr(self, name) < 0:
                raise ContractError(f"LossWeights: {name} must be non-negative")
        if not 0.0 <= self.beta <= 1.0:
            raise ContractError(f"LossWeights: beta must lie in [0, 1], got {self.beta}")


@dataclass
class LossBreakdown:
    """Scalar record of one training step; total recomposes per the joint loss."""

    seg: float = 0.0
    cons: float = 0.0
    occ: float = 0.0
    sm: float = 0.0
    pm: float = 0.0
    total: float = 0.0

    def recompose(self, w):
        return (self.seg + w.lambda_cons * self.cons + w.lambda_occ * self.occ
                + w.lambda_sm * self.sm + self.pm)


def temporal_consistency_loss(s, s_warped, o_est):
    """sum over pixels of (1 - O_est) * ||S' - S||^2 (channel-summed residual)."""
    s = as_node(s)
    s_warped = as_node(s_warped)
    if s.value.shape != s_warped.value.shape:
        raise ShapeError(f"temporal_consistency_loss: {s.value.shape} "
                         f"vs {s_warped.value.shape}")
    mask = _mask_plane(o_est)
    if mask.value.shape[:2] != s.value.shape[:2]:
        raise ShapeError(f"temporal_consistency_loss: mask {mask.value.shape[:2]} "
                         f"vs features {s.value.shape[:2]}")
    diff = sub(s_warped, s)
    residual = channel_sum(mul(diff, diff))
    return reduce_sum(mul(sub(1.0, mask), residual))


def temporal_consistency_pair(s_a, s_b, flow_fwd, flow_bwd, o_est_a, o_est_b):
    """Both warping constraints of a frame pair, summed.

    flow_fwd warps the second frame's features onto the first (and is masked
    by the first frame's occlusion estimate), and vice versa.
    """
    warped_to_a = warp_bilinear(s_b, flow_fwd)
    warped_to_b = warp_bilinear(s_a, flow_bwd)
    return (temporal_consistency_loss(s_a, warped_to_a, o_est_a)
            + temporal_consistency_loss(s_b, warped_to_b, o_est_b))


def ssim_map(a, b):
    """Per-pixel, per-channel SSIM over 3x3 uniform windows.

    Window statistics come from an edge-replicating box filter, so identical
    inputs score exactly 1 and constant inputs reduce to the luminance term
    everywhere, borders included.  Output lies in [-1, 1].
    """
    a = as_node(a)
    b = as_node(b)
    if a.value.shape != b.value.shape:
        raise ShapeError(f"ssim_map: {a.value.shape} vs {b.value.shape}")
    mu_a = box_mean3(a)
    mu_b = box_mean3(b)
    mu_ab = mul(mu_a, mu_b)
    mu_aa = mul(mu_a, mu_a)
    mu_bb = mul(mu_b, mu_b)
    var_a = sub(box_mean3(mul(a, a)), mu_aa)
    var_b = sub(box_mean3(mul(b, b)), mu_bb)
    cov = sub(box_mean3(mul(a, b)), mu_ab)
    num = mul(mul(mu_ab, 2.0) + SSIM_C1, mul(cov, 2.0) + SSIM_C2)
    den = mul(mu_aa + mu_bb + SSIM_C1, var_a + var_b + SSIM_C2)
    return div(num, den)


def appearance_error_map(i, i_warped, beta):
    """Per-pixel loss map G: beta*(1-SSIM)/2 + (1-beta)*L1, channel-averaged."""
    ssim = ssim_map(i, i_warped)
    dissim = mul(sub(1.0, ssim), 0.5)
    l1 = absval(sub(i, i_warped))
    return channel_mean(mul(dissim, beta) + mul(l1, 1.0 - beta))


def photometric_loss(i, i_warped, o_est, o_error, beta=0.85):
    """sum over pixels of G(I, I') * (1 + O_error - O_est) at one scale."""
    if not 0.0 <= beta <= 1.0:
        raise ContractError(f"photometric_loss: beta must lie in [0, 1], got {beta}")
    i = as_node(i)
    i_warped = as_node(i_warped)
    g = appearance_error_map(i, i_warped, beta)
    weight = sub(1.0 + _mask_plane(o_error), _mask_plane(o_est))
    if weight.value.shape[:2] != g.value.shape[:2]:
        raise ShapeError(f"photometric_loss: masks {weight.value.shape[:2]} "
                         f"vs image {g.value.shape[:2]}")
    return reduce_sum(mul(g, weight))


def smoothness_loss(flow, image):
    """Edge-aware first-order flow smoothness at one scale.

    Forward differences of each flow channel along each axis, weighted by
    exp(-|dI|) where |dI| is the channel-mean absolute image gradient along
    the same axis.  The image acts as a constant.
    """
    flow = as_node(flow)
    image = image.value if isinstance(image, Node) else np.asarray(image)
    h, w = flow.value.shape[:2]
    if image.shape[:2] != (h, w):
        raise ShapeError(f"smoothness_loss: image {image.shape[:2]} vs flow {(h, w)}")
    total = None
    for axis in (0, 1):
        if axis == 0:
            df = sub(crop(flow, 1, h, 0, w), crop(flow, 0, h - 1, 0, w))
            di = image[1:, :] - image[:-1, :]
        else:
            df = sub(crop(flow, 0, h, 1, w), crop(flow, 0, h, 0, w - 1))
            di = image[:, 1:] - image[:, :-1]
        edge = np.exp(-np.abs(di).mean(axis=2, keepdims=True))
        term = reduce_sum(mul(channel_sum(absval(df)), as_node(edge)))
        total = term if total is None else total + term
    return total


def segmentation_loss(logits, gt, ignore_label=None):
    """Pixel-summed negative log likelihood of the true class.

    gt is an (H, W) integer label grid; pixels equal to ignore_label
    contribute nothing.  Labels outside [0, K) raise.
    """
    logits = as_node(logits)
    lv = logits.value
    h, w, k = lv.shape
    gt = np.asarray(gt)
    if gt.shape != (h, w):
        raise ShapeError(f"segmentation_loss: labels {gt.shape} vs logits {(h, w)}")
    valid = np.ones((h, w), dtype=bool) if ignore_label is None else (gt != ignore_label)
    labels = gt.copy()
    labels[~valid] = 0
    if labels.min() < 0 or labels.max() >= k:
        raise DataError(f"segmentation_loss: labels outside [0, {k})")

    shifted = lv - lv.max(axis=2, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=2, keepdims=True))
    logp = shifted - logz
    ys, xs = np.nonzero(valid)
    out = np.array(-logp[ys, xs, labels[ys, xs]].sum()).reshape(1, 1, 1)

    def vjp(g):
        softmax = np.exp(logp)
        gl = softmax.copy()
        gl[ys, xs, labels[ys, xs]] -= 1.0
        gl[~valid] = 0.0
        return (gl * g.ravel()[0],)

    return Node(out, (logits,), vjp)


def joint_loss(parts, w):
    """Weighted sum of the loss parts.

    parts maps {"seg", "cons", "occ", "sm", "pm"} to scalar nodes; "seg" may
    be absent (unlabeled pair) and then contributes zero.  Returns the scalar
    node and a float breakdown.
    """
    for name in ("cons", "occ", "sm", "pm"):
        if name not in parts:
            raise ContractError(f"joint_loss: missing part {name!r}")
    cons, occ, sm, pm = parts["cons"], parts["occ"], parts["sm"], parts["pm"]
    total = mul(cons, w.lambda_cons) + mul(occ, w.lambda_occ) + mul(sm, w.lambda_sm) + pm
    seg = parts.get("seg")
    if seg is not None:
        total = total + seg
    breakdown = LossBreakdown(
        seg=seg.value.item() if seg is not None else 0.0,
        cons=cons.value.item(), occ=occ.value.item(),
        sm=sm.value.item(), pm=pm.value.item(), total=total.value.item())
    return total, breakdown


def scalar_zero():
    return as_node(0.0)
