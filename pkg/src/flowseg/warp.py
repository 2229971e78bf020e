"""Differentiable bilinear warping by flow fields, and flow rescaling.

Convention: a flow field is an (H, W, 2) grid of pixel displacements with
channel 0 = dx (horizontal, along width) and channel 1 = dy (vertical).
Arrays are indexed [y, x], so code that reads a flow as (row, col, component)
must swap: component 0 moves the column index, component 1 the row index.
Warping the *other* frame into this one uses the flow that starts at this
frame: ``warp_bilinear(frame_b, flow_a_to_b)`` reconstructs frame ``a``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import counters
from .errors import ContractError, ShapeError
from .tensor import Node, as_node, resize_bilinear, resize_bilinear_values

FORWARD = "forward"
BACKWARD = "backward"


@dataclass
class FlowField:
    """Pixel-unit displacement grid with a direction tag."""

    data: np.ndarray  # (H, W, 2)
    direction: str = FORWARD

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 3 or self.data.shape[2] != 2:
            raise ShapeError(f"FlowField: expected (H, W, 2), got {self.data.shape}")
        if self.direction not in (FORWARD, BACKWARD):
            raise ContractError(f"FlowField: bad direction tag {self.direction!r}")

    @property
    def shape(self):
        return self.data.shape[:2]


def _sample_coords(flow_values):
    h, w = flow_values.shape[:2]
    xs = np.arange(w, dtype=flow_values.dtype)[None, :] + flow_values[:, :, 0]
    ys = np.arange(h, dtype=flow_values.dtype)[:, None] + flow_values[:, :, 1]
    return xs, ys


def _bilinear_gather(source, xs, ys):
    """Sample source at (xs, ys) with clamp-to-border; returns value + stencil info."""
    h, w = source.shape[:2]
    xc = np.clip(xs, 0.0, w - 1.0)
    yc = np.clip(ys, 0.0, h - 1.0)
    x0 = np.floor(xc).astype(np.intp)
    y0 = np.floor(yc).astype(np.intp)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = (xc - x0)[:, :, None]
    fy = (yc - y0)[:, :, None]
    v00 = source[y0, x0]
    v01 = source[y0, x1]
    v10 = source[y1, x0]
    v11 = source[y1, x1]
    out = ((1 - fy) * ((1 - fx) * v00 + fx * v01)
           + fy * ((1 - fx) * v10 + fx * v11))
    return out, (x0, x1, y0, y1, fx, fy, v00, v01, v10, v11)


def warp_values(source, flow_values):
    """Plain-array warp (no gradient tracking)."""
    xs, ys = _sample_coords(flow_values)
    out, _ = _bilinear_gather(source, xs, ys)
    return out


def warp_bilinear(source, flow):
    """Warp ``source`` by ``flow``: output(p) = bilinear(source, p + flow(p)).

    Out-of-range sampling coordinates clamp to the image border.  The backward
    pass produces exact gradients for both the source values and the flow; the
    flow gradient is the right-continuous subgradient, and it vanishes where
    the unclamped coordinate left the image (the clamp is flat there).
    """
    source = as_node(source)
    if isinstance(flow, FlowField):
        flow = as_node(flow.data)
    else:
        flow = as_node(flow)
    sv, fv = source.value, flow.value
    if fv.ndim != 3 or fv.shape[2] != 2:
        raise ShapeError(f"warp_bilinear: flow must be (H, W, 2), got {fv.shape}")
    if sv.shape[:2] != fv.shape[:2]:
        raise ShapeError(f"warp_bilinear: source {sv.shape[:2]} vs flow {fv.shape[:2]}")
    counters.bump("warp")

    h, w = sv.shape[:2]
    xs, ys = _sample_coords(fv)
    out, (x0, x1, y0, y1, fx, fy, v00, v01, v10, v11) = _bilinear_gather(sv, xs, ys)
    # clamp is flat outside [0, edge); right-continuity picks the half-open side
    in_x = ((xs >= 0.0) & (xs < w - 1.0))[:, :, None]
    in_y = ((ys >= 0.0) & (ys < h - 1.0))[:, :, None]

    def vjp(g):
        w00 = (1 - fy) * (1 - fx)
        w01 = (1 - fy) * fx
        w10 = fy * (1 - fx)
        w11 = fy * fx
        idx = np.concatenate([(y0 * w + x0).ravel(), (y0 * w + x1).ravel(),
                              (y1 * w + x0).ravel(), (y1 * w + x1).ravel()])
        c = sv.shape[2]
        vals = np.concatenate([(g * w00).reshape(-1, c), (g * w01).reshape(-1, c),
                               (g * w10).reshape(-1, c), (g * w11).reshape(-1, c)])
        if c <= 4:
            gsrc = np.empty_like(sv)
            for ch in range(c):
                gsrc[:, :, ch] = np.bincount(idx, weights=vals[:, ch],
                                             minlength=h * w).reshape(h, w)
        else:
            gsrc = np.zeros((h * w, c), dtype=sv.dtype)
            np.add.at(gsrc, idx, vals)
            gsrc = gsrc.reshape(sv.shape)
        dx = ((1 - fy) * (v01 - v00) + fy * (v11 - v10)) * in_x
        dy = ((1 - fx) * (v10 - v00) + fx * (v11 - v01)) * in_y
        gflow = np.stack([(g * dx).sum(axis=2), (g * dy).sum(axis=2)], axis=2)
        return (gsrc, gflow)

    return Node(out, (source, flow), vjp)


def _check_pow2_ratio(src, dst, what):
    lo, hi = (src, dst) if src < dst else (dst, src)
    ratio, rem = divmod(hi, lo)
    if rem or ratio & (ratio - 1):
        raise ContractError(f"rescale_flow: {what} {src} -> {dst} is not a power-of-two ratio")


def rescale_flow(flow, target_h, target_w):
    """Resample a flow field and rescale displacements to target-pixel units."""
    h, w = flow.shape
    _check_pow2_ratio(h, target_h, "height")
    _check_pow2_ratio(w, target_w, "width")
    if (target_h, target_w) == (h, w):
        return FlowField(flow.data.copy(), flow.direction)
    out = resize_bilinear_values(flow.data, target_h, target_w)
    out = out * np.array([target_w / w, target_h / h], dtype=out.dtype)
    return FlowField(out, flow.direction)


def rescale_flow_node(flow, target_h, target_w):
    """Differentiable variant of rescale_flow for predicted (on-tape) flows."""
    h, w = flow.value.shape[:2]
    _check_pow2_ratio(h, target_h, "height")
    _check_pow2_ratio(w, target_w, "width")
    if (target_h, target_w) == (h, w):
        return flow
    resized = resize_bilinear(flow, target_h, target_w)
    scale = np.empty_like(resized.value)
    scale[:, :, 0] = target_w / w
    scale[:, :, 1] = target_h / h
    return resized * as_node(scale)
