"""Toy-scale dual-branch network: shared encoder, segmentation decoder, and a
coarse-to-fine flow decoder with a correlation layer and per-level occlusion
heads.

The two branches consume one feature pyramid produced by a single encoder
parameter set.  Segmentation inference never calls into the flow decoder,
the correlation layer, or the warping sampler, so deleting the flow branch
from a checkpoint cannot change segmentation output.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from . import counters
from .errors import ContractError, DataError, ShapeError
from .tensor import (Node, Parameter, as_node, clamp, concat_channels, conv2d,
                     crop, max0, mul, sigmoid, stack_rows, upsample_bilinear2)

CHECKPOINT_MAGIC = b"EFCK"
CHECKPOINT_VERSION = 1
OCC_EPS = 1e-7
OCC_HEAD_CHANNELS = 32
DECODER_CHANNELS = 32


@dataclass
class ModelConfig:
    base_channels: int = 16
    encoder_levels: int = 3
    num_classes: int = 4
    correlation_max_disp: int = 4
    seed: int = 0

    def __post_init__(self):
        if self.encoder_levels < 1:
            raise ContractError("ModelConfig: encoder_levels must be >= 1")
        if self.correlation_max_disp < 1:
            raise ContractError("ModelConfig: correlation_max_disp must be >= 1")
        if self.num_classes < 1:
            raise ContractError("ModelConfig: num_classes must be >= 1")


@dataclass
class SegMap:
    """Class probabilities with the derived hard labels (lowest index wins ties)."""

    probs: np.ndarray  # (H, W, K)
    labels: np.ndarray  # (H, W) int
    logits: Node | None = field(default=None, repr=False)

    @classmethod
    def from_logits(cls, logits):
        lv = logits.value if isinstance(logits, Node) else np.asarray(logits)
        shifted = lv - lv.max(axis=2, keepdims=True)
        e = np.exp(shifted)
        probs = e / e.sum(axis=2, keepdims=True)
        labels = probs.argmax(axis=2)
        return cls(probs=probs, labels=labels,
                   logits=logits if isinstance(logits, Node) else None)


def _zero_gap(x, h, gap):
    """Zero the gap rows of a two-grid stack; gradient is masked the same way."""
    values = x.value.copy()
    values[h:h + gap] = 0.0

    def vjp(g):
        gg = g.copy()
        gg[h:h + gap] = 0.0
        return (gg,)

    return Node(values, (x,), vjp)


def correlate(f1, f2, max_disp):
    """Channel-mean dot products over all displacements in [-d, d]^2.

    Output channel (dy+d)*(2d+1) + (dx+d) holds <f1(p), f2(p+(dx,dy))>/C with
    f2 clamped to the border.  Differentiable with respect to both inputs.
    """
    f1 = as_node(f1)
    f2 = as_node(f2)
    v1, v2 = f1.value, f2.value
    if v1.shape != v2.shape:
        raise ShapeError(f"correlate: {v1.shape} vs {v2.shape}")
    counters.bump("correlate")
    h, w, c = v1.shape
    d = max_disp
    side = 2 * d + 1
    # clamping the lookup to the border is the same as gathering from an
    # edge-replicated pad, which turns every displacement into a plain slice
    v2p = np.pad(v2, ((d, d), (d, d), (0, 0)), mode="edge")
    out = np.empty((h, w, side * side), dtype=v1.dtype)
    for dy in range(side):
        for dx in range(side):
            shifted = v2p[dy:dy + h, dx:dx + w]
            out[:, :, dy * side + dx] = (v1 * shifted).sum(axis=2) / c

    def vjp(g):
        g1 = np.zeros_like(v1)
        ext = np.zeros_like(v2p)
        gc = g / c
        for dy in range(side):
            for dx in range(side):
                gk = gc[:, :, dy * side + dx][:, :, None]
                g1 += gk * v2p[dy:dy + h, dx:dx + w]
                ext[dy:dy + h, dx:dx + w] += gk * v1
        # adjoint of the edge-replicated pad: fold borders back in
        rows = ext[d:d + h].copy()
        if d:
            rows[0] += ext[:d].sum(axis=0)
            rows[-1] += ext[d + h:].sum(axis=0)
        g2 = rows[:, d:d + w]
        if d:
            g2[:, 0] += rows[:, :d].sum(axis=1)
            g2[:, -1] += rows[:, d + w:].sum(axis=1)
        return (g1, g2)

    return Node(out, (f1, f2), vjp)


# ---------------------------------------------------------------------------
# parameter construction


def _conv_param(params, rng, name, k, cin, cout, weight_scale=1.0):
    fan_in = k * k * cin
    bound = np.sqrt(1.0 / fan_in)
    w = rng.uniform(-bound, bound, size=(k, k, cin, cout)) * weight_scale
    b = np.zeros((1, 1, cout))
    params[f"{name}.w"] = Parameter(f"{name}.w", Node(w))
    params[f"{name}.b"] = Parameter(f"{name}.b", Node(b))


def init_parameters(cfg):
    """Deterministic parameter set for a config; same seed, same bits.

    Conv weights ~ uniform(-sqrt(1/fan_in), sqrt(1/fan_in)), biases zero; the
    per-level flow prediction weights are shrunk by 0.01 so the initial flow
    is approximately zero.
    """
    rng = np.random.default_rng(cfg.seed)
    params: dict[str, Parameter] = {}
    chans = [3] + [cfg.base_channels * (1 << i) for i in range(cfg.encoder_levels)]
    for lvl in range(1, cfg.encoder_levels + 1):
        _conv_param(params, rng, f"enc{lvl}.c1", 3, chans[lvl - 1], chans[lvl])
        _conv_param(params, rng, f"enc{lvl}.c2", 3, chans[lvl], chans[lvl])
    deep = chans[-1]
    _conv_param(params, rng, "seg.c1", 3, deep, max(deep // 2, cfg.num_classes))
    _conv_param(params, rng, "seg.c2", 3, max(deep // 2, cfg.num_classes), cfg.num_classes)

    side = 2 * cfg.correlation_max_disp + 1
    dec = DECODER_CHANNELS
    for lvl in range(cfg.encoder_levels, 0, -1):
        if lvl == cfg.encoder_levels:
            cin = chans[lvl] + side * side
        else:
            cin = chans[lvl] + dec + 2
        _conv_param(params, rng, f"flow{lvl}.c1", 3, cin, dec)
        _conv_param(params, rng, f"flow{lvl}.c2", 3, dec, dec)
        _conv_param(params, rng, f"flow{lvl}.pred", 3, dec, 2, weight_scale=0.01)
        _conv_param(params, rng, f"flow{lvl}.occ1", 3, dec, OCC_HEAD_CHANNELS)
        _conv_param(params, rng, f"flow{lvl}.occ2", 3, OCC_HEAD_CHANNELS, 1)
    return params


@dataclass
class PairOutputs:
    feats_a: list
    feats_b: list
    seg_a: SegMap
    seg_b: SegMap
    flows_fwd: list  # index s = flow at H/2^s, pixel units of that scale
    flows_bwd: list
    occs_a: list  # (H/2^s, W/2^s, 1) nodes, strictly inside (0, 1)
    occs_b: list


class Model:
    """Parameter container plus the forward graphs of both branches."""

    def __init__(self, cfg):
        self.cfg = cfg
        self.params = init_parameters(cfg)

    # -- plumbing -----------------------------------------------------------

    def parameters(self):
        return self.params

    def parameter_groups(self):
        groups = {"encoder": [], "seg": [], "flow": []}
        for name in self.params:
            if name.startswith("enc"):
                groups["encoder"].append(name)
            elif name.startswith("seg"):
                groups["seg"].append(name)
            else:
                groups["flow"].append(name)
        return groups

    def cast(self, dtype):
        for p in self.params.values():
            p.node.value = p.node.value.astype(dtype)
            p.node.grad = np.zeros_like(p.node.value)
        return self

    def _conv(self, name, x, stride=1, relu=True):
        out = conv2d(x, self.params[f"{name}.w"].node, self.params[f"{name}.b"].node,
                     stride=stride, padding="same")
        return max0(out) if relu else out

    def _conv_pair(self, name, x, h, gap, stride=1, relu=True):
        """Stacked-pair convolution; the gap is re-zeroed afterwards so that
        rows adjacent to it keep seeing zero-padding context (a conv smears
        image content one row into the gap, which the next conv must not
        read)."""
        out = self._conv(name, x, stride=stride, relu=relu)
        if stride == 2:
            h //= 2
            gap //= 2
        return _zero_gap(out, h, gap), h, gap

    # -- branches -------------------------------------------------------------

    def encode(self, image):
        """Shared-encoder pyramid; level l sits at H/2^l."""
        image = as_node(image)
        h, w = image.value.shape[:2]
        div = 1 << self.cfg.encoder_levels
        if h % div or w % div:
            raise ShapeError(f"encode: {h}x{w} not divisible by 2^{self.cfg.encoder_levels}")
        feats = []
        x = image
        for lvl in range(1, self.cfg.encoder_levels + 1):
            x = self._conv(f"enc{lvl}.c1", x, stride=2)
            x = self._conv(f"enc{lvl}.c2", x)
            feats.append(x)
        return feats

    def decode_segmentation(self, feats):
        x = self._conv("seg.c1", feats[-1])
        x = self._conv("seg.c2", x, relu=False)
        for _ in range(self.cfg.encoder_levels):
            x = upsample_bilinear2(x)
        return SegMap.from_logits(x)

    def decode_flow(self, feats_i, feats_j, corr):
        """Coarse-to-fine flow and occlusion pyramids for one direction.

        Each level refines the 2x-upsampled (and 2x-scaled) coarser flow with
        a predicted residual and emits a soft occlusion map through a small
        sigmoid head.  Index 0 of the returned lists is input resolution.
        """
        counters.bump("decode_flow")
        levels = self.cfg.encoder_levels
        flows = [None] * (levels + 1)
        occs = [None] * (levels + 1)
        dec_feat = None
        flow = None
        for lvl in range(levels, 0, -1):
            if lvl == levels:
                x = concat_channels([feats_i[lvl - 1], corr])
            else:
                up_flow = mul(upsample_bilinear2(flow), 2.0)
                dec_feat = upsample_bilinear2(dec_feat)
                x = concat_channels([feats_i[lvl - 1], dec_feat, up_flow])
            x = self._conv(f"flow{lvl}.c1", x)
            dec_feat = self._conv(f"flow{lvl}.c2", x)
            residual = self._conv(f"flow{lvl}.pred", dec_feat, relu=False)
            flow = residual if lvl == levels else residual + up_flow
            occ = self._conv(f"flow{lvl}.occ1", dec_feat)
            occ = self._conv(f"flow{lvl}.occ2", occ, relu=False)
            occ = clamp(sigmoid(occ), OCC_EPS, 1.0 - OCC_EPS)
            flows[lvl] = flow
            occs[lvl] = occ
        flows[0] = mul(upsample_bilinear2(flows[1]), 2.0)
        occs[0] = clamp(upsample_bilinear2(occs[1]), OCC_EPS, 1.0 - OCC_EPS)
        return flows, occs

    # -- paired fast paths ----------------------------------------------------
    #
    # Both frames (and both flow directions) run through the same weights, so
    # the paired paths stack the two inputs vertically with a zero gap and
    # push them through one convolution each.  The gap shrinks with the
    # pyramid; it starts at 2^(levels+1) so every level keeps at least the
    # k-1 rows of separation that make the stacked result bit-identical to
    # two separate passes.

    def _base_gap(self):
        return 2 << self.cfg.encoder_levels

    def encode_pair(self, image_a, image_b):
        image_a = as_node(image_a)
        image_b = as_node(image_b)
        h, w = image_a.value.shape[:2]
        div = 1 << self.cfg.encoder_levels
        if h % div or w % div:
            raise ShapeError(f"encode_pair: {h}x{w} not divisible by 2^{self.cfg.encoder_levels}")
        if image_b.value.shape != image_a.value.shape:
            raise ShapeError("encode_pair: frame shapes differ")
        gap = self._base_gap()
        x = stack_rows([image_a, image_b], gap)
        hl = h
        feats_a, feats_b = [], []
        for lvl in range(1, self.cfg.encoder_levels + 1):
            x, hl, gap = self._conv_pair(f"enc{lvl}.c1", x, hl, gap, stride=2)
            x, hl, gap = self._conv_pair(f"enc{lvl}.c2", x, hl, gap)
            wl = x.value.shape[1]
            feats_a.append(crop(x, 0, hl, 0, wl))
            feats_b.append(crop(x, hl + gap, 2 * hl + gap, 0, wl))
        return feats_a, feats_b

    def decode_segmentation_pair(self, feats_a, feats_b):
        gap = self._base_gap() >> self.cfg.encoder_levels
        h = feats_a[-1].value.shape[0]
        x = stack_rows([feats_a[-1], feats_b[-1]], gap)
        x, h, gap = self._conv_pair("seg.c1", x, h, gap)
        x, h, gap = self._conv_pair("seg.c2", x, h, gap, relu=False)
        w = x.value.shape[1]
        logits = []
        for piece in (crop(x, 0, h, 0, w), crop(x, h + gap, 2 * h + gap, 0, w)):
            for _ in range(self.cfg.encoder_levels):
                piece = upsample_bilinear2(piece)
            logits.append(piece)
        return SegMap.from_logits(logits[0]), SegMap.from_logits(logits[1])

    def decode_flow_pair(self, feats_a, feats_b):
        """Both directions of the coarse-to-fine decoder in one stacked pass."""
        counters.bump("decode_flow")
        counters.bump("decode_flow")
        d = self.cfg.correlation_max_disp
        corr_ab = correlate(feats_a[-1], feats_b[-1], d)
        corr_ba = correlate(feats_b[-1], feats_a[-1], d)
        levels = self.cfg.encoder_levels
        n = levels + 1
        flows_fwd, flows_bwd = [None] * n, [None] * n
        occs_a, occs_b = [None] * n, [None] * n
        up_a = up_b = updec_a = updec_b = None
        for lvl in range(levels, 0, -1):
            gap = self._base_gap() >> lvl
            h = feats_a[lvl - 1].value.shape[0]
            w = feats_a[lvl - 1].value.shape[1]
            if lvl == levels:
                in_a = concat_channels([feats_a[lvl - 1], corr_ab])
                in_b = concat_channels([feats_b[lvl - 1], corr_ba])
            else:
                in_a = concat_channels([feats_a[lvl - 1], updec_a, up_a])
                in_b = concat_channels([feats_b[lvl - 1], updec_b, up_b])
            x = stack_rows([in_a, in_b], gap)
            x, h, gap = self._conv_pair(f"flow{lvl}.c1", x, h, gap)
            dec, h, gap = self._conv_pair(f"flow{lvl}.c2", x, h, gap)
            residual, _, _ = self._conv_pair(f"flow{lvl}.pred", dec, h, gap,
                                             relu=False)
            occ, _, _ = self._conv_pair(f"flow{lvl}.occ1", dec, h, gap)
            occ, _, _ = self._conv_pair(f"flow{lvl}.occ2", occ, h, gap,
                                        relu=False)
            occ = clamp(sigmoid(occ), OCC_EPS, 1.0 - OCC_EPS)
            res_a = crop(residual, 0, h, 0, w)
            res_b = crop(residual, h + gap, 2 * h + gap, 0, w)
            flow_a = res_a if lvl == levels else res_a + up_a
            flow_b = res_b if lvl == levels else res_b + up_b
            flows_fwd[lvl], flows_bwd[lvl] = flow_a, flow_b
            occs_a[lvl] = crop(occ, 0, h, 0, w)
            occs_b[lvl] = crop(occ, h + gap, 2 * h + gap, 0, w)
            if lvl > 1:
                up_a = mul(upsample_bilinear2(flow_a), 2.0)
                up_b = mul(upsample_bilinear2(flow_b), 2.0)
                dec_a = crop(dec, 0, h, 0, w)
                dec_b = crop(dec, h + gap, 2 * h + gap, 0, w)
                updec_a = upsample_bilinear2(dec_a)
                updec_b = upsample_bilinear2(dec_b)
        flows_fwd[0] = mul(upsample_bilinear2(flows_fwd[1]), 2.0)
        flows_bwd[0] = mul(upsample_bilinear2(flows_bwd[1]), 2.0)
        occs_a[0] = clamp(upsample_bilinear2(occs_a[1]), OCC_EPS, 1.0 - OCC_EPS)
        occs_b[0] = clamp(upsample_bilinear2(occs_b[1]), OCC_EPS, 1.0 - OCC_EPS)
        return flows_fwd, flows_bwd, occs_a, occs_b

    def forward_pair(self, image_a, image_b):
        feats_a, feats_b = self.encode_pair(image_a, image_b)
        flows_fwd, flows_bwd, occs_a, occs_b = self.decode_flow_pair(feats_a, feats_b)
        seg_a, seg_b = self.decode_segmentation_pair(feats_a, feats_b)
        return PairOutputs(
            feats_a=feats_a, feats_b=feats_b,
            seg_a=seg_a, seg_b=seg_b,
            flows_fwd=flows_fwd, flows_bwd=flows_bwd,
            occs_a=occs_a, occs_b=occs_b)

    def segment(self, image):
        """Single-frame segmentation inference; never touches the flow branch."""
        return self.decode_segmentation(self.encode(image))


# ---------------------------------------------------------------------------
# checkpoint format: "EFCK", version u32, count u32, then per parameter
# name_len u32, name bytes, dims u32 x 3, float64 little-endian values.
# 4-D conv kernels (k, k, cin, cout) are stored with dims (k, k, cin*cout).


def _stored_dims(shape):
    if len(shape) == 3:
        return shape
    if len(shape) == 4:
        return (shape[0], shape[1], shape[2] * shape[3])
    raise ContractError(f"checkpoint: unsupported parameter rank {len(shape)}")


def save_checkpoint(params, path):
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(params)))
        for name, p in params.items():
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            dims = _stored_dims(p.node.value.shape)
            fh.write(struct.pack("<III", *dims))
            fh.write(np.ascontiguousarray(p.node.value, dtype="<f8").tobytes())


def read_checkpoint(path):
    """Raw name -> array mapping with the stored 3-D dims."""
    with open(path, "rb") as fh:
        if fh.read(4) != CHECKPOINT_MAGIC:
            raise DataError(f"checkpoint {path}: bad magic")
        version, count = struct.unpack("<II", fh.read(8))
        if version != CHECKPOINT_VERSION:
            raise DataError(f"checkpoint {path}: unsupported version {version}")
        entries = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<I", fh.read(4))
            name = fh.read(name_len).decode("utf-8")
            dims = struct.unpack("<III", fh.read(12))
            n = dims[0] * dims[1] * dims[2]
            values = np.frombuffer(fh.read(8 * n), dtype="<f8").reshape(dims)
            entries[name] = values
    return entries


def load_checkpoint(model, path, strict=True):
    """Load parameter values; with strict=False missing entries keep their init."""
    entries = read_checkpoint(path)
    for name, p in model.params.items():
        if name not in entries:
            if strict:
                raise DataError(f"checkpoint {path}: missing parameter {name}")
            continue
        stored = entries.pop(name)
        shape = p.node.value.shape
        if tuple(stored.shape) != tuple(_stored_dims(shape)):
            raise DataError(f"checkpoint {path}: parameter {name} dims {stored.shape} "
                            f"incompatible with model shape {shape}")
        p.node.value = stored.reshape(shape).astype(p.node.value.dtype)
        p.node.grad = np.zeros_like(p.node.value)
    if entries and strict:
        raise DataError(f"checkpoint {path}: unknown parameters {sorted(entries)}")
    return model
