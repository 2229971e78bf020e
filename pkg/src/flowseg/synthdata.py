"""Synthetic two-frame scenes with exact ground truth, plus EPE/mIoU metrics.

A scene is a textured background plus a few textured rigid shapes, each
translating by its own integer or half-integer displacement proportional to
the frame gap dt.  Flow, occlusion, and segmentation ground truth come from
the exact geometry, not from resampling, so the generated occlusion can
independently validate the range-map construction.

Textures live on the 1/255 grid, so integer-displacement frames are exact
8-bit images and the ground-truth warp reproduces frame a bit-for-bit on
non-occluded pixels.  For half-integer displacements the visible part of
frame a is defined as the ground-truth warp of frame b, which preserves the
fixed-point property in memory (8-bit frame files lose it to quantization).
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from . import fileio
from .errors import ConfigError, ShapeError
from .occlusion import OcclusionMask
from .warp import BACKWARD, FORWARD, FlowField, warp_values

MARGIN = 8
MAX_DISPLACEMENT = 5.0


@dataclass
class SceneSample:
    frame_a: np.ndarray
    frame_b: np.ndarray
    gt_flow_fwd: FlowField
    gt_flow_bwd: FlowField
    gt_occ_a: OcclusionMask
    gt_occ_b: OcclusionMask
    gt_seg_a: np.ndarray
    gt_seg_b: np.ndarray
    labeled: bool
    dt: int


@dataclass
class Metrics:
    epe_all: float
    epe_noc: float | None
    miou: float
    per_class_iou: list


class _Shape:
    def __init__(self, kind, params, velocity, class_id):
        self.kind = kind
        self.params = params
        self.velocity = velocity
        self.class_id = class_id
        self.texture = None

    def inside(self, xs, ys, disp):
        """Membership of continuous points, with the shape moved by disp."""
        x = xs - disp[0]
        y = ys - disp[1]
        if self.kind == "rect":
            cx, cy, hw, hh = self.params
            return (np.abs(x - cx) <= hw) & (np.abs(y - cy) <= hh)
        cx, cy, r = self.params
        return (x - cx) ** 2 + (y - cy) ** 2 <= r * r


def _smooth_noise(rng, h, w, lo, hi):
    """Box-filtered uniform noise (2 passes), rescaled and put on the 1/255 grid."""
    tex = rng.uniform(size=(h, w, 3))
    for _ in range(2):
        padded = np.pad(tex, ((1, 1), (1, 1), (0, 0)), mode="edge")
        acc = np.zeros_like(tex)
        for dy in range(3):
            for dx in range(3):
                acc += padded[dy:dy + h, dx:dx + w]
        tex = acc / 9.0
    tmin, tmax = tex.min(), tex.max()
    tex = lo + (tex - tmin) * (hi - lo) / max(tmax - tmin, 1e-9)
    return np.round(tex * 255.0) / 255.0


def _sample_texture(texture, xs, ys):
    """Bilinear texture lookup; callers keep coordinates inside the padded canvas."""
    x0 = np.floor(xs).astype(np.intp)
    y0 = np.floor(ys).astype(np.intp)
    fx = (xs - x0)[:, :, None]
    fy = (ys - y0)[:, :, None]
    return ((1 - fy) * ((1 - fx) * texture[y0, x0] + fx * texture[y0, x0 + 1])
            + fy * ((1 - fx) * texture[y0 + 1, x0] + fx * texture[y0 + 1, x0 + 1]))


def _pick_velocity(rng, integer_only):
    grid = (-1.0, 0.0, 1.0) if integer_only else (-1.0, -0.5, 0.0, 0.5, 1.0)
    return np.array([rng.choice(grid), rng.choice(grid)])


def generate_scene(seed, h, w, k, dt, *, integer_only=False, static=False,
                   max_shapes=3):
    """Build one frame pair with exact flow/occlusion/segmentation truth."""
    if h % 8 or w % 8:
        raise ConfigError(f"generate_scene: dims {h}x{w} must be divisible by 8")
    if k < 2:
        raise ConfigError(f"generate_scene: need at least 2 classes, got {k}")
    if not 1 <= dt <= 5:
        raise ConfigError(f"generate_scene: dt must lie in [1, 5], got {dt}")
    rng = np.random.default_rng(seed)

    bg_texture = _smooth_noise(rng, h + 2 * MARGIN, w + 2 * MARGIN, 0.1, 0.55)
    bg_velocity = np.zeros(2) if static else _pick_velocity(rng, integer_only)

    n_shapes = int(rng.integers(1, min(max_shapes, k - 1) + 1))
    shapes = []
    for i in range(n_shapes):
        kind = "rect" if rng.uniform() < 0.5 else "disk"
        cx = rng.uniform(0.2 * w, 0.8 * w)
        cy = rng.uniform(0.2 * h, 0.8 * h)
        if kind == "rect":
            params = (cx, cy, rng.uniform(3, w / 5), rng.uniform(3, h / 5))
        else:
            params = (cx, cy, rng.uniform(3, min(h, w) / 5))
        velocity = np.zeros(2) if static else _pick_velocity(rng, integer_only)
        shape = _Shape(kind, params, velocity, 1 + i % (k - 1))
        base = _smooth_noise(rng, h + 2 * MARGIN, w + 2 * MARGIN, 0.0, 0.5)
        tint = np.zeros(3)
        tint[shape.class_id % 3] = 0.45
        tint[(shape.class_id + 1) % 3] = 0.2
        shape.texture = np.round(np.clip(base + tint, 0.0, 1.0) * 255.0) / 255.0
        shapes.append(shape)

    displacements = [bg_velocity * dt] + [s.velocity * dt for s in shapes]
    for d in displacements:
        if np.abs(d).max() > MAX_DISPLACEMENT:
            raise ConfigError(f"generate_scene: displacement {d} exceeds "
                              f"{MAX_DISPLACEMENT} px")

    xs = np.arange(w, dtype=np.float64)[None, :].repeat(h, axis=0)
    ys = np.arange(h, dtype=np.float64)[:, None].repeat(w, axis=1)

    def surface_ids(px, py, at_b):
        ids = np.zeros(px.shape, dtype=np.intp)
        for i, s in enumerate(shapes):
            disp = displacements[i + 1] if at_b else (0.0, 0.0)
            ids[s.inside(px, py, disp)] = i + 1
        return ids

    def render(at_b):
        frame = np.empty((h, w, 3))
        for sid in range(n_shapes + 1):
            disp = displacements[sid] if at_b else np.zeros(2)
            texture = bg_texture if sid == 0 else shapes[sid - 1].texture
            values = _sample_texture(texture, xs + MARGIN - disp[0], ys + MARGIN - disp[1])
            mask = surf == sid
            frame[mask] = values[mask]
        return frame

    surf = surface_ids(xs, ys, at_b=False)
    surf_a = surf
    frame_a = render(at_b=False)
    surf = surface_ids(xs, ys, at_b=True)
    surf_b = surf
    frame_b = render(at_b=True)

    disp_arr = np.stack(displacements)  # (n+1, 2)
    flow_fwd = disp_arr[surf_a]
    flow_bwd = -disp_arr[surf_b]

    # a pixel is occluded when its correspondent leaves the frame or lands on
    # a different surface
    qx = xs + flow_fwd[:, :, 0]
    qy = ys + flow_fwd[:, :, 1]
    out_a = (qx < 0) | (qx > w - 1) | (qy < 0) | (qy > h - 1)
    covered_a = surface_ids(qx, qy, at_b=True) != surf_a
    occ_a = (out_a | covered_a).astype(np.float64)

    px = xs + flow_bwd[:, :, 0]
    py = ys + flow_bwd[:, :, 1]
    out_b = (px < 0) | (px > w - 1) | (py < 0) | (py > h - 1)
    covered_b = surface_ids(px, py, at_b=False) != surf_b
    occ_b = (out_b | covered_b).astype(np.float64)

    gt_flow_fwd = FlowField(flow_fwd, FORWARD)
    if not integer_only and not static:
        # half-integer motion: define visible content of frame a as the exact
        # warp of frame b so the fixed-point property holds in memory
        warped = warp_values(frame_b, flow_fwd)
        visible = occ_a == 0.0
        frame_a[visible] = warped[visible]

    seg = np.array([0] + [s.class_id for s in shapes], dtype=np.int64)
    return SceneSample(
        frame_a=frame_a, frame_b=frame_b,
        gt_flow_fwd=gt_flow_fwd,
        gt_flow_bwd=FlowField(flow_bwd, BACKWARD),
        gt_occ_a=OcclusionMask(occ_a, "hard"),
        gt_occ_b=OcclusionMask(occ_b, "hard"),
        gt_seg_a=seg[surf_a], gt_seg_b=seg[surf_b],
        labeled=True, dt=dt)


def make_dataset(seed, count, h, w, k, *, labeled_fraction=0.5,
                 integer_only=False, dt_range=(1, 5)):
    """Deterministic list of scenes with an exact labeled/unlabeled split."""
    rng = np.random.default_rng(seed)
    n_labeled = int(round(count * labeled_fraction))
    labeled_flags = np.zeros(count, dtype=bool)
    labeled_flags[:n_labeled] = True
    rng.shuffle(labeled_flags)
    scenes = []
    for i in range(count):
        dt = int(rng.integers(dt_range[0], dt_range[1] + 1))
        scene = generate_scene(int(rng.integers(0, 2 ** 62)), h, w, k, dt,
                               integer_only=integer_only)
        scene.labeled = bool(labeled_flags[i])
        scenes.append(scene)
    return scenes


# ---------------------------------------------------------------------------
# metrics


def epe(pred, gt, occ=None):
    """Mean end-point error over all pixels and over non-occluded pixels.

    Without a mask the non-occluded mean equals the overall mean; a mask that
    occludes everything yields None for the non-occluded variant.
    """
    pv = pred.data if isinstance(pred, FlowField) else np.asarray(pred)
    gv = gt.data if isinstance(gt, FlowField) else np.asarray(gt)
    if pv.shape != gv.shape:
        raise ShapeError(f"epe: {pv.shape} vs {gv.shape}")
    err = np.linalg.norm(pv - gv, axis=2)
    epe_all = float(err.mean())
    if occ is None:
        return epe_all, epe_all
    visible = (occ.values if isinstance(occ, OcclusionMask) else np.asarray(occ)) == 0.0
    if not visible.any():
        return epe_all, None
    return epe_all, float(err[visible].mean())


def miou(pred_labels, gt_labels, k):
    """Per-class intersection over union; classes absent from both sides are
    excluded from the mean."""
    pred_labels = np.asarray(pred_labels)
    gt_labels = np.asarray(gt_labels)
    if pred_labels.shape != gt_labels.shape:
        raise ShapeError(f"miou: {pred_labels.shape} vs {gt_labels.shape}")
    per_class = []
    present = []
    for c in range(k):
        p = pred_labels == c
        g = gt_labels == c
        union = np.logical_or(p, g).sum()
        if union == 0:
            per_class.append(float("nan"))
            continue
        iou = float(np.logical_and(p, g).sum() / union)
        per_class.append(iou)
        present.append(iou)
    return (float(np.mean(present)) if present else float("nan")), per_class


# ---------------------------------------------------------------------------
# on-disk scenes


def save_scene(directory, scene):
    os.makedirs(directory, exist_ok=True)
    join = lambda name: os.path.join(directory, name)
    fileio.write_ppm(join("frame_a.ppm"), scene.frame_a)
    fileio.write_ppm(join("frame_b.ppm"), scene.frame_b)
    fileio.write_flo(join("flow_fwd.flo"), scene.gt_flow_fwd)
    fileio.write_flo(join("flow_bwd.flo"), scene.gt_flow_bwd)
    fileio.write_mask_pgm(join("occ_a.pgm"), scene.gt_occ_a)
    fileio.write_mask_pgm(join("occ_b.pgm"), scene.gt_occ_b)
    fileio.write_pgm(join("seg_a.pgm"), scene.gt_seg_a)
    fileio.write_pgm(join("seg_b.pgm"), scene.gt_seg_b)
    with open(join("meta.txt"), "w", encoding="utf-8") as fh:
        fh.write(f"labeled={int(scene.labeled)}\ndt={scene.dt}\n")


def load_scene(directory):
    join = lambda name: os.path.join(directory, name)
    meta = {}
    with open(join("meta.txt"), encoding="utf-8") as fh:
        for line in fh:
            key, _, value = line.strip().partition("=")
            meta[key] = value
    return SceneSample(
        frame_a=fileio.read_ppm(join("frame_a.ppm")),
        frame_b=fileio.read_ppm(join("frame_b.ppm")),
        gt_flow_fwd=FlowField(fileio.read_flo(join("flow_fwd.flo")), FORWARD),
        gt_flow_bwd=FlowField(fileio.read_flo(join("flow_bwd.flo")), BACKWARD),
        gt_occ_a=OcclusionMask(fileio.read_mask_pgm(join("occ_a.pgm")), "hard"),
        gt_occ_b=OcclusionMask(fileio.read_mask_pgm(join("occ_b.pgm")), "hard"),
        gt_seg_a=fileio.read_pgm(join("seg_a.pgm")).astype(np.int64),
        gt_seg_b=fileio.read_pgm(join("seg_b.pgm")).astype(np.int64),
        labeled=bool(int(meta.get("labeled", "1"))),
        dt=int(meta.get("dt", "1")))


def save_dataset(directory, scenes):
    os.makedirs(directory, exist_ok=True)
    for i, scene in enumerate(scenes):
        save_scene(os.path.join(directory, f"scene_{i:04d}"), scene)


def load_dataset(directory):
    names = sorted(n for n in os.listdir(directory) if n.startswith("scene_"))
    if not names:
        raise ConfigError(f"load_dataset: no scenes under {directory}")
    return [load_scene(os.path.join(directory, n)) for n in names]
