"""Training harness: configuration, SGD with momentum and poly decay, pair
sampling with a labeled quota, the joint training loop, evaluation, and
finite-difference gradient checking.

Mode presets reproduce the ablation rows: flow-only unsupervised learning
("ul"), occlusion estimation ("ul_oe"), the temporal consistency module
("ul_tc", "ul_oe_tc"), the full model ("efc_full"), and the segmentation-side
ladder ("baseline", "tcc_single", "tcc_om", "tcc_om_ud", "tcc_fix").
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, fields, replace

import numpy as np

from .errors import ConfigError, ContractError, NumericError
from .losses import (LossBreakdown, LossWeights, joint_loss, photometric_loss,
                     segmentation_loss, smoothness_loss,
                     temporal_consistency_pair)
from .model import Model, ModelConfig, correlate, load_checkpoint, save_checkpoint
from .occlusion import occlusion_loss, occlusion_targets_pair
from .synthdata import Metrics, epe
from .tensor import Node, as_node, backward, reduce_sum, resize_bilinear_values
from .warp import FORWARD, FlowField, rescale_flow_node, warp_bilinear, warp_values
from . import losses as losses_mod


@dataclass
class TrainConfig:
    # optimization
    base_lr: float = 0.01
    power: float = 0.9
    momentum: float = 0.9
    weight_decay: float = 1e-4
    max_iters: int = 2000
    batch_size: int = 4
    dt_lo: int = 1
    dt_hi: int = 5
    seed: int = 0
    dtype: str = "float64"
    # loss weights
    lambda_cons: float = 10.0
    lambda_occ: float = 0.4
    lambda_sm: float = 0.5
    alpha: float = 0.2
    beta: float = 0.85
    # model
    base_channels: int = 16
    encoder_levels: int = 3
    correlation_max_disp: int = 4
    num_classes: int = 4
    # ablation gates
    enable_seg: bool = True
    enable_tcc: bool = True
    enable_occ_mask: bool = True
    enable_error_mask: bool = True
    enable_flow_losses: bool = True
    enable_multi_pair: bool = True
    enable_unlabeled: bool = True
    fix_flow_branch: bool = False
    # logging / evaluation
    eval_every: int = 0
    eval_scenes: int = 16

    def __post_init__(self):
        if self.base_lr <= 0:
            raise ConfigError("TrainConfig: base_lr must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError("TrainConfig: momentum must lie in [0, 1)")
        if not (1 <= self.dt_lo <= self.dt_hi <= 5):
            raise ConfigError("TrainConfig: dt range must be within [1, 5]")
        if self.dtype not in ("float64", "float32"):
            raise ConfigError(f"TrainConfig: unknown dtype {self.dtype!r}")
        if self.max_iters < 1:
            raise ConfigError("TrainConfig: max_iters must be >= 1")

    def weights(self):
        return LossWeights(self.lambda_cons, self.lambda_occ, self.lambda_sm,
                           self.alpha, self.beta)

    def model_config(self):
        return ModelConfig(base_channels=self.base_channels,
                           encoder_levels=self.encoder_levels,
                           num_classes=self.num_classes,
                           correlation_max_disp=self.correlation_max_disp,
                           seed=self.seed)

    def np_dtype(self):
        return np.float64 if self.dtype == "float64" else np.float32


MODES = {
    "baseline": dict(enable_seg=True, enable_tcc=False, enable_occ_mask=False,
                     enable_error_mask=False, enable_flow_losses=False,
                     enable_unlabeled=False, fix_flow_branch=False),
    "tcc_fix": dict(enable_seg=True, enable_tcc=True, enable_occ_mask=False,
                    enable_error_mask=False, enable_flow_losses=True,
                    enable_unlabeled=False, enable_multi_pair=False,
                    fix_flow_branch=True),
    "tcc_single": dict(enable_seg=True, enable_tcc=True, enable_occ_mask=False,
                       enable_error_mask=False, enable_flow_losses=True,
                       enable_unlabeled=False, enable_multi_pair=False,
                       fix_flow_branch=False),
    "tcc_om": dict(enable_seg=True, enable_tcc=True, enable_occ_mask=True,
                   enable_error_mask=True, enable_flow_losses=True,
                   enable_unlabeled=False, enable_multi_pair=False,
                   fix_flow_branch=False),
    "tcc_om_ud": dict(enable_seg=True, enable_tcc=True, enable_occ_mask=True,
                      enable_error_mask=True, enable_flow_losses=True,
                      enable_unlabeled=True, enable_multi_pair=True,
                      fix_flow_branch=False),
    "ul": dict(enable_seg=False, enable_tcc=False, enable_occ_mask=False,
               enable_error_mask=False, enable_flow_losses=True,
               enable_unlabeled=False, fix_flow_branch=False),
    "ul_oe": dict(enable_seg=False, enable_tcc=False, enable_occ_mask=True,
                  enable_error_mask=False, enable_flow_losses=True,
                  enable_unlabeled=False, fix_flow_branch=False),
    "ul_tc": dict(enable_seg=True, enable_tcc=True, enable_occ_mask=False,
                  enable_error_mask=False, enable_flow_losses=True,
                  enable_unlabeled=False, fix_flow_branch=False),
    "ul_oe_tc": dict(enable_seg=True, enable_tcc=True, enable_occ_mask=True,
                     enable_error_mask=False, enable_flow_losses=True,
                     enable_unlabeled=False, fix_flow_branch=False),
    "efc_full": dict(enable_seg=True, enable_tcc=True, enable_occ_mask=True,
                     enable_error_mask=True, enable_flow_losses=True,
                     enable_unlabeled=True, enable_multi_pair=True,
                     fix_flow_branch=False),
}


def apply_mode(cfg, mode):
    if mode not in MODES:
        raise ConfigError(f"unknown mode {mode!r}; choose from {sorted(MODES)}")
    return replace(cfg, **MODES[mode])


_BOOL_STRINGS = {"true": True, "1": True, "yes": True,
                 "false": False, "0": False, "no": False}


def parse_config_file(path):
    """Flat UTF-8 key=value lines mirroring TrainConfig field names.

    A special key ``mode`` applies a preset before any explicit gate keys.
    """
    kv = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise ConfigError(f"{path}:{lineno}: expected key=value")
            kv[key.strip()] = value.strip()
    mode = kv.pop("mode", None)
    by_name = {f.name: f for f in fields(TrainConfig)}
    parsed = {}
    for key, raw in kv.items():
        if key not in by_name:
            raise ConfigError(f"{path}: unknown config key {key!r}")
        ftype = by_name[key].type
        if ftype == "bool":
            if raw.lower() not in _BOOL_STRINGS:
                raise ConfigError(f"{path}: bad boolean {raw!r} for {key}")
            parsed[key] = _BOOL_STRINGS[raw.lower()]
        elif ftype == "int":
            parsed[key] = int(raw)
        elif ftype == "float":
            parsed[key] = float(raw)
        else:
            parsed[key] = raw
    cfg = TrainConfig()
    if mode is not None:
        cfg = apply_mode(cfg, mode)
    return replace(cfg, **parsed)


# ---------------------------------------------------------------------------
# optimizer


def poly_lr(iteration, cfg):
    """base_lr * (1 - iter/max_iters)^power."""
    if iteration < 0 or iteration > cfg.max_iters:
        raise ContractError(f"poly_lr: iter {iteration} outside [0, {cfg.max_iters}]")
    return cfg.base_lr * (1.0 - iteration / cfg.max_iters) ** cfg.power


def sgd_step(params, grads, lr, momentum, weight_decay, velocities):
    """v <- momentum*v + grad + wd*param; param <- param - lr*v.

    params/grads map names to arrays; velocity buffers persist in
    ``velocities`` across calls.  Returns the updated parameter arrays.
    """
    updated = {}
    for name, value in params.items():
        grad = grads[name]
        if not np.isfinite(grad).all():
            raise NumericError(f"sgd_step: non-finite gradient in parameter {name}")
        velocity = velocities.get(name)
        if velocity is None:
            velocity = np.zeros_like(value)
        velocity = momentum * velocity + grad + weight_decay * value
        velocities[name] = velocity
        updated[name] = value - lr * velocity
    return updated


# ---------------------------------------------------------------------------
# sampling


def sample_pairs(dataset, rng, cfg):
    """Draw one batch as (scene, use_labels) tuples.

    With unlabeled pairs enabled, ceil(batch/2) slots are labeled and the rest
    draw from the unlabeled pool (falling back to any scene with its labels
    withheld); otherwise every slot is labeled.
    """
    pool = [s for s in dataset if cfg.dt_lo <= s.dt <= cfg.dt_hi]
    if not cfg.enable_multi_pair:
        pool = [s for s in pool if getattr(s, "pair_index", 0) == 0]
    if not pool:
        raise ConfigError("sample_pairs: no scenes in the configured dt range")
    labeled_pool = [s for s in pool if s.labeled]
    batch = []
    if cfg.enable_unlabeled:
        unlabeled_pool = [s for s in pool if not s.labeled] or pool
        n_labeled = (cfg.batch_size + 1) // 2
        if not labeled_pool:
            raise ConfigError("sample_pairs: labeled quota requires labeled scenes")
        for i in range(cfg.batch_size):
            if i < n_labeled:
                batch.append((labeled_pool[rng.integers(len(labeled_pool))], True))
            else:
                batch.append((unlabeled_pool[rng.integers(len(unlabeled_pool))], False))
    else:
        if not labeled_pool:
            raise ConfigError("sample_pairs: no labeled scenes available")
        for _ in range(cfg.batch_size):
            batch.append((labeled_pool[rng.integers(len(labeled_pool))], True))
    return batch


# ---------------------------------------------------------------------------
# loss assembly


def _image_pyramid(image, scales, dtype):
    levels = [np.ascontiguousarray(image, dtype=dtype)]
    for _ in range(scales - 1):
        prev = levels[-1]
        h, w, c = prev.shape
        levels.append(prev.reshape(h // 2, 2, w // 2, 2, c).mean(axis=(1, 3)))
    return levels


def _resize_mask_values(values, h, w):
    out = resize_bilinear_values(values[:, :, None], h, w)
    return np.clip(out, 0.0, 1.0)


def build_pair_loss(model, scene, use_labels, cfg, weights, mask_cache=None):
    """Assemble the joint loss graph for one sampled pair.

    Gates: enable_tcc adds the feature consistency term; enable_occ_mask
    swaps the unit weights of the consistency and photometric sums for
    (1 - O_est) and (1 + O_error - O_est) and adds the occlusion loss;
    enable_error_mask builds O_error from the warped segmentation argmax.

    The range-map targets and error masks are constants rebuilt from the
    current predictions on every call.  Passing a dict as ``mask_cache``
    freezes them after the first call, which keeps the loss differentiable
    for finite-difference probing (the masks are piecewise constant in the
    parameters, so a probe that recomputed them could straddle a jump).
    """
    dtype = cfg.np_dtype()
    zero = as_node(np.zeros((1, 1, 1), dtype=dtype))
    img_a = np.ascontiguousarray(scene.frame_a, dtype=dtype)
    img_b = np.ascontiguousarray(scene.frame_b, dtype=dtype)
    h, w = img_a.shape[:2]
    levels = cfg.encoder_levels
    scales = levels + 1

    need_flow = cfg.enable_flow_losses or cfg.enable_tcc
    need_seg_a = (cfg.enable_seg and use_labels) or cfg.enable_error_mask
    need_seg_b = cfg.enable_error_mask

    parts = {"cons": zero, "occ": zero, "sm": zero, "pm": zero}

    if need_flow or need_seg_b:
        feats_a, feats_b = model.encode_pair(as_node(img_a), as_node(img_b))
    else:
        feats_a, feats_b = model.encode(as_node(img_a)), None

    seg_a = seg_b = None
    if need_seg_b:
        seg_a, seg_b = model.decode_segmentation_pair(feats_a, feats_b)
    elif need_seg_a:
        seg_a = model.decode_segmentation(feats_a)
    if cfg.enable_seg and use_labels and seg_a is not None:
        parts["seg"] = segmentation_loss(seg_a.logits, scene.gt_seg_a)

    if not need_flow:
        return joint_loss(parts, weights)

    flows_fwd, flows_bwd, occs_a, occs_b = model.decode_flow_pair(feats_a, feats_b)

    zero_masks = [np.zeros((h >> s, w >> s), dtype=dtype) for s in range(scales)]

    if cfg.enable_occ_mask:
        if mask_cache is not None and "o_hat_a" in mask_cache:
            o_hat_a, o_hat_b = mask_cache["o_hat_a"], mask_cache["o_hat_b"]
        else:
            o_hat_a, o_hat_b = occlusion_targets_pair(
                FlowField(flows_fwd[0].value, "forward"),
                FlowField(flows_bwd[0].value, "backward"))
            if mask_cache is not None:
                mask_cache["o_hat_a"], mask_cache["o_hat_b"] = o_hat_a, o_hat_b
        parts["occ"] = (occlusion_loss(occs_a[0], o_hat_a, weights.alpha)
                        + occlusion_loss(occs_b[0], o_hat_b, weights.alpha))

    err_a = err_b = None
    if cfg.enable_error_mask and cfg.enable_occ_mask:
        if mask_cache is not None and "err_a" in mask_cache:
            err_a, err_b = mask_cache["err_a"], mask_cache["err_b"]
        else:
            warped_probs_a = warp_values(seg_b.probs.astype(dtype), flows_fwd[0].value)
            warped_probs_b = warp_values(seg_a.probs.astype(dtype), flows_bwd[0].value)
            o_seg_a = (seg_a.labels != warped_probs_a.argmax(axis=2)).astype(dtype)
            o_seg_b = (seg_b.labels != warped_probs_b.argmax(axis=2)).astype(dtype)
            err_a = np.maximum(o_seg_a - occs_a[0].value[:, :, 0], 0.0)
            err_b = np.maximum(o_seg_b - occs_b[0].value[:, :, 0], 0.0)
            if mask_cache is not None:
                mask_cache["err_a"], mask_cache["err_b"] = err_a, err_b

    if cfg.enable_flow_losses:
        pyr_a = _image_pyramid(img_a, scales, dtype)
        pyr_b = _image_pyramid(img_b, scales, dtype)
        pm_total = None
        sm_total = None
        for s in range(scales):
            ia, ib = pyr_a[s], pyr_b[s]
            warped_a = warp_bilinear(as_node(ib), flows_fwd[s])
            warped_b = warp_bilinear(as_node(ia), flows_bwd[s])
            if cfg.enable_occ_mask:
                mask_a, mask_b = occs_a[s], occs_b[s]
            else:
                mask_a, mask_b = zero_masks[s], zero_masks[s]
            if err_a is not None:
                hs, ws = ia.shape[:2]
                err_a_s = _resize_mask_values(err_a, hs, ws)[:, :, 0]
                err_b_s = _resize_mask_values(err_b, hs, ws)[:, :, 0]
            else:
                err_a_s, err_b_s = zero_masks[s], zero_masks[s]
            pm_s = (photometric_loss(as_node(ia), warped_a, mask_a, err_a_s, weights.beta)
                    + photometric_loss(as_node(ib), warped_b, mask_b, err_b_s, weights.beta))
            sm_s = (smoothness_loss(flows_fwd[s], ia)
                    + smoothness_loss(flows_bwd[s], ib))
            pm_total = pm_s if pm_total is None else pm_total + pm_s
            sm_total = sm_s if sm_total is None else sm_total + sm_s
        parts["pm"] = pm_total * (1.0 / scales)
        parts["sm"] = sm_total * (1.0 / scales)

    if cfg.enable_tcc:
        fh, fw = feats_a[-1].value.shape[:2]
        flow_deep_fwd = rescale_flow_node(flows_fwd[0], fh, fw)
        flow_deep_bwd = rescale_flow_node(flows_bwd[0], fh, fw)
        if cfg.enable_occ_mask:
            mask_a, mask_b = occs_a[levels], occs_b[levels]
        else:
            mask_a, mask_b = zero_masks[levels], zero_masks[levels]
        parts["cons"] = temporal_consistency_pair(
            feats_a[-1], feats_b[-1], flow_deep_fwd, flow_deep_bwd, mask_a, mask_b)

    return joint_loss(parts, weights)


# ---------------------------------------------------------------------------
# training loop


@dataclass
class RunLog:
    rows: list = field(default_factory=list)  # (step, LossBreakdown, lr)
    metrics_rows: list = field(default_factory=list)  # (step, Metrics)
    checkpoint_path: str | None = None

    def losses_csv(self):
        lines = ["step,seg,cons,occ,sm,pm,total,lr"]
        for step, bd, lr in self.rows:
            lines.append(f"{step},{bd.seg!r},{bd.cons!r},{bd.occ!r},{bd.sm!r},"
                         f"{bd.pm!r},{bd.total!r},{lr!r}")
        return "\n".join(lines) + "\n"

    def metrics_csv(self):
        lines = ["step,epe_all,epe_noc,miou"]
        for step, m in self.metrics_rows:
            noc = "" if m.epe_noc is None else repr(m.epe_noc)
            lines.append(f"{step},{m.epe_all!r},{noc},{m.miou!r}")
        return "\n".join(lines) + "\n"


def _batch_breakdown(breakdowns):
    out = LossBreakdown()
    for bd in breakdowns:
        out.seg += bd.seg
        out.cons += bd.cons
        out.occ += bd.occ
        out.sm += bd.sm
        out.pm += bd.pm
        out.total += bd.total
    return out


def train(cfg, dataset, out_dir=None, model=None):
    """Optimize the joint objective over a scene dataset.

    Per step: sample a batch, accumulate per-sample gradients by summation in
    sample order, apply one SGD step at the poly learning rate, and log the
    batch-summed loss breakdown.  A non-finite loss aborts with the last
    finite-step parameters written out.
    """
    rng = np.random.default_rng(cfg.seed)
    weights = cfg.weights()
    if model is None:
        model = Model(cfg.model_config())
    model.cast(cfg.np_dtype())
    trainable = {name for name, p in model.params.items() if p.trainable}
    if cfg.fix_flow_branch:
        trainable -= set(model.parameter_groups()["flow"])

    velocities = {}
    log = RunLog()
    last_good = {name: p.node.value.copy() for name, p in model.params.items()}
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)

    def abort(step):
        if out_dir:
            for name, value in last_good.items():
                model.params[name].node.value = value
            path = os.path.join(out_dir, "aborted.ckpt")
            save_checkpoint(model.params, path)
            log.checkpoint_path = path
        raise NumericError(f"train: non-finite loss at step {step}")

    for step in range(cfg.max_iters):
        lr = poly_lr(step, cfg)
        batch = sample_pairs(dataset, rng, cfg)
        for p in model.params.values():
            p.node.grad[...] = 0.0
        breakdowns = []
        for scene, use_labels in batch:
            total, bd = build_pair_loss(model, scene, use_labels, cfg, weights)
            if not np.isfinite(total.value.item()):
                abort(step)
            backward(total)
            breakdowns.append(bd)
        params = {name: model.params[name].node.value for name in trainable}
        grads = {name: model.params[name].node.grad for name in trainable}
        updated = sgd_step(params, grads, lr, cfg.momentum, cfg.weight_decay,
                           velocities)
        for name, value in updated.items():
            node = model.params[name].node
            node.value = value
            node.grad = np.zeros_like(value)
        for name, p in model.params.items():
            last_good[name] = p.node.value.copy()
        log.rows.append((step, _batch_breakdown(breakdowns), lr))
        if cfg.eval_every and (step + 1) % cfg.eval_every == 0:
            subset = dataset[:cfg.eval_scenes]
            log.metrics_rows.append((step, evaluate_model(model, subset)))

    if out_dir:
        path = os.path.join(out_dir, "final.ckpt")
        save_checkpoint(model.params, path)
        log.checkpoint_path = path
        with open(os.path.join(out_dir, "losses.csv"), "w", encoding="utf-8") as fh:
            fh.write(log.losses_csv())
        with open(os.path.join(out_dir, "metrics.csv"), "w", encoding="utf-8") as fh:
            fh.write(log.metrics_csv())
    return log, model


# ---------------------------------------------------------------------------
# evaluation


def segment_frame(model, frame):
    """Single-frame segmentation inference (no flow branch involvement)."""
    return model.segment(as_node(frame))


def infer_flow(model, frame_a, frame_b):
    """Finest-scale forward flow for a frame pair."""
    out = model.forward_pair(as_node(frame_a), as_node(frame_b))
    return FlowField(np.asarray(out.flows_fwd[0].value, dtype=np.float64), FORWARD)


def evaluate_model(model, dataset):
    """Aggregate EPE over pairs and global-confusion mIoU over frames."""
    k = model.cfg.num_classes
    inter = np.zeros(k)
    union = np.zeros(k)
    epe_all_sum = 0.0
    epe_noc_sum = 0.0
    noc_count = 0
    for scene in dataset:
        seg = segment_frame(model, scene.frame_a)
        for c in range(k):
            p = seg.labels == c
            g = scene.gt_seg_a == c
            inter[c] += np.logical_and(p, g).sum()
            union[c] += np.logical_or(p, g).sum()
        flow = infer_flow(model, scene.frame_a, scene.frame_b)
        all_, noc = epe(flow, scene.gt_flow_fwd, scene.gt_occ_a)
        epe_all_sum += all_
        if noc is not None:
            epe_noc_sum += noc
            noc_count += 1
    present = union > 0
    per_class = np.full(k, np.nan)
    per_class[present] = inter[present] / union[present]
    return Metrics(
        epe_all=epe_all_sum / len(dataset),
        epe_noc=(epe_noc_sum / noc_count) if noc_count else None,
        miou=float(per_class[present].mean()) if present.any() else float("nan"),
        per_class_iou=per_class.tolist())


def evaluate(checkpoint, dataset, cfg):
    model = Model(cfg.model_config())
    load_checkpoint(model, checkpoint)
    return evaluate_model(model, dataset)


# ---------------------------------------------------------------------------
# gradient checking


GRADCHECK_COMPONENTS = ("warp", "ssim", "cons", "pm", "sm", "occ_loss",
                        "seg_loss", "correlate", "model_e2e")
GRADCHECK_TOLERANCE = 1e-4


@dataclass
class GradcheckReport:
    component: str
    max_rel_error: float

    @property
    def passed(self):
        return self.max_rel_error < GRADCHECK_TOLERANCE


def fd_gradient(f, values, step=1e-5):
    """Central finite differences of a scalar function, entry by entry."""
    values = np.array(values, dtype=np.float64)
    grad = np.zeros_like(values)
    flat = values.ravel()
    gflat = grad.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = f(values)
        flat[i] = orig - step
        fm = f(values)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * step)
    return grad


def max_rel_error(analytic, numeric, floor=1e-6):
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom))


def _offgrid_flow(rng, h, w):
    """Flow whose sampling points stay interior and off the integer grid."""
    cols = np.arange(w, dtype=float)[None, :]
    rows = np.arange(h, dtype=float)[:, None]
    tx = rng.integers(0, w - 1, size=(h, w)) + rng.uniform(0.2, 0.8, size=(h, w))
    ty = rng.integers(0, h - 1, size=(h, w)) + rng.uniform(0.2, 0.8, size=(h, w))
    return np.stack([tx - cols, ty - rows], axis=2)


def _check_inputs(build_loss, arrays):
    """Analytic-vs-FD comparison for every array in ``arrays``."""
    nodes = [Node(a) for a in arrays]
    backward(build_loss(*nodes))
    worst = 0.0
    for i, node in enumerate(nodes):
        def f(probe, i=i):
            args = [Node(arrays[j] if j != i else probe) for j in range(len(arrays))]
            return build_loss(*args).value.item()
        worst = max(worst, max_rel_error(node.grad, fd_gradient(f, arrays[i])))
    return worst


def gradcheck(component, seed=0):
    """Finite-difference check of one component; see GRADCHECK_COMPONENTS."""
    rng = np.random.default_rng(seed)
    if component == "warp":
        src = rng.normal(size=(6, 6, 2))
        flow = _offgrid_flow(rng, 6, 6)
        wt = rng.normal(size=(6, 6, 2))
        err = _check_inputs(
            lambda s, f: reduce_sum(warp_bilinear(s, f) * Node(wt)), [src, flow])
    elif component == "ssim":
        a = rng.uniform(0.1, 0.9, size=(5, 5, 2))
        b = rng.uniform(0.1, 0.9, size=(5, 5, 2))
        wt = rng.normal(size=(5, 5, 2))
        err = _check_inputs(
            lambda x, y: reduce_sum(losses_mod.ssim_map(x, y) * Node(wt)), [a, b])
    elif component == "cons":
        s = rng.normal(size=(5, 5, 3))
        sw = rng.normal(size=(5, 5, 3))
        m = rng.uniform(0.1, 0.9, size=(5, 5, 1))
        err = _check_inputs(losses_mod.temporal_consistency_loss, [s, sw, m])
    elif component == "pm":
        a = rng.uniform(0.1, 0.9, size=(6, 6, 3))
        b = rng.uniform(0.1, 0.9, size=(6, 6, 3))
        o_est = rng.uniform(0.1, 0.9, size=(6, 6, 1))
        o_err = rng.uniform(0.0, 0.5, size=(6, 6))
        err = _check_inputs(
            lambda x, y, m: losses_mod.photometric_loss(x, y, m, o_err), [a, b, o_est])
    elif component == "sm":
        flow = rng.normal(size=(6, 6, 2))
        image = rng.uniform(size=(6, 6, 3))
        err = _check_inputs(lambda f: losses_mod.smoothness_loss(f, image), [flow])
    elif component == "occ_loss":
        from .occlusion import OcclusionMask
        o_est = rng.uniform(0.05, 0.95, size=(4, 4, 1))
        o_hat = OcclusionMask((rng.uniform(size=(4, 4)) > 0.5).astype(float), "hard")
        err = _check_inputs(lambda o: occlusion_loss(o, o_hat, alpha=0.2), [o_est])
    elif component == "seg_loss":
        logits = rng.normal(size=(4, 4, 4))
        gt = np.asarray(rng.integers(0, 4, size=(4, 4)))
        err = _check_inputs(lambda l: segmentation_loss(l, gt), [logits])
    elif component == "correlate":
        f1 = rng.normal(size=(5, 5, 3))
        f2 = rng.normal(size=(5, 5, 3))
        wt = rng.normal(size=(5, 5, 25))
        err = _check_inputs(
            lambda a, b: reduce_sum(correlate(a, b, 2) * Node(wt)), [f1, f2])
    elif component == "model_e2e":
        err = _gradcheck_model(seed)
    else:
        raise ConfigError(f"gradcheck: unknown component {component!r}; "
                          f"choose from {GRADCHECK_COMPONENTS}")
    return GradcheckReport(component, err)


def _gradcheck_model(seed, probes_per_param=4):
    """FD probes of every trainable parameter through the full joint loss."""
    from .synthdata import generate_scene
    rng = np.random.default_rng(seed)
    cfg = TrainConfig(base_channels=4, encoder_levels=2, correlation_max_disp=2,
                      num_classes=3, seed=seed, max_iters=1)
    scene = generate_scene(seed, 16, 16, 3, dt=2, integer_only=True)
    model = Model(cfg.model_config())
    # The exact init state is degenerate for finite differences: biases are
    # zero so whole ReLU channels sit within the probe step of their kink,
    # and the near-zero flow puts every warp sample exactly on the bilinear
    # kink.  Offset the biases to probe at a generic parameter point.  The
    # flow offsets are sized so the composed pyramid flow at every scale
    # (coarse levels are upsampled and doubled on the way down) keeps its
    # sampling coordinates well away from the integer grid.
    levels = cfg.encoder_levels
    for name, p in model.params.items():
        if name.endswith("pred.b"):
            lvl = int(name[4:name.index(".")])
            magnitude = 0.11 / (1 << (levels - lvl))
            signs = rng.choice([-1.0, 1.0], size=p.node.value.shape)
            p.node.value = p.node.value + magnitude * signs
        elif name.endswith("pred.w"):
            # undo part of the small-flow init: spatially varying flow keeps
            # the smoothness abs() terms away from their kink at zero
            p.node.value = p.node.value * 10.0
        elif name.endswith(".b"):
            p.node.value = p.node.value + rng.uniform(-0.3, 0.3,
                                                      size=p.node.value.shape)
    weights = cfg.weights()
    mask_cache = {}

    def loss_value():
        total, _ = build_pair_loss(model, scene, True, cfg, weights, mask_cache)
        return total.value.item()

    for p in model.params.values():
        p.node.grad[...] = 0.0
    total, _ = build_pair_loss(model, scene, True, cfg, weights, mask_cache)
    backward(total)

    def central(flat, i, step):
        orig = flat[i]
        flat[i] = orig + step
        fp = loss_value()
        flat[i] = orig - step
        fm = loss_value()
        flat[i] = orig
        return (fp - fm) / (2.0 * step)

    # Probe the dominant gradient entries of every parameter.  Tiny entries
    # are excluded: at this loss scale the central-difference roundoff floor
    # already exceeds the tolerance for gradients below ~1e-3.  A probe whose
    # central differences at h, h/8, and h/64 disagree straddles a kink of
    # one of the piecewise terms (abs, relu, bilinear cell edges); such
    # probes are locally nonsmooth, where finite differences are
    # meaningless, and are skipped just like integer-coordinate warp probes.
    worst = 0.0
    step = 1e-5
    for p in model.params.values():
        flat = p.node.value.ravel()
        gflat = p.node.grad.ravel()
        order = np.argsort(-np.abs(gflat))
        for i in order[:probes_per_param]:
            estimates = [central(flat, i, step / k) for k in (1.0, 8.0, 64.0)]
            spread = max(estimates) - min(estimates)
            scale = max(max(abs(e) for e in estimates), 1e-6)
            if spread > 2e-5 * scale:
                continue
            worst = max(worst, max_rel_error(gflat[i], estimates[0]))
    return worst
