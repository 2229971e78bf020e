import numpy as np
import pytest
from conftest import fd_gradient, max_rel_error

from flowseg import counters
from flowseg.errors import DataError, ShapeError
from flowseg.model import (Model, ModelConfig, SegMap, correlate,
                           init_parameters, load_checkpoint, read_checkpoint,
                           save_checkpoint)
from flowseg.tensor import Node, backward, reduce_sum


def tiny_cfg(**kw):
    base = dict(base_channels=4, encoder_levels=2, num_classes=3,
                correlation_max_disp=2, seed=7)
    base.update(kw)
    return ModelConfig(**base)


def rand_image(rng, h=16, w=16):
    return rng.uniform(size=(h, w, 3))


# -- correlation ---------------------------------------------------------------


def correlate_oracle(v1, v2, d):
    h, w, c = v1.shape
    side = 2 * d + 1
    out = np.zeros((h, w, side * side))
    for y in range(h):
        for x in range(w):
            for dy in range(-d, d + 1):
                for dx in range(-d, d + 1):
                    yy = min(max(y + dy, 0), h - 1)
                    xx = min(max(x + dx, 0), w - 1)
                    acc = 0.0
                    for ch in range(c):
                        acc += v1[y, x, ch] * v2[yy, xx, ch]
                    out[y, x, (dy + d) * side + (dx + d)] = acc / c
    return out


def test_correlate_constant_inputs():
    c = 0.8
    f = np.full((4, 4, 3), c)
    out = correlate(Node(f), Node(f.copy()), 2)
    np.testing.assert_allclose(out.value, c * c, atol=1e-12)
    assert out.value.shape == (4, 4, 25)


def test_correlate_zero_disp_channel_is_max_for_identical_maps(rng):
    # per-pixel unit-norm features: self-similarity peaks at zero displacement
    # by Cauchy-Schwarz
    f = rng.normal(size=(5, 5, 4))
    f /= np.linalg.norm(f, axis=2, keepdims=True)
    d = 1
    out = correlate(Node(f), Node(f.copy()), d).value
    np.testing.assert_allclose(out.value if hasattr(out, "value") else out,
                               correlate_oracle(f, f, d), atol=1e-12)
    center = (0 + d) * (2 * d + 1) + (0 + d)
    interior = out[1:-1, 1:-1]
    assert np.all(interior[:, :, center:center + 1] >= interior - 1e-12)


def test_correlate_matches_nested_loop_oracle(rng):
    for _ in range(5):
        v1 = rng.normal(size=(4, 4, 2))
        v2 = rng.normal(size=(4, 4, 2))
        out = correlate(Node(v1), Node(v2), 2)
        np.testing.assert_allclose(out.value, correlate_oracle(v1, v2, 2), atol=1e-12)


def test_correlate_shape_mismatch():
    with pytest.raises(ShapeError):
        correlate(Node(np.zeros((4, 4, 2))), Node(np.zeros((4, 4, 3))), 1)


def test_correlate_gradients_match_fd(rng):
    v1 = rng.normal(size=(4, 4, 2))
    v2 = rng.normal(size=(4, 4, 2))
    wt = rng.normal(size=(4, 4, 9))

    def loss1(arr):
        return reduce_sum(correlate(Node(arr), Node(v2), 1) * Node(wt)).value.item()

    def loss2(arr):
        return reduce_sum(correlate(Node(v1), Node(arr), 1) * Node(wt)).value.item()

    a, b = Node(v1), Node(v2)
    backward(reduce_sum(correlate(a, b, 1) * Node(wt)))
    assert max_rel_error(a.grad, fd_gradient(loss1, v1)) < 1e-4
    assert max_rel_error(b.grad, fd_gradient(loss2, v2)) < 1e-4


# -- encoder / decoders -----------------------------------------------------------


def test_encoder_is_shared_and_deterministic(rng):
    model = Model(tiny_cfg())
    img = rand_image(rng)
    f1 = model.encode(Node(img))
    f2 = model.encode(Node(img.copy()))
    for a, b in zip(f1, f2):
        np.testing.assert_array_equal(a.value, b.value)


def test_encoder_level_shapes(rng):
    model = Model(tiny_cfg())
    feats = model.encode(Node(rand_image(rng, 16, 32)))
    assert feats[0].value.shape[:2] == (8, 16)
    assert feats[1].value.shape[:2] == (4, 8)


def test_encoder_divisibility():
    model = Model(tiny_cfg())
    with pytest.raises(ShapeError):
        model.encode(Node(np.zeros((10, 16, 3))))


def test_encoder_gradient_matches_fd(rng):
    model = Model(tiny_cfg(base_channels=2, encoder_levels=1))
    img = rand_image(rng, 6, 6)
    wshape = model.encode(Node(img))[-1].value.shape
    wt = rng.normal(size=wshape)

    def loss_of(arr):
        return reduce_sum(model.encode(Node(arr))[-1] * Node(wt)).value.item()

    x = Node(img)
    backward(reduce_sum(model.encode(x)[-1] * Node(wt)))
    assert max_rel_error(x.grad, fd_gradient(loss_of, img)) < 1e-4


def test_segmap_probs_sum_to_one(rng):
    model = Model(tiny_cfg())
    seg = model.segment(Node(rand_image(rng)))
    np.testing.assert_allclose(seg.probs.sum(axis=2), 1.0, atol=1e-6)
    assert seg.probs.shape == (16, 16, 3)
    assert seg.labels.shape == (16, 16)


def test_segmap_single_class_labels_zero(rng):
    model = Model(tiny_cfg(num_classes=1))
    seg = model.segment(Node(rand_image(rng)))
    assert np.all(seg.labels == 0)


def test_softmax_shift_invariance(rng):
    logits = rng.normal(size=(4, 4, 3))
    shift = rng.normal(size=(4, 4, 1))
    a = SegMap.from_logits(logits)
    b = SegMap.from_logits(logits + shift)
    np.testing.assert_allclose(a.probs, b.probs, atol=1e-12)


def test_argmax_tie_breaks_low_index():
    probs = np.full((1, 1, 3), 1.0 / 3.0)
    seg = SegMap.from_logits(np.zeros((1, 1, 3)))
    assert seg.labels[0, 0] == 0
    np.testing.assert_allclose(seg.probs, probs)


# -- flow decoder -----------------------------------------------------------------


def test_flow_outputs_shapes_and_ranges(rng):
    model = Model(tiny_cfg())
    out = model.forward_pair(Node(rand_image(rng)), Node(rand_image(rng)))
    assert len(out.flows_fwd) == 3
    for s, (flow, occ) in enumerate(zip(out.flows_fwd, out.occs_a)):
        assert flow.value.shape == (16 >> s, 16 >> s, 2)
        assert occ.value.shape == (16 >> s, 16 >> s, 1)
        assert np.isfinite(flow.value).all()
        assert occ.value.min() > 0.0 and occ.value.max() < 1.0


def test_identical_frames_give_finite_outputs(rng):
    model = Model(tiny_cfg())
    img = rand_image(rng)
    out = model.forward_pair(Node(img), Node(img.copy()))
    for flow in out.flows_fwd + out.flows_bwd:
        assert np.isfinite(flow.value).all()


def test_initial_flow_is_small(rng):
    model = Model(tiny_cfg())
    out = model.forward_pair(Node(rand_image(rng)), Node(rand_image(rng)))
    mag = np.linalg.norm(out.flows_fwd[0].value, axis=2)
    assert np.abs(mag).max() < 0.5


def test_init_determinism_and_seed_sensitivity():
    p1 = init_parameters(tiny_cfg())
    p2 = init_parameters(tiny_cfg())
    p3 = init_parameters(tiny_cfg(seed=8))
    for name in p1:
        np.testing.assert_array_equal(p1[name].node.value, p2[name].node.value)
    assert any(not np.array_equal(p1[n].node.value, p3[n].node.value) for n in p1)


def test_parameter_names_unique_and_grouped():
    model = Model(tiny_cfg())
    groups = model.parameter_groups()
    names = sorted(model.params)
    assert len(names) == len(set(names))
    regrouped = sorted(groups["encoder"] + groups["seg"] + groups["flow"])
    assert regrouped == names
    assert groups["encoder"]  # encoder parameters exist exactly once


def test_segment_executes_zero_flow_ops(rng):
    model = Model(tiny_cfg())
    counters.reset()
    model.segment(Node(rand_image(rng)))
    snap = counters.snapshot()
    assert snap == {"warp": 0, "correlate": 0, "decode_flow": 0}
    model.forward_pair(Node(rand_image(rng)), Node(rand_image(rng)))
    assert counters.snapshot()["decode_flow"] == 2


# -- checkpoints ----------------------------------------------------------------


def test_checkpoint_roundtrip_bit_exact(tmp_path, rng):
    model = Model(tiny_cfg())
    path = tmp_path / "model.ckpt"
    save_checkpoint(model.params, path)
    other = Model(tiny_cfg(seed=99))
    load_checkpoint(other, path)
    for name in model.params:
        np.testing.assert_array_equal(other.params[name].node.value,
                                      model.params[name].node.value)


def test_checkpoint_raw_entries(tmp_path):
    model = Model(tiny_cfg())
    path = tmp_path / "model.ckpt"
    save_checkpoint(model.params, path)
    entries = read_checkpoint(path)
    assert set(entries) == set(model.params)
    for name, arr in entries.items():
        assert arr.ndim == 3


def test_checkpoint_strict_rejects_missing(tmp_path):
    model = Model(tiny_cfg())
    partial = {k: v for k, v in model.params.items() if k.startswith("enc")}
    path = tmp_path / "partial.ckpt"
    save_checkpoint(partial, path)
    with pytest.raises(DataError):
        load_checkpoint(Model(tiny_cfg()), path, strict=True)
    # non-strict load keeps the missing parameters at their init values
    other = Model(tiny_cfg(seed=5))
    before = {k: p.node.value.copy() for k, p in other.params.items()}
    load_checkpoint(other, path, strict=False)
    for name, p in other.params.items():
        if name.startswith("enc"):
            np.testing.assert_array_equal(p.node.value, model.params[name].node.value)
        else:
            np.testing.assert_array_equal(p.node.value, before[name])


def test_checkpoint_shape_mismatch_rejected(tmp_path):
    model = Model(tiny_cfg())
    path = tmp_path / "model.ckpt"
    save_checkpoint(model.params, path)
    with pytest.raises(DataError):
        load_checkpoint(Model(tiny_cfg(base_channels=8)), path)


def test_forward_backward_touches_every_parameter(rng):
    model = Model(tiny_cfg())
    out = model.forward_pair(Node(rand_image(rng)), Node(rand_image(rng)))
    total = reduce_sum(out.seg_a.logits * out.seg_a.logits)
    for flow in out.flows_fwd + out.flows_bwd:
        total = total + reduce_sum(flow * flow)
    for occ in out.occs_a + out.occs_b:
        total = total + reduce_sum(occ * occ)
    backward(total)
    for name, p in model.params.items():
        assert np.any(p.node.grad != 0.0), f"dead gradient: {name}"
