import numpy as np
import pytest
from conftest import fd_gradient, max_rel_error

from flowseg.errors import ContractError, DataError, ShapeError
from flowseg.losses import (SSIM_C1, SSIM_C2, LossBreakdown, LossWeights,
                            joint_loss, photometric_loss, segmentation_loss,
                            smoothness_loss, ssim_map,
                            temporal_consistency_loss,
                            temporal_consistency_pair)
from flowseg.occlusion import OcclusionMask
from flowseg.tensor import Node, as_node, backward, leaf


def zeros_mask(h, w):
    return OcclusionMask(np.zeros((h, w)), "soft")


# -- temporal consistency ------------------------------------------------------


def test_cons_zero_on_identical_features(rng):
    s = rng.normal(size=(4, 4, 3))
    mask = OcclusionMask(rng.uniform(size=(4, 4)), "soft")
    loss = temporal_consistency_loss(Node(s), Node(s.copy()), mask)
    assert loss.value.item() == 0.0


def test_cons_fully_masked_is_zero(rng):
    a = rng.normal(size=(4, 4, 3))
    b = rng.normal(size=(4, 4, 3))
    loss = temporal_consistency_loss(Node(a), Node(b), OcclusionMask(np.ones((4, 4)), "soft"))
    assert loss.value.item() == pytest.approx(0.0, abs=1e-12)


def test_cons_hand_case():
    s = np.array([[[1.0, 2.0]]])
    sw = np.array([[[3.0, 5.0]]])
    loss = temporal_consistency_loss(Node(s), Node(sw), zeros_mask(1, 1))
    assert loss.value.item() == pytest.approx(13.0)


def test_cons_shape_mismatch():
    with pytest.raises(ShapeError):
        temporal_consistency_loss(Node(np.zeros((2, 2, 1))), Node(np.zeros((2, 3, 1))),
                                  zeros_mask(2, 2))


def test_cons_gradient_including_mask_path(rng):
    a = rng.normal(size=(5, 5, 2))
    b = rng.normal(size=(5, 5, 2))
    m = rng.uniform(0.1, 0.9, size=(5, 5, 1))

    def loss_a(arr):
        return temporal_consistency_loss(Node(arr), Node(b), Node(m)).value.item()

    def loss_m(arr):
        return temporal_consistency_loss(Node(a), Node(b), Node(arr)).value.item()

    xa, xm = Node(a), Node(m)
    backward(temporal_consistency_loss(xa, Node(b), xm))
    assert max_rel_error(xa.grad, fd_gradient(loss_a, a)) < 1e-4
    assert max_rel_error(xm.grad, fd_gradient(loss_m, m)) < 1e-4


def test_cons_pair_sums_both_directions(rng):
    a = rng.normal(size=(4, 4, 2))
    b = rng.normal(size=(4, 4, 2))
    zero_flow = np.zeros((4, 4, 2))
    loss = temporal_consistency_pair(Node(a), Node(b), Node(zero_flow), Node(zero_flow),
                                     zeros_mask(4, 4), zeros_mask(4, 4))
    expected = 2.0 * ((b - a) ** 2).sum()
    assert loss.value.item() == pytest.approx(expected)


# -- SSIM -----------------------------------------------------------------------


def ssim_oracle(a, b):
    """Direct per-window statistics with edge-replicated 3x3 windows."""
    h, w, c = a.shape
    out = np.zeros_like(a)
    for y in range(h):
        for x in range(w):
            ys = np.clip(np.arange(y - 1, y + 2), 0, h - 1)
            xs = np.clip(np.arange(x - 1, x + 2), 0, w - 1)
            for ch in range(c):
                wa = a[np.ix_(ys, xs)][:, :, ch]
                wb = b[np.ix_(ys, xs)][:, :, ch]
                mu_a, mu_b = wa.mean(), wb.mean()
                var_a = (wa * wa).mean() - mu_a ** 2
                var_b = (wb * wb).mean() - mu_b ** 2
                cov = (wa * wb).mean() - mu_a * mu_b
                num = (2 * mu_a * mu_b + SSIM_C1) * (2 * cov + SSIM_C2)
                den = (mu_a ** 2 + mu_b ** 2 + SSIM_C1) * (var_a + var_b + SSIM_C2)
                out[y, x, ch] = num / den
    return out


def test_ssim_identical_is_one(rng):
    a = rng.uniform(size=(5, 6, 3))
    out = ssim_map(Node(a), Node(a.copy()))
    np.testing.assert_allclose(out.value, 1.0, atol=1e-12)


def test_ssim_constant_closed_form():
    c, d = 0.3, 0.7
    out = ssim_map(Node(np.full((4, 4, 1), c)), Node(np.full((4, 4, 1), d)))
    expected = (2 * c * d + SSIM_C1) * SSIM_C2 / ((c * c + d * d + SSIM_C1) * SSIM_C2)
    np.testing.assert_allclose(out.value, expected, atol=1e-12)


def test_ssim_matches_windowed_oracle(rng):
    a = rng.uniform(size=(5, 5, 2))
    b = rng.uniform(size=(5, 5, 2))
    out = ssim_map(Node(a), Node(b))
    np.testing.assert_allclose(out.value, ssim_oracle(a, b), atol=1e-10)
    assert out.value.min() >= -1.0 - 1e-12 and out.value.max() <= 1.0 + 1e-12


def test_ssim_gradient_matches_fd(rng):
    a = rng.uniform(0.1, 0.9, size=(4, 4, 1))
    b = rng.uniform(0.1, 0.9, size=(4, 4, 1))
    wt = rng.normal(size=(4, 4, 1))

    def loss_of(arr):
        from flowseg.tensor import reduce_sum
        return reduce_sum(ssim_map(Node(arr), Node(b)) * Node(wt)).value.item()

    from flowseg.tensor import reduce_sum
    x = Node(a)
    backward(reduce_sum(ssim_map(x, Node(b)) * Node(wt)))
    assert max_rel_error(x.grad, fd_gradient(loss_of, a)) < 1e-4


# -- photometric ------------------------------------------------------------------


def test_pm_zero_on_identical_images(rng):
    img = rng.uniform(size=(6, 6, 3))
    loss = photometric_loss(Node(img), Node(img.copy()), zeros_mask(6, 6),
                            zeros_mask(6, 6), beta=0.85)
    assert loss.value.item() == pytest.approx(0.0, abs=1e-12)


def test_pm_pure_l1_hand_case():
    a = np.full((4, 4, 3), 0.4)
    b = np.full((4, 4, 3), 0.5)
    loss = photometric_loss(Node(a), Node(b), zeros_mask(4, 4), zeros_mask(4, 4), beta=0.0)
    assert loss.value.item() == pytest.approx(16 * 0.1, rel=1e-9)


def test_pm_default_beta_is_085():
    import inspect
    sig = inspect.signature(photometric_loss)
    assert sig.parameters["beta"].default == 0.85


def test_pm_bad_beta():
    a = np.zeros((2, 2, 1))
    with pytest.raises(ContractError):
        photometric_loss(Node(a), Node(a), zeros_mask(2, 2), zeros_mask(2, 2), beta=1.5)


def test_pm_gradients_match_fd(rng):
    a = rng.uniform(0.1, 0.9, size=(5, 5, 2))
    b = rng.uniform(0.1, 0.9, size=(5, 5, 2))
    o_est = rng.uniform(0.1, 0.9, size=(5, 5, 1))
    o_err = OcclusionMask(rng.uniform(0.0, 0.5, size=(5, 5)), "soft")

    def loss_img(arr):
        return photometric_loss(Node(a), Node(arr), Node(o_est), o_err).value.item()

    def loss_mask(arr):
        return photometric_loss(Node(a), Node(b), Node(arr), o_err).value.item()

    xb, xm = Node(b), Node(o_est)
    backward(photometric_loss(Node(a), xb, xm, o_err))
    assert max_rel_error(xb.grad, fd_gradient(loss_img, b)) < 1e-4
    assert max_rel_error(xm.grad, fd_gradient(loss_mask, o_est)) < 1e-4


# -- smoothness -------------------------------------------------------------------


def test_smoothness_constant_flow_is_zero(rng):
    flow = np.zeros((4, 4, 2)) + np.array([1.5, -2.0])
    image = rng.uniform(size=(4, 4, 3))
    assert smoothness_loss(Node(flow), image).value.item() == pytest.approx(0.0, abs=1e-12)


def test_smoothness_ramp_hand_count():
    # dx channel is a ramp in x: each of the H*(W-1) x-difference sites
    # contributes exactly 1; the constant image gives weight e^0 = 1
    h, w = 4, 4
    flow = np.zeros((h, w, 2))
    flow[:, :, 0] = np.arange(w)[None, :]
    image = np.full((h, w, 3), 0.5)
    loss = smoothness_loss(Node(flow), image)
    assert loss.value.item() == pytest.approx(h * (w - 1))


def test_smoothness_edge_kills_weight():
    h, w = 2, 4
    flow = np.zeros((h, w, 2))
    flow[:, :, 0] = np.arange(w)[None, :]
    image = np.zeros((h, w, 1))
    image[:, 2:] = 1000.0  # huge edge between columns 1 and 2
    loss = smoothness_loss(Node(flow), image)
    # the two x-diff sites straddling the edge contribute ~0
    assert loss.value.item() == pytest.approx(h * (w - 1) - h, rel=1e-6)


def test_smoothness_gradient_matches_fd(rng):
    flow = rng.normal(size=(5, 5, 2))
    image = rng.uniform(size=(5, 5, 3))

    def loss_of(arr):
        return smoothness_loss(Node(arr), image).value.item()

    x = Node(flow)
    backward(smoothness_loss(x, image))
    assert max_rel_error(x.grad, fd_gradient(loss_of, flow)) < 1e-4


# -- segmentation -----------------------------------------------------------------


def test_seg_uniform_logits():
    k, h, w = 4, 3, 3
    logits = np.zeros((h, w, k))
    gt = np.zeros((h, w), dtype=int)
    loss = segmentation_loss(Node(logits), gt)
    assert loss.value.item() == pytest.approx(h * w * np.log(k), rel=1e-12)


def test_seg_confident_correct_is_zero():
    gt = np.array([[0, 1], [2, 0]])
    logits = np.full((2, 2, 3), -1000.0)
    for y in range(2):
        for x in range(2):
            logits[y, x, gt[y, x]] = 1000.0
    loss = segmentation_loss(Node(logits), gt)
    assert loss.value.item() == pytest.approx(0.0, abs=1e-9)


def test_seg_matches_softmax_gather_oracle(rng):
    logits = rng.normal(size=(3, 3, 4))
    gt = rng.integers(0, 4, size=(3, 3))
    loss = segmentation_loss(Node(logits), gt)
    expected = 0.0
    for y in range(3):
        for x in range(3):
            p = np.exp(logits[y, x]) / np.exp(logits[y, x]).sum()
            expected -= np.log(p[gt[y, x]])
    assert loss.value.item() == pytest.approx(expected, abs=1e-10)


def test_seg_ignore_label(rng):
    logits = rng.normal(size=(2, 2, 3))
    gt = np.array([[0, 255], [1, 255]])
    loss = segmentation_loss(Node(logits), gt, ignore_label=255)
    ref = segmentation_loss(Node(logits), np.where(gt == 255, 0, gt))
    partial = 0.0
    for y, x in ((0, 0), (1, 0)):
        p = np.exp(logits[y, x]) / np.exp(logits[y, x]).sum()
        partial -= np.log(p[gt[y, x]])
    assert loss.value.item() == pytest.approx(partial, abs=1e-10)
    assert loss.value.item() < ref.value.item() + 1e-12


def test_seg_label_out_of_range():
    with pytest.raises(DataError):
        segmentation_loss(Node(np.zeros((1, 1, 2))), np.array([[5]]))


def test_seg_gradient_matches_fd(rng):
    logits = rng.normal(size=(3, 3, 4))
    gt = rng.integers(0, 4, size=(3, 3))
    gt[0, 0] = 9
    with pytest.raises(DataError):
        segmentation_loss(Node(logits), gt)
    gt[0, 0] = 0

    def loss_of(arr):
        return segmentation_loss(Node(arr), gt, ignore_label=0).value.item()

    x = Node(logits)
    backward(segmentation_loss(x, gt, ignore_label=0))
    assert max_rel_error(x.grad, fd_gradient(loss_of, logits)) < 1e-4


# -- joint loss -------------------------------------------------------------------


def parts_of(seg=None, cons=0.0, occ=0.0, sm=0.0, pm=0.0):
    out = {"cons": as_node(cons), "occ": as_node(occ),
           "sm": as_node(sm), "pm": as_node(pm)}
    if seg is not None:
        out["seg"] = as_node(seg)
    return out


def test_joint_default_weights():
    w = LossWeights()
    assert (w.lambda_cons, w.lambda_occ, w.lambda_sm) == (10.0, 0.4, 0.5)
    assert w.alpha == 0.2 and w.beta == 0.85


def test_joint_all_zero():
    total, bd = joint_loss(parts_of(seg=0.0), LossWeights())
    assert total.value.item() == 0.0 and bd.total == 0.0


def test_joint_hand_arithmetic():
    total, bd = joint_loss(parts_of(seg=1.0, cons=1.0, occ=1.0, sm=1.0, pm=1.0),
                           LossWeights())
    assert total.value.item() == pytest.approx(12.9, rel=1e-12)
    assert bd.recompose(LossWeights()) == pytest.approx(bd.total, abs=1e-10)


def test_joint_seg_absent_contributes_zero():
    total, bd = joint_loss(parts_of(cons=2.0, occ=1.0, sm=4.0, pm=3.0), LossWeights())
    assert bd.seg == 0.0
    assert total.value.item() == pytest.approx(2.0 * 10 + 0.4 + 2.0 + 3.0)


def test_joint_weight_linearity(rng):
    vals = dict(seg=rng.uniform(), cons=rng.uniform(), occ=rng.uniform(),
                sm=rng.uniform(), pm=rng.uniform())
    base = LossWeights()
    c = 3.0
    scaled = LossWeights(lambda_cons=base.lambda_cons * c,
                         lambda_occ=base.lambda_occ * c,
                         lambda_sm=base.lambda_sm * c)
    t1, _ = joint_loss(parts_of(**vals), base)
    t2, _ = joint_loss(parts_of(**vals), scaled)
    lhs = t2.value.item() - vals["seg"] - vals["pm"]
    rhs = c * (t1.value.item() - vals["seg"] - vals["pm"])
    assert lhs == pytest.approx(rhs, rel=1e-12)


def test_breakdown_recompose_invariant(rng):
    for _ in range(10):
        vals = dict(seg=rng.uniform(), cons=rng.uniform(), occ=rng.uniform(),
                    sm=rng.uniform(), pm=rng.uniform())
        w = LossWeights(lambda_cons=rng.uniform(0, 20), lambda_occ=rng.uniform(),
                        lambda_sm=rng.uniform())
        total, bd = joint_loss(parts_of(**vals), w)
        assert abs(bd.recompose(w) - bd.total) < 1e-10


def test_losses_nonnegative_on_valid_inputs(rng):
    for _ in range(5):
        a = rng.uniform(size=(6, 6, 3))
        b = rng.uniform(size=(6, 6, 3))
        m = OcclusionMask(rng.uniform(size=(6, 6)), "soft")
        assert temporal_consistency_loss(Node(a), Node(b), m).value.item() >= 0.0
        assert photometric_loss(Node(a), Node(b), m, zeros_mask(6, 6)).value.item() >= 0.0
        flow = rng.normal(size=(6, 6, 2))
        assert smoothness_loss(Node(flow), a).value.item() >= 0.0
        logits = rng.normal(size=(6, 6, 3))
        gt = rng.integers(0, 3, size=(6, 6))
        assert segmentation_loss(Node(logits), gt).value.item() >= 0.0
