import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from vluu import kernels, nn
from vluu.gradcheck import CHECKS, rel_error, run_gradcheck


ARCH = nn.ArchConfig(in_channels=3, num_classes=3, height=8, width=8)


def _zero(net):
    for arr in net.params.values():
        arr[...] = 0
    return net


# ---------------------------------------------------------------------------
# seg_forward


def test_zero_params_give_uniform_probabilities():
    net = _zero(nn.SegNet(ARCH, dtype=np.float64))
    x = np.random.default_rng(0).standard_normal((3, 8, 8))
    probs = nn.seg_forward(net, x)
    assert probs.shape == (4, 8, 8)
    np.testing.assert_array_equal(probs, np.full((4, 8, 8), 0.25))


def test_seg_forward_is_deterministic():
    x = np.random.default_rng(1).standard_normal((2, 3, 8, 8)).astype(np.float32)
    a = nn.seg_forward(nn.init_params(7, ARCH), x)
    b = nn.seg_forward(nn.init_params(7, ARCH), x)
    assert a.tobytes() == b.tobytes()


def test_channel_sums_are_one():
    rng = np.random.default_rng(2)
    net = nn.SegNet(ARCH, dtype=np.float64).init(rng)
    probs = nn.seg_forward(net, rng.standard_normal((4, 3, 8, 8)) * 5)
    np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-6)


def test_seg_forward_rejects_wrong_shape():
    net = nn.SegNet(ARCH)
    with pytest.raises(nn.ShapeError):
        nn.seg_forward(net, np.zeros((2, 8, 8)))
    with pytest.raises(nn.ShapeError):
        nn.seg_forward(net, np.zeros((3, 12, 8)))


def test_segnet_layer_widths():
    net = nn.SegNet(nn.ArchConfig(in_channels=6, num_classes=2, height=16, width=16))
    shapes = {k: v.shape for k, v in net.params.items()}
    assert shapes["conv1.weight"] == (16, 6, 3, 3)
    assert shapes["conv3.weight"] == (64, 32, 3, 3)
    assert shapes["conv5.weight"] == (16, 32, 3, 3)
    assert shapes["conv6.weight"] == (3, 16, 1, 1)
    assert list(net.params) == [f"conv{i}.{p}" for i in range(1, 7) for p in ("weight", "bias")]


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (2, 3, 4, 5), elements=st.floats(-50, 50)))
def test_softmax_sums_to_one_for_any_logits(z):
    p = nn.softmax(z, axis=1)
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-6)
    assert np.all(p >= 0)


# ---------------------------------------------------------------------------
# losses


def test_soft_ce_of_one_hot_match_is_zero():
    t = np.zeros((4, 3, 3))
    t[np.random.default_rng(0).integers(4, size=(3, 3)), np.arange(3)[:, None], np.arange(3)] = 1
    assert nn.soft_cross_entropy(t, t) <= 1e-6


def test_soft_ce_uniform_prediction_is_log_k():
    pred = np.full((4, 5, 5), 0.25)
    target = np.zeros((4, 5, 5))
    target[2] = 1
    assert nn.soft_cross_entropy(pred, target) == pytest.approx(math.log(4), abs=1e-4)


def test_soft_ce_single_pixel_scalar_oracle():
    pred = np.array([0.1, 0.2, 0.3, 0.4]).reshape(4, 1, 1)
    target = np.array([0.0, 0.5, 0.25, 0.25]).reshape(4, 1, 1)
    expected = -(0.5 * math.log(0.2 + 1e-8) + 0.25 * math.log(0.3 + 1e-8)
                 + 0.25 * math.log(0.4 + 1e-8))
    assert nn.soft_cross_entropy(pred, target) == pytest.approx(expected, rel=1e-12)


def test_soft_ce_self_is_mean_entropy():
    rng = np.random.default_rng(3)
    p = rng.uniform(0.01, 1, (5, 6, 7))
    p /= p.sum(axis=0)
    entropy = -(p * np.log(p + 1e-8)).sum(axis=0).mean()
    assert nn.soft_cross_entropy(p, p) == pytest.approx(entropy, rel=1e-12)


def test_soft_ce_shape_mismatch():
    with pytest.raises(nn.ShapeError):
        nn.soft_cross_entropy(np.ones((4, 2, 2)), np.ones((3, 2, 2)))


@pytest.mark.parametrize("score,label,expected", [
    (0.5, 1, math.log(2)),
    (0.9, 0, -math.log(0.1)),
    (1 - 1e-12, 1, 0.0),
])
def test_binary_cross_entropy(score, label, expected):
    assert float(nn.binary_cross_entropy(score, label)) == pytest.approx(expected, abs=1e-7)


def test_binary_cross_entropy_clamps_saturated_scores():
    assert np.isfinite(nn.binary_cross_entropy(0.0, 1))
    assert np.isfinite(nn.binary_cross_entropy(1.0, 0))


# ---------------------------------------------------------------------------
# discriminator


def test_zero_discriminator_outputs_half():
    disc = _zero(nn.Discriminator(ARCH, dtype=np.float64))
    mask = np.random.default_rng(0).uniform(size=(4, 8, 8))
    assert nn.disc_forward(disc, mask) == 0.5


def test_discriminator_output_in_open_interval_and_deterministic():
    rng = np.random.default_rng(4)
    masks = rng.uniform(size=(6, 4, 8, 8)) * 20
    a = nn.disc_forward(nn.init_params(3, ARCH, "discriminator"), masks)
    b = nn.disc_forward(nn.init_params(3, ARCH, "discriminator"), masks)
    assert a.shape == (6,)
    assert np.all((a > 0) & (a < 1))
    assert a.tobytes() == b.tobytes()


def test_discriminator_rejects_wrong_channels():
    with pytest.raises(nn.ShapeError):
        nn.disc_forward(nn.Discriminator(ARCH), np.zeros((3, 8, 8)))


# ---------------------------------------------------------------------------
# backward


def test_backward_before_forward_raises():
    net = nn.SegNet(ARCH)
    with pytest.raises(RuntimeError, match="before forward"):
        net.backward(np.zeros((1, 8, 8, 4), dtype=np.float32))


def _seg_grads(net, x, scale=1.0):
    t = np.random.default_rng(9).uniform(size=(len(x), 8, 8, 4))
    t /= t.sum(axis=-1, keepdims=True)
    p = nn.softmax(net.logits(x))
    net.backward(scale * nn.softmax_backward(p, nn.soft_cross_entropy_grad(p, t, axis=-1)))
    return {k: v.copy() for k, v in net.grads.items()}


def test_gradients_scale_linearly_with_loss():
    rng = np.random.default_rng(5)
    net = nn.SegNet(ARCH, dtype=np.float64).init(rng)
    x = rng.standard_normal((2, 8, 8, 3))
    g1 = _seg_grads(net, x)
    g2 = _seg_grads(net, x, scale=2.0)
    for k in g1:
        np.testing.assert_allclose(g2[k], 2 * g1[k], rtol=0, atol=1e-10)


def test_parameter_without_influence_has_zero_gradient():
    # a conv5 output channel whose conv6 column is zero cannot affect the loss
    rng = np.random.default_rng(6)
    net = nn.SegNet(ARCH, dtype=np.float64).init(rng)
    net.params["conv6.weight"][:, 3] = 0
    g = _seg_grads(net, rng.standard_normal((2, 8, 8, 3)))
    assert np.all(g["conv5.weight"][3] == 0)
    assert g["conv5.bias"][3] == 0


@pytest.mark.parametrize("name", list(CHECKS))
def test_gradcheck(name):
    [result] = run_gradcheck([name])
    assert result.max_rel_error < 1e-4, result


def test_gradcheck_detects_sign_flip():
    def flip(name, pairs):
        return [(-a, n, -f) for a, n, f in pairs] if name == "relu" else pairs

    results = {r.name: r for r in run_gradcheck(["relu", "dense"], tamper=flip)}
    assert not results["relu"].passed
    assert results["dense"].passed


def test_rel_error_zero_scale_uses_absolute_error():
    z = np.zeros(3)
    assert rel_error([(z, z, z)]) == 0.0


# ---------------------------------------------------------------------------
# adam


def _params():
    rng = np.random.default_rng(0)
    return {"a": rng.standard_normal((3, 2)), "b": rng.standard_normal(4)}


def test_adam_zero_gradient_leaves_params():
    p = _params()
    before = {k: v.copy() for k, v in p.items()}
    nn.adam_step(p, {k: np.zeros_like(v) for k, v in p.items()}, nn.AdamState(lr=1e-3))
    for k in p:
        np.testing.assert_array_equal(p[k], before[k])


def test_adam_first_step_moves_by_lr_times_sign():
    p = _params()
    before = {k: v.copy() for k, v in p.items()}
    g = {k: np.random.default_rng(1).standard_normal(v.shape) for k, v in p.items()}
    nn.adam_step(p, g, nn.AdamState(lr=1e-3))
    for k in p:
        # bias-corrected first step: lr * g / (|g| + eps)
        expected = -1e-3 * g[k] / (np.abs(g[k]) + 1e-8)
        np.testing.assert_allclose(p[k] - before[k], expected, rtol=1e-9, atol=1e-15)
        np.testing.assert_allclose(np.abs(p[k] - before[k]), 1e-3, rtol=1e-5)


def test_adam_is_deterministic():
    runs = []
    for _ in range(2):
        p = _params()
        state = nn.AdamState(lr=1e-2)
        rng = np.random.default_rng(2)
        for _ in range(5):
            nn.adam_step(p, {k: rng.standard_normal(v.shape) for k, v in p.items()}, state)
        runs.append(p)
    for k in runs[0]:
        assert runs[0][k].tobytes() == runs[1][k].tobytes()


def test_adam_shape_mismatch():
    p = _params()
    with pytest.raises(nn.ShapeError):
        nn.adam_step(p, {"a": np.zeros(3)}, nn.AdamState())


def test_adam_moments_match_parameter_shapes():
    p = _params()
    state = nn.AdamState()
    nn.adam_step(p, {k: np.ones_like(v) for k, v in p.items()}, state)
    assert state.step == 1
    assert all(state.m[k].shape == p[k].shape == state.v[k].shape for k in p)


# ---------------------------------------------------------------------------
# init


def test_init_same_seed_identical_different_seed_differs():
    a = nn.init_params(0, ARCH).params
    b = nn.init_params(0, ARCH).params
    c = nn.init_params(1, ARCH).params
    assert all(a[k].tobytes() == b[k].tobytes() for k in a)
    assert any(a[k].tobytes() != c[k].tobytes() for k in a if k.endswith("weight"))


@pytest.mark.parametrize("kind", ["segnet", "discriminator", "kt"])
def test_init_bounds_and_zero_biases(kind):
    net = nn.init_params(5, ARCH, kind)
    for name, arr in net.params.items():
        if name.endswith("bias"):
            assert np.all(arr == 0)
        else:
            fan_in = int(np.prod(arr.shape[1:]))
            assert np.all(np.abs(arr) < np.sqrt(6 / fan_in))


# ---------------------------------------------------------------------------
# kernels


@pytest.mark.skipif(kernels.COMPILED is None, reason="compiled kernels not built")
@pytest.mark.parametrize("dtype", [np.float32, np.float64])
@pytest.mark.parametrize("stride", [1, 2])
def test_compiled_kernels_match_fallback_bitwise(dtype, stride):
    rng = np.random.default_rng(0)
    x = rng.standard_normal((2, 8, 6, 5)).astype(dtype)
    C, P = kernels.COMPILED, kernels.PURE
    cols = C["im2col3x3"](x, stride)
    assert np.array_equal(cols, P["im2col3x3"](x, stride))
    d = rng.standard_normal(cols.shape).astype(dtype)
    assert np.array_equal(C["col2im3x3"](d, 8, 6, stride), P["col2im3x3"](d, 8, 6, stride))
    y, arg = C["maxpool2_forward"](x)
    y2, arg2 = P["maxpool2_forward"](x)
    assert np.array_equal(y, y2) and np.array_equal(arg, arg2)
    dy = rng.standard_normal(y.shape).astype(dtype)
    assert np.array_equal(C["maxpool2_backward"](dy, arg), P["maxpool2_backward"](dy, arg))
    assert np.array_equal(C["upsample2_forward"](x), P["upsample2_forward"](x))
    assert np.array_equal(C["upsample2_backward"](x), P["upsample2_backward"](x))


def test_maxpool_ties_go_to_first_element():
    x = np.ones((1, 2, 2, 1))
    for impl in filter(None, (kernels.PURE, kernels.COMPILED)):
        _, arg = impl["maxpool2_forward"](x)
        assert arg.item() == 0


def test_im2col_col2im_are_adjoint():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((2, 6, 6, 3))
    cols = kernels.im2col3x3(x, 1)
    d = rng.standard_normal(cols.shape)
    lhs = (cols * d).sum()
    rhs = (x * kernels.col2im3x3(d, 6, 6, 1)).sum()
    assert lhs == pytest.approx(rhs, rel=1e-12)
