"""Tensor engine tests: oracle values, gradient checks, invariants."""

import io

import numpy as np
import pytest

from efaseg import numerics as nm
from efaseg.errors import ConfigError, DimensionError, NumericError, UsageError
from efaseg.numerics import Tensor

FD_H = 1e-5
FD_TOL = 1e-6


def rel_err(analytic, numeric):
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(1.0, np.abs(analytic) + np.abs(numeric))
    return np.max(np.abs(analytic - numeric) / denom)


def fd_check(build, inputs, tol=FD_TOL):
    """Central finite differences against every coordinate of every input.

    ``build`` maps raw arrays to a scalar Tensor loss; ``inputs`` are float64
    arrays. Returns the worst relative error across all inputs.
    """
    tensors = [Tensor(a.copy(), requires_grad=True) for a in inputs]
    loss = build(*tensors)
    nm.backward(loss)
    worst = 0.0
    for t, arr in zip(tensors, inputs):
        grad = t.grad
        assert grad is not None and grad.shape == arr.shape
        num = np.zeros_like(arr)
        flat = arr.reshape(-1)
        nflat = num.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + FD_H
            hi = float(build(*[Tensor(a) for a in inputs]).data)
            flat[i] = orig - FD_H
            lo = float(build(*[Tensor(a) for a in inputs]).data)
            flat[i] = orig
            nflat[i] = (hi - lo) / (2 * FD_H)
        worst = max(worst, rel_err(grad, num))
    assert worst < tol, f"gradient mismatch: rel err {worst:.3e}"
    return worst


def weighted_sum(out, rng, _cache={}):
    """Project an op output to a scalar with a weight fixed per output shape."""
    key = (id(rng), out.shape)
    if key not in _cache:
        _cache[key] = rng.normal(size=out.shape)
    return nm.reduce_sum(nm.mul(out, Tensor(_cache[key])))


# ---------------------------------------------------------------------------
# matmul


def test_matmul_identity():
    x = np.arange(6, dtype=np.float64).reshape(2, 3)
    out = nm.matmul(Tensor(np.eye(2)), Tensor(x))
    np.testing.assert_array_equal(out.data, x)


def test_matmul_hand_value():
    out = nm.matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[5.0, 6.0], [7.0, 8.0]]))
    np.testing.assert_allclose(out.data, [[19.0, 22.0], [43.0, 50.0]])


def test_matmul_grad_is_ones_bt():
    a = Tensor(np.random.default_rng(0).normal(size=(3, 4)), requires_grad=True)
    b = Tensor(np.random.default_rng(1).normal(size=(4, 5)), requires_grad=True)
    nm.backward(nm.reduce_sum(nm.matmul(a, b)))
    np.testing.assert_allclose(a.grad, np.ones((3, 5)) @ b.data.T)
    np.testing.assert_allclose(b.grad, a.data.T @ np.ones((3, 5)))


def test_matmul_shape_error_mentions_both_shapes():
    with pytest.raises(DimensionError) as err:
        nm.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 5))))
    assert "(2, 3)" in str(err.value) and "(4, 5)" in str(err.value)


# ---------------------------------------------------------------------------
# softmax


def test_softmax_uniform():
    out = nm.softmax_lastdim(Tensor([0.0, 0.0, 0.0]))
    np.testing.assert_allclose(out.data, np.full(3, 1 / 3))


def test_softmax_no_overflow():
    out = nm.softmax_lastdim(Tensor([1000.0, 1000.0]))
    np.testing.assert_allclose(out.data, [0.5, 0.5])


def test_softmax_closed_form():
    out = nm.softmax_lastdim(Tensor([0.0, np.log(2.0)]))
    np.testing.assert_allclose(out.data, [1 / 3, 2 / 3], atol=1e-12)


def test_softmax_rows_sum_to_one_and_permutation_equivariant():
    rng = np.random.default_rng(7)
    for _ in range(20):
        x = rng.normal(size=(4, 9))
        y = nm.softmax_lastdim(Tensor(x)).data
        np.testing.assert_allclose(y.sum(axis=-1), 1.0, atol=1e-6)
        perm = rng.permutation(9)
        y_perm = nm.softmax_lastdim(Tensor(x[:, perm])).data
        np.testing.assert_allclose(y_perm, y[:, perm], atol=1e-12)


# ---------------------------------------------------------------------------
# layer norm


def test_layer_norm_constant_vector_is_zero():
    x = Tensor(np.full((2, 5), 3.0))
    out = nm.layer_norm(x, Tensor(np.ones(5)), Tensor(np.zeros(5)))
    np.testing.assert_allclose(out.data, 0.0, atol=1e-6)


def test_layer_norm_gamma_zero_gives_beta():
    x = Tensor(np.random.default_rng(0).normal(size=(3, 4)))
    out = nm.layer_norm(x, Tensor(np.zeros(4)), Tensor(np.full(4, 2.5)))
    np.testing.assert_allclose(out.data, 2.5)


def test_layer_norm_statistics():
    x = Tensor(np.random.default_rng(3).normal(2.0, 3.0, size=(6, 32)))
    out = nm.layer_norm(x, Tensor(np.ones(32)), Tensor(np.zeros(32)))
    np.testing.assert_allclose(out.data.mean(axis=-1), 0.0, atol=1e-5)
    np.testing.assert_allclose(out.data.var(axis=-1), 1.0, atol=1e-5)


def test_layer_norm_channel_mismatch():
    with pytest.raises(DimensionError):
        nm.layer_norm(Tensor(np.zeros((2, 4))), Tensor(np.ones(3)), Tensor(np.zeros(3)))


# ---------------------------------------------------------------------------
# pooling


def grid_1_to_16():
    return np.arange(1, 17, dtype=np.float64).reshape(1, 4, 4, 1)


def test_avg_pool_identity_at_r1():
    x = np.random.default_rng(0).normal(size=(1, 3, 5, 2))
    np.testing.assert_array_equal(nm.avg_pool2d(Tensor(x), 1).data, x)


def test_avg_pool_constant():
    x = np.full((1, 6, 6, 3), 2.5)
    out = nm.avg_pool2d(Tensor(x), 2)
    assert out.shape == (1, 3, 3, 3)
    np.testing.assert_allclose(out.data, 2.5)


def test_avg_pool_block_means():
    out = nm.avg_pool2d(Tensor(grid_1_to_16()), 2)
    np.testing.assert_allclose(out.data[0, :, :, 0], [[3.5, 5.5], [11.5, 13.5]])


def test_avg_pool_ceil_mode_edge_counts():
    x = np.arange(6, dtype=np.float64).reshape(1, 2, 3, 1)
    out = nm.avg_pool2d(Tensor(x), 2)
    # right column block has a single member pair (2,5)
    np.testing.assert_allclose(out.data[0, 0, :, 0], [(0 + 1 + 3 + 4) / 4, (2 + 5) / 2])


def test_avg_pool_preserves_global_mean():
    rng = np.random.default_rng(11)
    for _ in range(10):
        x = rng.normal(size=(2, 8, 8, 3))
        out = nm.avg_pool2d(Tensor(x), 2)
        assert abs(out.data.mean() - x.mean()) < 1e-12


def test_max_pool_constant_and_blocks():
    np.testing.assert_allclose(nm.max_pool2d(Tensor(np.full((1, 4, 4, 1), 7.0)), 2).data, 7.0)
    out = nm.max_pool2d(Tensor(grid_1_to_16()), 2)
    np.testing.assert_allclose(out.data[0, :, :, 0], [[6, 8], [14, 16]])


def test_pool_rejects_bad_ratio():
    with pytest.raises(ConfigError):
        nm.avg_pool2d(Tensor(np.zeros((1, 4, 4, 1))), 0)


def overlapped_oracle(x, r):
    """Direct window-mean reference for the overlapped pooling."""
    b, h, w, c = x.shape
    oh, ow = -(-h // r), -(-w // r)
    k = r + 1
    pad_h = ((oh - 1) * r + k - h) // 2
    pad_w = ((ow - 1) * r + k - w) // 2
    out = np.zeros((b, oh, ow, c))
    for i in range(oh):
        for j in range(ow):
            rows = [i * r - pad_h + d for d in range(k)]
            cols = [j * r - pad_w + d for d in range(k)]
            rows = [v for v in rows if 0 <= v < h]
            cols = [v for v in cols if 0 <= v < w]
            out[:, i, j, :] = x[:, rows][:, :, cols].mean(axis=(1, 2))
    return out


def test_overlapped_pool_r1_is_2x2_smoothing():
    rng = np.random.default_rng(5)
    x = rng.normal(size=(1, 4, 5, 2))
    out = nm.overlapped_avg_pool2d(Tensor(x), 1)
    assert out.shape == (1, 4, 5, 2)
    np.testing.assert_allclose(out.data, overlapped_oracle(x, 1), atol=1e-12)


@pytest.mark.parametrize("shape,r", [((1, 4, 4, 1), 2), ((2, 5, 7, 3), 2), ((1, 6, 6, 2), 3)])
def test_overlapped_pool_matches_oracle(shape, r):
    x = np.random.default_rng(sum(shape) + r).normal(size=shape)
    out = nm.overlapped_avg_pool2d(Tensor(x), r)
    np.testing.assert_allclose(out.data, overlapped_oracle(x, r), atol=1e-12)


# ---------------------------------------------------------------------------
# convolution


def test_conv2d_1x1_ones_identity():
    x = np.random.default_rng(0).normal(size=(1, 4, 4, 1))
    out = nm.conv2d(Tensor(x), Tensor(np.ones((1, 1, 1, 1))))
    np.testing.assert_array_equal(out.data, x)


def test_depthwise_ones_interior():
    x = np.ones((1, 5, 5, 2))
    out = nm.depthwise_conv2d(Tensor(x), Tensor(np.ones((3, 3, 2))))
    np.testing.assert_allclose(out.data[0, 1:4, 1:4, :], 9.0)
    assert out.data[0, 0, 0, 0] == 4.0  # corner sees a 2x2 window


def test_conv2d_output_extent():
    x = Tensor(np.zeros((1, 64, 64, 3)))
    out = nm.conv2d(x, Tensor(np.zeros((7, 7, 3, 8))), stride=4, pad=3)
    assert out.shape == (1, 16, 16, 8)


def test_conv2d_channel_mismatch():
    with pytest.raises(DimensionError):
        nm.conv2d(Tensor(np.zeros((1, 4, 4, 3))), Tensor(np.zeros((3, 3, 2, 8))))


def test_conv2d_kernel_too_large():
    with pytest.raises(ConfigError):
        nm.conv2d(Tensor(np.zeros((1, 2, 2, 1))), Tensor(np.zeros((5, 5, 1, 1))))


# ---------------------------------------------------------------------------
# bilinear upsample


def test_bilinear_identity():
    x = np.random.default_rng(1).normal(size=(1, 3, 4, 2))
    np.testing.assert_array_equal(nm.bilinear_upsample(Tensor(x), 3, 4).data, x)


def test_bilinear_constant():
    out = nm.bilinear_upsample(Tensor(np.full((1, 2, 2, 3), 1.5)), 8, 8)
    np.testing.assert_allclose(out.data, 1.5)


def test_bilinear_half_pixel_values():
    x = np.array([0.0, 1.0]).reshape(1, 1, 2, 1)
    out = nm.bilinear_upsample(Tensor(x), 1, 4)
    np.testing.assert_allclose(out.data.ravel(), [0.0, 0.25, 0.75, 1.0])


def test_bilinear_rejects_downscale():
    with pytest.raises(ConfigError):
        nm.bilinear_upsample(Tensor(np.zeros((1, 4, 4, 1))), 2, 4)


# ---------------------------------------------------------------------------
# elementwise / reductions / shape ops


def test_sum_gradient_is_ones():
    x = Tensor(np.random.default_rng(0).normal(size=(3, 4)), requires_grad=True)
    nm.backward(nm.reduce_sum(x))
    np.testing.assert_array_equal(x.grad, np.ones((3, 4)))


def test_mul_gradient_is_other_factor():
    rng = np.random.default_rng(2)
    x = Tensor(rng.normal(size=(5,)), requires_grad=True)
    y = Tensor(rng.normal(size=(5,)), requires_grad=True)
    nm.backward(nm.reduce_sum(nm.mul(x, y)))
    np.testing.assert_allclose(x.grad, y.data)
    np.testing.assert_allclose(y.grad, x.data)


def test_reshape_roundtrip_bitwise():
    x = np.random.default_rng(0).normal(size=(2, 3, 4))
    back = nm.reshape(nm.reshape(Tensor(x), (4, 6)), (2, 3, 4))
    assert np.array_equal(back.data, x)


def test_transpose_involution_bitwise():
    x = np.random.default_rng(0).normal(size=(2, 3, 4))
    back = nm.transpose(nm.transpose(Tensor(x), (2, 0, 1)), (1, 2, 0))
    assert np.array_equal(back.data, x)


def test_concat_lastdim_and_grad():
    a = Tensor(np.ones((2, 2)), requires_grad=True)
    b = Tensor(np.zeros((2, 3)), requires_grad=True)
    out = nm.concat_lastdim([a, b])
    assert out.shape == (2, 5)
    nm.backward(nm.reduce_sum(nm.mul(out, Tensor(np.arange(10.0).reshape(2, 5)))))
    np.testing.assert_allclose(a.grad, [[0, 1], [5, 6]])


def test_cross_entropy_matches_manual():
    logits = np.array([[2.0, 0.0, -1.0], [0.5, 0.5, 0.5]])
    labels = np.array([0, 2])
    out = nm.cross_entropy_logits(Tensor(logits), labels)
    expect = -(np.log(np.exp(2) / np.exp(logits[0]).sum()) + np.log(1 / 3)) / 2
    np.testing.assert_allclose(float(out.data), expect, rtol=1e-12)


def test_cross_entropy_ignore_index():
    logits = np.zeros((4, 3))
    labels = np.array([0, 255, 255, 1])
    out = nm.cross_entropy_logits(Tensor(logits), labels)
    np.testing.assert_allclose(float(out.data), np.log(3.0))


# ---------------------------------------------------------------------------
# graph mechanics


def test_backward_on_nonscalar_raises():
    x = Tensor(np.zeros((2, 2)), requires_grad=True)
    with pytest.raises(UsageError):
        nm.backward(nm.mul(x, x))


def test_double_backward_raises():
    x = Tensor(np.ones(3), requires_grad=True)
    loss = nm.reduce_sum(nm.mul(x, x))
    nm.backward(loss)
    with pytest.raises(UsageError):
        nm.backward(loss)


def test_nan_surfaced_not_propagated():
    x = Tensor(np.array([1.0, np.inf]))
    with pytest.raises(NumericError) as err:
        nm.mul(x, Tensor(np.array([1.0, 0.0])))  # inf * 0 -> nan
    assert "mul" in str(err.value)


def test_grad_accumulates_across_fanout():
    x = Tensor(np.array([2.0]), requires_grad=True)
    y = nm.add(nm.mul(x, x), x)  # d/dx (x^2 + x) = 2x + 1 = 5
    nm.backward(nm.reduce_sum(y))
    np.testing.assert_allclose(x.grad, [5.0])


def test_no_grad_blocks_recording():
    x = Tensor(np.ones(3), requires_grad=True)
    with nm.no_grad():
        y = nm.reduce_sum(nm.mul(x, x))
    assert y._parents == ()


def test_two_passes_bitwise_identical():
    def run():
        rng = np.random.default_rng(42)
        x = Tensor(rng.normal(size=(2, 4, 4, 3)), requires_grad=True)
        k = Tensor(rng.normal(size=(3, 3, 3, 4)), requires_grad=True)
        out = nm.gelu(nm.conv2d(x, k, stride=1, pad=1))
        nm.backward(nm.reduce_sum(out))
        return x.grad.copy(), k.grad.copy()

    g1, g2 = run(), run()
    assert np.array_equal(g1[0], g2[0]) and np.array_equal(g1[1], g2[1])


# ---------------------------------------------------------------------------
# finite-difference gradient suite over every differentiable op


def _op_cases(rng):
    """(name, build, input arrays) triples driving the FD sweep."""
    r3 = lambda *s: rng.normal(size=s)
    return [
        ("matmul", lambda a, b: weighted_sum(nm.matmul(a, b), rng),
         [r3(2, 3, 4), r3(2, 4, 2)]),
        ("add", lambda a, b: weighted_sum(nm.add(a, b), rng), [r3(3, 4), r3(4)]),
        ("mul", lambda a, b: weighted_sum(nm.mul(a, b), rng), [r3(3, 4), r3(3, 4)]),
        ("scale", lambda a: weighted_sum(nm.scale(a, -1.7), rng), [r3(3, 4)]),
        ("gelu", lambda a: weighted_sum(nm.gelu(a), rng), [r3(3, 5)]),
        ("softmax", lambda a: weighted_sum(nm.softmax_lastdim(a), rng), [r3(3, 6)]),
        ("layer_norm", lambda a, g, b: weighted_sum(nm.layer_norm(a, g, b), rng),
         [r3(4, 6), 1 + 0.2 * r3(6), 0.2 * r3(6)]),
        ("avg_pool", lambda a: weighted_sum(nm.avg_pool2d(a, 2), rng), [r3(1, 5, 6, 2)]),
        ("max_pool", lambda a: weighted_sum(nm.max_pool2d(a, 2), rng), [r3(1, 4, 5, 2)]),
        ("overlapped_pool", lambda a: weighted_sum(nm.overlapped_avg_pool2d(a, 2), rng),
         [r3(1, 5, 4, 2)]),
        ("conv2d", lambda a, k: weighted_sum(nm.conv2d(a, k, stride=2, pad=1), rng),
         [r3(1, 5, 5, 2), r3(3, 3, 2, 3)]),
        ("depthwise", lambda a, k: weighted_sum(nm.depthwise_conv2d(a, k), rng),
         [r3(1, 4, 4, 3), r3(3, 3, 3)]),
        ("bilinear", lambda a: weighted_sum(nm.bilinear_upsample(a, 5, 7), rng),
         [r3(1, 3, 4, 2)]),
        ("reshape_transpose", lambda a: weighted_sum(
            nm.transpose(nm.reshape(a, (3, 2, 2)), (1, 0, 2)), rng), [r3(2, 6)]),
        ("concat", lambda a, b: weighted_sum(nm.concat_lastdim([a, b]), rng),
         [r3(2, 3), r3(2, 2)]),
        ("mean", lambda a: nm.reduce_mean(nm.mul(a, a)), [r3(3, 4)]),
        ("cross_entropy", lambda a: nm.cross_entropy_logits(
            a, np.array([[0, 1], [2, 0]])), [r3(2, 2, 3)]),
    ]


@pytest.mark.parametrize("seed", range(3))
def test_fd_all_ops_smoke(seed):
    rng = np.random.default_rng(seed)
    for name, build, inputs in _op_cases(rng):
        err = fd_check(build, inputs)
        assert err < FD_TOL, f"{name} failed at seed {seed}"


# ---------------------------------------------------------------------------
# serialization


def test_tensor_roundtrip_f32_f64():
    for dtype in (np.float32, np.float64):
        arr = np.random.default_rng(0).normal(size=(2, 3, 4)).astype(dtype)
        buf = io.BytesIO()
        nm.write_tensor(buf, arr)
        buf.seek(0)
        back = nm.read_tensor(buf)
        assert back.dtype == dtype and np.array_equal(back, arr)


def test_tensor_format_layout():
    arr = np.array([1.0, 2.0], dtype=np.float32)
    buf = io.BytesIO()
    nm.write_tensor(buf, arr)
    raw = buf.getvalue()
    assert raw[:4] == b"EFT1"
    assert raw[4] == 0 and raw[5] == 1           # f32 tag, rank 1
    assert int.from_bytes(raw[6:14], "little") == 2
    assert raw[14:] == arr.tobytes()


def test_tensor_bad_magic():
    with pytest.raises(ConfigError):
        nm.read_tensor(io.BytesIO(b"XXXX\x00\x01" + b"\x00" * 16))


def test_mac_counter_matmul_and_conv():
    with nm.mac_counter() as mc:
        nm.matmul(Tensor(np.zeros((2, 3, 4))), Tensor(np.zeros((2, 4, 5))))
    assert mc.total == 2 * 3 * 4 * 5
    with nm.mac_counter() as mc:
        nm.conv2d(Tensor(np.zeros((1, 8, 8, 3))), Tensor(np.zeros((3, 3, 3, 16))), 1, 1)
    assert mc.total == 8 * 8 * 9 * 3 * 16
