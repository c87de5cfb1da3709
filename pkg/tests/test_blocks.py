"""Feed-forward layer, transformer block, and patch embedding tests."""

import numpy as np
import pytest

from efaseg import blocks as blk
from efaseg import numerics as nm
from efaseg.attention import AttentionConfig
from efaseg.errors import ConfigError
from efaseg.numerics import Tensor

from test_numerics import fd_check, weighted_sum


def zero_weights(w):
    for _, t in w.named_parameters():
        t.data = np.zeros_like(t.data)
    return w


def make_block(rng, c=8, heads=2, e=2, variant="embedding_free", dtype=np.float64):
    cfg = AttentionConfig(channels=c, heads=heads, variant=variant)
    return cfg, blk.init_eft_block_weights(cfg, e, rng, dtype=dtype)


# ---------------------------------------------------------------------------
# feed-forward layer


def test_ffl_zero_weights_zero_output():
    rng = np.random.default_rng(0)
    w = zero_weights(blk.init_ffl_weights(4, 2, rng, dtype=np.float64))
    x = rng.normal(size=(1, 3, 3, 4))
    out = blk.ffl_forward(Tensor(x), w)
    np.testing.assert_array_equal(out.data, np.zeros_like(x))


def test_ffl_identity_path_is_gelu():
    """e=1, identity linears, center-only depthwise kernel: the net is GELU."""
    rng = np.random.default_rng(1)
    w = blk.init_ffl_weights(4, 1, rng, dtype=np.float64)
    w.w1.data = np.eye(4)
    w.w2.data = np.eye(4)
    w.b1.data[:] = 0
    w.b2.data[:] = 0
    w.dwb.data[:] = 0
    w.dw.data = np.zeros((3, 3, 4))
    w.dw.data[1, 1, :] = 1.0
    x = rng.normal(size=(1, 4, 4, 4))
    out = blk.ffl_forward(Tensor(x), w)
    np.testing.assert_allclose(out.data, nm.gelu(Tensor(x)).data, atol=1e-12)


def test_ffl_gradients_all_params():
    rng = np.random.default_rng(2)
    template = blk.init_ffl_weights(3, 2, rng, dtype=np.float64)
    names = [n for n, _ in template.named_parameters()]
    x0 = rng.normal(size=(1, 3, 3, 3))

    def build(x, *params):
        w = blk.FflWeights(**dict(zip(names, params)))
        return weighted_sum(blk.ffl_forward(x, w), rng)

    fd_check(build, [x0] + [t.data.copy() for _, t in template.named_parameters()])


# ---------------------------------------------------------------------------
# transformer block


def test_block_zero_weights_is_identity():
    rng = np.random.default_rng(3)
    cfg, w = make_block(rng)
    zero_weights(w)
    x = rng.normal(size=(1, 4, 4, 8))
    out = blk.eft_block_forward(Tensor(x), cfg, w, 2)
    np.testing.assert_allclose(out.data, x, atol=1e-12)


@pytest.mark.parametrize("r", [1, 2, 4])
def test_block_shape_preserved(r):
    rng = np.random.default_rng(4)
    cfg, w = make_block(rng)
    x = rng.normal(size=(2, 4, 4, 8))
    assert blk.eft_block_forward(Tensor(x), cfg, w, r).shape == (2, 4, 4, 8)


def test_block_full_gradient_check():
    rng = np.random.default_rng(5)
    cfg, w = make_block(rng, c=4, heads=2, e=1)
    names = [n for n, _ in w.named_parameters()]
    x0 = rng.normal(size=(1, 2, 2, 4))

    def build(x, *params):
        w2 = blk.init_eft_block_weights(cfg, 1, np.random.default_rng(0), dtype=np.float64)
        for (name, _), p in zip(w2.named_parameters(), params):
            obj, attr = w2, name
            while "." in attr:
                head, attr = attr.split(".", 1)
                obj = getattr(obj, head)
            setattr(obj, attr, p)
        return weighted_sum(blk.eft_block_forward(x, cfg, w2, 2), rng)

    fd_check(build, [x0] + [t.data.copy() for _, t in w.named_parameters()], tol=1e-6)


# ---------------------------------------------------------------------------
# patch embedding


def test_patch_embed_stage_cascade_shapes():
    rng = np.random.default_rng(6)
    x = Tensor(rng.normal(size=(1, 64, 64, 3)))
    sizes = []
    cin = 3
    for i, (k, s, p) in enumerate(((7, 4, 3), (3, 2, 1), (3, 2, 1), (3, 2, 1))):
        cout = 4 * (i + 1)
        w = blk.init_patch_embed_weights(cin, cout, k, s, p, rng, dtype=np.float64)
        x = blk.patch_embed_forward(x, w)
        sizes.append(x.shape[1])
        cin = cout
    assert sizes == [16, 8, 4, 2]


def test_patch_embed_stride4_extent_formula():
    # (64 + 2*3 - 7) // 4 + 1 == 16
    assert (64 + 2 * 3 - 7) // 4 + 1 == 16
    rng = np.random.default_rng(7)
    w = blk.init_patch_embed_weights(3, 8, 7, 4, 3, rng)
    out = blk.patch_embed_forward(Tensor(np.zeros((1, 64, 64, 3), dtype=np.float32)), w)
    assert out.shape == (1, 16, 16, 8)


def test_patch_embed_constant_input_constant_preaffine():
    rng = np.random.default_rng(8)
    w = blk.init_patch_embed_weights(1, 1, 3, 1, 1, rng, dtype=np.float64)
    w.kernel.data = np.ones((3, 3, 1, 1))
    w.bias.data[:] = 0.0
    x = np.full((1, 6, 6, 1), 2.0)
    conv = nm.conv2d(Tensor(x), w.kernel, stride=1, pad=1)
    # interior positions all see the same 3x3 window sum
    np.testing.assert_allclose(conv.data[0, 1:-1, 1:-1, 0], 18.0)


def test_patch_embed_rejects_undersized_input():
    rng = np.random.default_rng(9)
    w = blk.init_patch_embed_weights(3, 8, 7, 4, 0, rng)
    with pytest.raises(ConfigError):
        blk.patch_embed_forward(Tensor(np.zeros((1, 4, 4, 3))), w)
