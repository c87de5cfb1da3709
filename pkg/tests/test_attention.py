"""Attention operator tests against an independent brute-force oracle."""

import numpy as np
import pytest

from efaseg import attention as at
from efaseg import numerics as nm
from efaseg.attention import AttentionConfig, AttentionWeights, init_attention_weights
from efaseg.errors import ConfigError
from efaseg.flops import attention_cost
from efaseg.numerics import Tensor

from test_numerics import fd_check, weighted_sum


# ---------------------------------------------------------------------------
# brute-force reference: explicit loops over blocks, heads, queries and keys


def oracle_avg_pool(x, r):
    b, h, w, c = x.shape
    oh, ow = -(-h // r), -(-w // r)
    out = np.zeros((b, oh, ow, c))
    for i in range(oh):
        for j in range(ow):
            block = x[:, i * r : min(h, (i + 1) * r), j * r : min(w, (j + 1) * r), :]
            out[:, i, j, :] = block.mean(axis=(1, 2))
    return out


def oracle_attention(x, cfg: AttentionConfig, w: AttentionWeights, r):
    """Loop implementation of both operator variants, average pooling only."""
    b, h, wd, c = x.shape
    pooled = oracle_avg_pool(x, r) if r > 1 else x.copy()
    q_tok = x.reshape(b, h * wd, c)
    kv_tok = pooled.reshape(b, -1, c)
    if cfg.sr_projection:
        kv_tok = kv_tok @ w.w_sr.data
        if w.b_sr is not None:
            kv_tok = kv_tok + w.b_sr.data
        mu = kv_tok.mean(-1, keepdims=True)
        var = kv_tok.var(-1, keepdims=True)
        kv_tok = (kv_tok - mu) / np.sqrt(var + 1e-6)
    if cfg.variant == "embedded":
        q = q_tok @ w.wq.data + (w.bq.data if w.bq is not None else 0)
        k = kv_tok @ w.wk.data + (w.bk.data if w.bk is not None else 0)
        v = kv_tok @ w.wv.data + (w.bv.data if w.bv is not None else 0)
    else:
        q, k, v = q_tok, kv_tok, kv_tok
    dk = c // cfg.heads
    out = np.zeros((b, h * wd, c))
    for bi in range(b):
        for head in range(cfg.heads):
            sl = slice(head * dk, (head + 1) * dk)
            for qi in range(h * wd):
                logits = np.array([q[bi, qi, sl] @ k[bi, ki, sl] / np.sqrt(dk)
                                   for ki in range(k.shape[1])])
                e = np.exp(logits - logits.max())
                att = e / e.sum()
                for ki in range(k.shape[1]):
                    out[bi, qi, sl] += att[ki] * v[bi, ki, sl]
    out = out @ w.wo.data
    if w.bo is not None:
        out = out + w.bo.data
    return out.reshape(b, h, wd, c)


def make_case(rng, variant="embedding_free", heads=2, c=8, h=4, w=4, r=2,
              sr_projection=False, bias_free=True):
    cfg = AttentionConfig(channels=c, heads=heads, train_ratio=r, variant=variant,
                          sr_projection=sr_projection, bias_free_projections=bias_free)
    weights = init_attention_weights(cfg, rng, dtype=np.float64)
    x = rng.normal(size=(1, h, w, c))
    return cfg, weights, x


# ---------------------------------------------------------------------------


def test_spatial_reduce_identity():
    x = np.random.default_rng(0).normal(size=(1, 4, 4, 3))
    out = at.spatial_reduce(Tensor(x), 1)
    np.testing.assert_array_equal(out.data, x)


def test_spatial_reduce_block_means_per_channel():
    x = np.stack([np.arange(1, 17, dtype=np.float64).reshape(4, 4)] * 3, axis=-1)[None]
    out = at.spatial_reduce(Tensor(x), 2)
    for ch in range(3):
        np.testing.assert_allclose(out.data[0, :, :, ch], [[3.5, 5.5], [11.5, 13.5]])


def test_spatial_reduce_token_count_196_to_49():
    x = Tensor(np.random.default_rng(0).normal(size=(1, 14, 14, 4)))
    out = at.spatial_reduce(x, 2)
    assert out.shape[1] * out.shape[2] == 49


def test_spatial_reduce_rejects_bad_ratio():
    with pytest.raises(ConfigError):
        at.spatial_reduce(Tensor(np.zeros((1, 4, 4, 1))), 0)


def test_single_token_identity_with_identity_projection():
    cfg = AttentionConfig(channels=4, heads=1)
    w = AttentionWeights(wo=Tensor(np.eye(4)))
    x = np.random.default_rng(0).normal(size=(1, 1, 1, 4))
    out = at.efa_forward(Tensor(x), cfg, w, 1)
    np.testing.assert_allclose(out.data, x, atol=1e-12)


def test_collapsed_kv_gives_identical_positions():
    rng = np.random.default_rng(3)
    cfg, w, x = make_case(rng, heads=2, c=8, h=4, w=4, r=8)
    out = at.efa_forward(Tensor(x), cfg, w, 8).data.reshape(16, 8)
    np.testing.assert_allclose(out, np.broadcast_to(out[0], out.shape), atol=1e-12)
    # and it equals the projected mean-pooled value
    expect = x.reshape(16, 8).mean(axis=0) @ w.wo.data
    np.testing.assert_allclose(out[0], expect, atol=1e-12)


@pytest.mark.parametrize("variant", ["embedding_free", "embedded"])
def test_oracle_agreement_50_cases(variant):
    rng = np.random.default_rng(17 if variant == "embedded" else 11)
    for case in range(50):
        heads = int(rng.choice([1, 2, 4]))
        c = int(rng.choice([4, 8, 16]))
        h = int(rng.integers(1, 7))
        w = int(rng.integers(1, 7))
        r = int(rng.choice([1, 2, 3]))
        sr = bool(rng.integers(0, 2))
        bias_free = bool(rng.integers(0, 2))
        cfg, weights, x = make_case(rng, variant, heads, c, h, w, r, sr, bias_free)
        fwd = at.embedded_sra_forward if variant == "embedded" else at.efa_forward
        got = fwd(Tensor(x), cfg, weights, r).data
        want = oracle_attention(x, cfg, weights, r)
        assert np.max(np.abs(got - want)) < 1e-6, f"case {case} diverged"


def test_identity_embeddings_reduce_to_embedding_free():
    rng = np.random.default_rng(5)
    cfg, w, x = make_case(rng, "embedded", heads=2, c=8)
    eye = np.eye(8)
    w.wq.data, w.wk.data, w.wv.data = eye.copy(), eye.copy(), eye.copy()
    free_cfg = AttentionConfig(channels=8, heads=2, train_ratio=2)
    out_embedded = at.embedded_sra_forward(Tensor(x), cfg, w, 2)
    out_free = at.efa_forward(Tensor(x), free_cfg, w, 2)
    np.testing.assert_allclose(out_embedded.data, out_free.data, atol=1e-12)


def test_parameter_gap_is_3c2_when_bias_free():
    c = 128
    rng = np.random.default_rng(0)
    for sr in (False, True):
        free = init_attention_weights(
            AttentionConfig(c, 8, variant="embedding_free", sr_projection=sr), rng)
        emb = init_attention_weights(
            AttentionConfig(c, 8, variant="embedded", sr_projection=sr), rng)
        n_free = sum(t.size for _, t in free.named_parameters())
        n_emb = sum(t.size for _, t in emb.named_parameters())
        assert n_emb - n_free == 3 * c * c


@pytest.mark.parametrize("variant", ["embedding_free", "embedded"])
@pytest.mark.parametrize("sr", [False, True])
@pytest.mark.parametrize("bias_free", [False, True])
def test_actual_params_equal_analytic(variant, sr, bias_free):
    cfg = AttentionConfig(16, 4, variant=variant, sr_projection=sr,
                          bias_free_projections=bias_free)
    w = init_attention_weights(cfg, np.random.default_rng(0))
    actual = sum(t.size for _, t in w.named_parameters())
    analytic = attention_cost(36, 16, r=2, variant=variant, sr_projection=sr,
                              bias_free=bias_free).total_params
    assert actual == analytic


def test_attention_map_single_key_all_ones():
    rng = np.random.default_rng(1)
    cfg, w, x = make_case(rng, heads=2, c=8, h=4, w=4, r=8)
    amap = at.attention_map(Tensor(x), cfg, w, 8)
    assert amap.shape == (1, 2, 16, 1)
    np.testing.assert_allclose(amap.data, 1.0, atol=1e-12)


def test_attention_map_rows_sum_to_one():
    rng = np.random.default_rng(2)
    for _ in range(5):
        cfg, w, x = make_case(rng, heads=int(rng.choice([1, 2])), c=8,
                              h=int(rng.integers(2, 6)), w=int(rng.integers(2, 6)), r=2)
        amap = at.attention_map(Tensor(x), cfg, w, 2)
        np.testing.assert_allclose(amap.data.sum(axis=-1), 1.0, atol=1e-6)


def test_shape_invariance_across_ratios():
    rng = np.random.default_rng(4)
    cfg, w, x = make_case(rng, heads=2, c=8, h=8, w=8)
    shapes = {at.efa_forward(Tensor(x), cfg, w, r).shape for r in (1, 2, 4, 8)}
    assert shapes == {(1, 8, 8, 8)}


def test_channel_permutation_consistency():
    """Permuting channels of x and Wo rows/cols permutes the output (heads=1)."""
    rng = np.random.default_rng(6)
    cfg, w, x = make_case(rng, heads=1, c=8, h=4, w=4, r=2)
    perm = rng.permutation(8)
    out = at.efa_forward(Tensor(x), cfg, w, 2).data
    w_perm = AttentionWeights(wo=Tensor(w.wo.data[np.ix_(perm, perm)]))
    out_perm = at.efa_forward(Tensor(x[..., perm]), cfg, w_perm, 2).data
    np.testing.assert_allclose(out_perm, out[..., perm], atol=1e-10)


def test_constant_input_constant_output_any_ratio():
    rng = np.random.default_rng(8)
    cfg, w, _ = make_case(rng, heads=2, c=8, h=4, w=6)
    x = np.full((1, 4, 6, 8), 0.37)
    for r in (1, 2, 4):
        out = at.efa_forward(Tensor(x), cfg, w, r).data.reshape(-1, 8)
        np.testing.assert_allclose(out, np.broadcast_to(out[0], out.shape), atol=1e-12)


def test_non_finite_logits_raise():
    cfg = AttentionConfig(channels=2, heads=1)
    w = AttentionWeights(wo=Tensor(np.eye(2)))
    x = np.full((1, 2, 2, 2), 1e300)
    with pytest.raises(Exception) as err:
        at.efa_forward(Tensor(x), cfg, w, 1)
    assert "non-finite" in str(err.value)


@pytest.mark.parametrize("variant,sr", [("embedding_free", False),
                                        ("embedding_free", True),
                                        ("embedded", False)])
def test_gradients_wrt_input_and_all_weights(variant, sr):
    rng = np.random.default_rng(9)
    cfg = AttentionConfig(channels=4, heads=2, variant=variant, sr_projection=sr,
                          bias_free_projections=False)
    template = init_attention_weights(cfg, rng, dtype=np.float64)
    names = [name for name, _ in template.named_parameters()]
    x0 = rng.normal(size=(1, 4, 4, 4))
    fwd = at.embedded_sra_forward if variant == "embedded" else at.efa_forward

    def build(x, *params):
        w = AttentionWeights(wo=None)
        for name, p in zip(names, params):
            setattr(w, name, p)
        return weighted_sum(fwd(x, cfg, w, 2), rng)

    inputs = [x0] + [t.data.copy() for _, t in template.named_parameters()]
    fd_check(build, inputs)
