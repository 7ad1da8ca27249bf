import math

import numpy as np
import pytest

from maeforge import tensor as T
from maeforge.tensor import Tensor
from maeforge.vit import (
    EncoderConfig,
    ForwardTrace,
    attention_block,
    classifier_forward,
    classify,
    encode,
    ffn_block,
    init_block,
    init_encoder,
    init_head,
)


def ln_ref(x, gamma, beta, eps=1e-5):
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    return gamma * (x - mu) / np.sqrt(var + eps) + beta


def block(rng, d=4, jitter=0.3):
    p = init_block(rng, d)
    for v in p.values():
        v.data += jitter * rng.standard_normal(v.shape)
    return p


def attention_loops(x, p):
    """Single-head attention with every weight computed in scalar loops."""
    t, d = x.shape
    wq, wk, wv, wo = (p[k].data for k in ("wq", "wk", "wv", "wo"))
    q, k, v = x @ wq, x @ wk, x @ wv
    weights = np.zeros((t, t))
    for i in range(t):
        logits = [sum(q[i, c] * k[j, c] for c in range(d)) / math.sqrt(d) for j in range(t)]
        top = max(logits)
        e = [math.exp(a - top) for a in logits]
        for j in range(t):
            weights[i, j] = e[j] / sum(e)
    ctx = np.zeros((t, d))
    for i in range(t):
        for j in range(t):
            ctx[i] += weights[i, j] * v[j]
    return ln_ref(ctx @ wo + x, p["attn_ln.gamma"].data, p["attn_ln.beta"].data)


def test_single_token_attention(rng):
    p = block(rng)
    x = rng.standard_normal((1, 4))
    want = ln_ref(x @ p["wv"].data @ p["wo"].data + x, p["attn_ln.gamma"].data, p["attn_ln.beta"].data)
    assert np.allclose(attention_block(Tensor(x), p).data, want, atol=1e-12)


def test_zero_query_key_gives_uniform_attention(rng):
    p = block(rng)
    p["wq"].data[:] = 0
    p["wk"].data[:] = 0
    x = rng.standard_normal((3, 4))
    mean_v = (x @ p["wv"].data).mean(axis=0, keepdims=True)
    want = ln_ref(mean_v @ p["wo"].data + x, p["attn_ln.gamma"].data, p["attn_ln.beta"].data)
    trace = ForwardTrace(keep_attention=True)
    assert np.allclose(attention_block(Tensor(x), p, trace=trace).data, want, atol=1e-12)
    assert np.allclose(trace.attention[0], 1 / 3)


def test_attention_matches_scalar_loops(rng):
    p = block(rng)
    x = rng.standard_normal((3, 4))
    assert np.allclose(attention_block(Tensor(x), p).data, attention_loops(x, p), atol=1e-12)


def test_multi_head_equals_per_head_slices(rng):
    d, heads = 8, 2
    p = block(rng, d)
    x = rng.standard_normal((5, d))
    q, k, v = (x @ p[n].data for n in ("wq", "wk", "wv"))
    ctx = []
    for h in range(heads):
        s = slice(h * 4, (h + 1) * 4)
        a = q[:, s] @ k[:, s].T / 2.0
        w = np.exp(a - a.max(axis=1, keepdims=True))
        ctx.append((w / w.sum(axis=1, keepdims=True)) @ v[:, s])
    want = ln_ref(np.concatenate(ctx, axis=1) @ p["wo"].data + x, p["attn_ln.gamma"].data, p["attn_ln.beta"].data)
    assert np.allclose(attention_block(Tensor(x), p, heads=heads).data, want, atol=1e-12)


def ffn_loops(x, p):
    w1, b1, w2, b2 = (p[f"ffn.{k}"].data for k in ("w1", "b1", "w2", "b2"))
    out = np.zeros_like(x)
    for t in range(x.shape[0]):
        hidden = [
            (lambda z: 0.5 * z * (1 + math.erf(z / math.sqrt(2))))(sum(x[t, i] * w1[i, j] for i in range(x.shape[1])) + b1[j])
            for j in range(w1.shape[1])
        ]
        for c in range(x.shape[1]):
            out[t, c] = sum(hidden[j] * w2[j, c] for j in range(len(hidden))) + b2[c] + x[t, c]
    return ln_ref(out, p["ffn_ln.gamma"].data, p["ffn_ln.beta"].data)


def test_ffn_matches_scalar_loops(rng):
    p = block(rng)
    x = rng.standard_normal((2, 4))
    assert np.allclose(ffn_block(Tensor(x), p).data, ffn_loops(x, p), atol=1e-12)


def test_ffn_zero_weights_is_layer_norm(rng):
    p = block(rng)
    for k in ("w1", "b1", "w2", "b2"):
        p[f"ffn.{k}"].data[:] = 0
    x = rng.standard_normal((3, 4))
    assert np.allclose(ffn_block(Tensor(x), p).data, ln_ref(x, p["ffn_ln.gamma"].data, p["ffn_ln.beta"].data), atol=1e-14)


def test_ffn_zero_affine_gives_zero(rng):
    p = block(rng)
    p["ffn_ln.gamma"].data[:] = 0
    p["ffn_ln.beta"].data[:] = 0
    assert np.array_equal(ffn_block(Tensor(rng.standard_normal((3, 4))), p).data, np.zeros((3, 4)))


def test_post_norm_graph_order(rng):
    p = block(rng)
    for fn in (attention_block, ffn_block):
        x = Tensor(rng.standard_normal((1, 3, 4)), requires_grad=True)
        out = fn(x, p)
        assert out.op == "layer_norm"
        residual = out.parents[0]
        assert residual.op == "add" and any(q is x for q in residual.parents)


def test_pre_norm_graph_order(rng):
    p = block(rng)
    x = Tensor(rng.standard_normal((1, 3, 4)), requires_grad=True)
    out = attention_block(x, p, norm_style="pre")
    assert out.op == "add" and out.parents[0] is x


def test_no_query_key_value_biases(rng):
    assert not any(k.startswith(("bq", "bk", "bv", "bo")) for k in init_block(rng, 8))


def test_zero_depth_rejected():
    with pytest.raises(ValueError):
        EncoderConfig(depth=0)


def test_depth_one_is_composition(rng):
    cfg = EncoderConfig(depth=1, width=8, heads=2)
    p = block(rng, 8)
    x = Tensor(rng.standard_normal((5, 8)))
    want = ffn_block(attention_block(x, p, heads=2), p).data
    assert np.array_equal(encode(x, [p], cfg).data, want)


def test_encode_permutation_equivariant(rng):
    cfg = EncoderConfig(depth=2, width=8, heads=2)
    blocks = [block(rng, 8) for _ in range(2)]
    x = rng.standard_normal((6, 8))
    perm = rng.permutation(6)
    a = encode(Tensor(x), blocks, cfg).data
    b = encode(Tensor(x[perm]), blocks, cfg).data
    assert np.allclose(a[perm], b, atol=1e-12)


def test_encode_block_count_must_match_depth(rng):
    with pytest.raises(ValueError):
        encode(Tensor(np.zeros((2, 8))), [block(rng, 8)], EncoderConfig(depth=2, width=8, heads=2))


def test_classifier_zero_weight_returns_bias(rng):
    cfg = EncoderConfig(depth=1, width=8, heads=2)
    head = {"w": Tensor(np.zeros((8, 2))), "b": Tensor([0.3, -0.7])}
    out = classify(Tensor(rng.standard_normal((2, 4, 8))), head, cfg)
    assert np.array_equal(out.data, [[0.3, -0.7], [0.3, -0.7]])


def test_mean_pool_of_identical_tokens(rng):
    cfg = EncoderConfig(depth=1, width=8, heads=2, pool="mean")
    head = {"w": Tensor(rng.standard_normal((8, 2))), "b": Tensor(rng.standard_normal(2))}
    tok = rng.standard_normal(8)
    many = classify(Tensor(np.tile(tok, (5, 1))), head, cfg).data
    one = classify(Tensor(tok[None]), head, cfg).data
    assert np.allclose(many, one, atol=1e-14)


def test_classifier_matches_scalar_oracle(rng):
    head = {"w": Tensor(rng.standard_normal((4, 2))), "b": Tensor(rng.standard_normal(2))}
    tokens = rng.standard_normal((3, 4))
    for pool in ("cls", "mean"):
        cfg = EncoderConfig(depth=1, width=4, heads=1, pool=pool)
        pooled = tokens[0] if pool == "cls" else [sum(tokens[t, c] for t in range(3)) / 3 for c in range(4)]
        want = [sum(pooled[c] * head["w"].data[c, k] for c in range(4)) + head["b"].data[k] for k in range(2)]
        assert np.allclose(classify(Tensor(tokens), head, cfg).data, want, atol=1e-14)


def test_cls_pool_needs_class_token():
    cfg = EncoderConfig(depth=1, width=4, heads=1)
    with pytest.raises(ValueError):
        classify(Tensor(np.zeros((2, 4))), {"w": Tensor(np.zeros((4, 2))), "b": Tensor(np.zeros(2))}, cfg, False)


@pytest.mark.parametrize("norm_style", ["post", "pre"])
def test_attention_rows_sum_to_one_everywhere(rng, norm_style):
    cfg = EncoderConfig(depth=3, width=8, heads=4, norm_style=norm_style)
    params = init_encoder(rng, cfg, patch_dim=16, n_patches=16, grid=(4, 4))
    params.update(init_head(rng, 8))
    trace = ForwardTrace(keep_attention=True)
    classifier_forward(rng.random((2, 16, 16, 1)), params, cfg, 4, trace)
    assert len(trace.attention) == 3
    for w in trace.attention:
        assert w.shape == (2, 4, 17, 17)
        assert np.all(np.abs(w.sum(axis=-1) - 1.0) <= 1e-12)


def test_classifier_forward_shapes_and_token_count(rng):
    cfg = EncoderConfig(depth=1, width=8, heads=2)
    params = init_encoder(rng, cfg, 16, 16, grid=(4, 4))
    params.update(init_head(rng, 8, 3))
    trace = ForwardTrace()
    logits = classifier_forward(rng.random((2, 16, 16, 1)), params, cfg, 4, trace)
    assert logits.shape == (2, 3)
    assert trace.encoder_tokens == [17]


def test_learned_position_table_is_a_parameter(rng):
    cfg = EncoderConfig(depth=1, width=8, heads=2, pos_embed="learned")
    params = init_encoder(rng, cfg, 16, 16, grid=(4, 4))
    params.update(init_head(rng, 8))
    loss = T.cross_entropy(classifier_forward(rng.random((2, 16, 16, 1)), params, cfg, 4), np.array([0, 1]))
    T.backward(loss)
    assert params["encoder.pos_embed"].grad is not None
