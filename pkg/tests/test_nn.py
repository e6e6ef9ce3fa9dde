import math

import numpy as np
import pytest

from carformer import autograd as ag
from carformer import nn


def naive_attention(xq, xkv, layer, valid=None):
    """Per-head loop straight from the definition."""
    h, dh = layer.heads, layer.head_dim
    q, k, v = xq @ layer.w_q.data, xkv @ layer.w_k.data, xkv @ layer.w_v.data
    heads = []
    for i in range(h):
        sl = slice(i * dh, (i + 1) * dh)
        s = q[:, sl] @ k[:, sl].T / math.sqrt(dh)
        if valid is not None:
            s = np.where(valid[None, :], s, -np.inf)
        w = np.exp(s - s.max(axis=1, keepdims=True))
        w /= w.sum(axis=1, keepdims=True)
        heads.append(w @ v[:, sl])
    return np.concatenate(heads, axis=1) @ layer.w_o.data


def test_attention_hand_computed_example():
    layer = nn.MultiHeadAttention(2, 1, np.random.default_rng(0))
    for w in (layer.w_q, layer.w_k, layer.w_v, layer.w_o):
        w.data[...] = np.eye(2)
    x = np.array([[1.0, 0.0], [0.0, 1.0]])
    # scores = x x^T / sqrt(2): diagonal 1/sqrt2, off-diagonal 0
    a = math.exp(1 / math.sqrt(2))
    expected = np.array([[a, 1.0], [1.0, a]]) / (a + 1.0)
    out = nn.attention(x, x, layer).data
    np.testing.assert_allclose(out, expected, rtol=1e-14)


def test_attention_matches_per_head_loop(backend):
    rng = np.random.default_rng(3)
    layer = nn.MultiHeadAttention(8, 4, rng)
    xq, xkv = rng.normal(size=(3, 8)), rng.normal(size=(5, 8))
    valid = np.array([True, True, False, True, False])
    got = layer(ag.Tensor(xq), ag.Tensor(xkv), valid).data
    np.testing.assert_allclose(got, naive_attention(xq, xkv, layer, valid), rtol=1e-12, atol=1e-14)


def test_attention_functional_pad_mask_convention():
    rng = np.random.default_rng(4)
    layer = nn.MultiHeadAttention(4, 2, rng)
    x = rng.normal(size=(3, 4))
    pad = np.array([False, False, True])
    np.testing.assert_array_equal(nn.attention(x, x, layer, pad).data,
                                  layer(ag.Tensor(x), ag.Tensor(x), ~pad).data)


def test_attention_rejects_fully_masked_rows():
    layer = nn.MultiHeadAttention(4, 2, np.random.default_rng(0))
    x = ag.Tensor(np.ones((1, 2, 4)))
    with pytest.raises(ValueError):
        layer(x, x, np.array([[False, False]]))


def test_heads_must_divide_width():
    with pytest.raises(ValueError):
        nn.MultiHeadAttention(6, 4, np.random.default_rng(0))


def test_changing_padded_keys_leaves_attention_bitwise_unchanged(backend):
    rng = np.random.default_rng(8)
    layer = nn.MultiHeadAttention(8, 2, rng)
    x = rng.normal(size=(2, 6, 8))
    mask = np.array([[True] * 4 + [False] * 2, [True] * 6])
    other = x.copy()
    other[0, 4:] = rng.normal(scale=100.0, size=(2, 8))
    a = layer(ag.Tensor(x[:, :4]), ag.Tensor(x), mask).data
    b = layer(ag.Tensor(other[:, :4]), ag.Tensor(other), mask).data
    assert np.array_equal(a, b)


@pytest.mark.parametrize("pad", [1, 5, 23])
def test_encoder_padding_invariance_is_bitwise(pad, backend):
    rng = np.random.default_rng(pad)
    layer = nn.EncoderLayer(16, 4, 64, rng)
    x = rng.normal(size=(1, 7, 16))
    padded = np.concatenate([x, rng.normal(size=(1, pad, 16))], axis=1)
    mask = np.r_[np.ones(7, bool), np.zeros(pad, bool)][None]
    short = layer(ag.Tensor(x), np.ones((1, 7), bool)).data
    long = layer(ag.Tensor(padded), mask).data
    assert np.array_equal(short[0], long[0, :7])


def test_reviser_padding_invariance_is_bitwise():
    rng = np.random.default_rng(5)
    layer = nn.ReviserLayer(8, 2, 32, rng)
    slots, z = rng.normal(size=(1, 3, 8)), rng.normal(size=(1, 6, 8))
    z_pad = np.concatenate([z, rng.normal(size=(1, 4, 8))], axis=1)
    mask = np.r_[np.ones(6, bool), np.zeros(4, bool)][None]
    a = layer(ag.Tensor(slots), ag.Tensor(z), np.ones((1, 6), bool)).data
    b = layer(ag.Tensor(slots), ag.Tensor(z_pad), mask).data
    assert np.array_equal(a, b)


def slot_sensitivity(layer, slots, z, eps=1e-3):
    """|d out_i| when slot j is perturbed, for every ordered pair (i, j)."""
    m = slots.shape[1]
    base = layer(ag.Tensor(slots), ag.Tensor(z)).data
    sens = np.zeros((m, m))
    for j in range(m):
        moved = slots.copy()
        moved[0, j] += eps
        diff = layer(ag.Tensor(moved), ag.Tensor(z)).data - base
        sens[:, j] = np.abs(diff[0]).max(axis=1)
    return sens


def test_reviser_slots_see_each_other_and_causal_control_does_not():
    rng = np.random.default_rng(6)
    slots, z = rng.normal(size=(1, 7, 8)), rng.normal(size=(1, 5, 8))
    full = slot_sensitivity(nn.ReviserLayer(8, 2, 32, np.random.default_rng(1)), slots, z)
    causal = slot_sensitivity(nn.ReviserLayer(8, 2, 32, np.random.default_rng(1), causal=True), slots, z)
    assert np.all(full > 0)
    forbidden = np.triu(np.ones((7, 7), bool), k=1)   # output i may not depend on later slot j
    assert np.all(causal[forbidden] == 0.0)
    assert np.all(causal[~forbidden] > 0)


def test_positional_encoding_values():
    pe = nn.positional_encoding(50, 4)
    assert pe.shape == (50, 4)
    assert abs(pe[3, 0] - 0.14112) < 1e-5
    assert pe[3, 0] == math.sin(3.0)
    assert pe[7, 1] == pytest.approx(math.cos(7 / 10000 ** (1 / 4)), abs=1e-15)
    assert pe[7, 2] == pytest.approx(math.sin(7 / 10000 ** (2 / 4)), abs=1e-15)
    np.testing.assert_array_equal(pe[0], [0.0, 1.0, 0.0, 1.0])


def test_module_parameters_are_discovered_in_order():
    layer = nn.EncoderLayer(4, 2, 8, np.random.default_rng(0))
    names = [n for n, _ in layer.named_parameters()]
    assert names[:4] == ["self_attn.w_q", "self_attn.w_k", "self_attn.w_v", "self_attn.w_o"]
    assert len(names) == 4 + 2 + 4 + 2
    assert len({id(p) for p in layer.parameters()}) == len(names)


def test_glorot_limits():
    w = nn.glorot(np.random.default_rng(0), 30, 70).data
    assert np.abs(w).max() <= math.sqrt(6 / 100)
    assert w.shape == (30, 70)
