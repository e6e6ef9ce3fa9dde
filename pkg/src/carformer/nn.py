"""Transformer layers: multi-head attention, feed-forward, encoder and reviser layers.

All layers take batched inputs ``[B, L, d]`` with boolean key masks
``[B, L]`` (True = real token). 2-D ``[L, d]`` inputs are accepted by the
functional entry points and treated as a batch of one.
"""
from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from carformer import autograd as ag
from carformer.autograd import Tensor


class Module:
    """Parameter container; parameters are discovered from attributes in definition order."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            if name.startswith("_"):
                continue
            yield from _walk(value, f"{prefix}{name}")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


def _walk(value, name: str):
    if isinstance(value, Tensor):
        if value.requires_grad:
            yield name, value
    elif isinstance(value, Module):
        yield from value.named_parameters(name + ".")
    elif isinstance(value, (list, tuple)):
        for i, v in enumerate(value):
            yield from _walk(v, f"{name}.{i}")


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int, shape=None) -> Tensor:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return ag.parameter(rng.uniform(-limit, limit, size=shape or (fan_in, fan_out)))


def zeros(*shape) -> Tensor:
    return ag.parameter(np.zeros(shape))


def ones(*shape) -> Tensor:
    return ag.parameter(np.ones(shape))


class LayerNorm(Module):
    def __init__(self, d: int, eps: float = 1e-5):
        self.gain = ones(d)
        self.bias = zeros(d)
        self._eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return ag.layer_norm(x, self.gain, self.bias, self._eps)


class MultiHeadAttention(Module):
    """Scaled dot-product attention split over ``heads`` heads, then an output projection."""

    def __init__(self, d: int, heads: int, rng: np.random.Generator):
        if d % heads:
            raise ValueError(f"model dim {d} is not divisible by {heads} heads")
        self.w_q = glorot(rng, d, d)
        self.w_k = glorot(rng, d, d)
        self.w_v = glorot(rng, d, d)
        self.w_o = glorot(rng, d, d)
        self._heads = heads
        self._d = d

    @property
    def heads(self) -> int:
        return self._heads

    @property
    def head_dim(self) -> int:
        return self._d // self._heads

    def __call__(self, x_q: Tensor, x_kv: Tensor, kv_mask: np.ndarray | None = None,
                 causal: bool = False, return_weights: bool = False):
        squeeze = x_q.ndim == 2
        if squeeze:
            x_q, x_kv = ag.reshape(x_q, (1,) + x_q.shape), ag.reshape(x_kv, (1,) + x_kv.shape)
            if kv_mask is not None:
                kv_mask = np.asarray(kv_mask, dtype=bool)[None, :]
        b, lq, d = x_q.shape
        lk = x_kv.shape[1]
        if d != self._d or x_kv.shape[2] != self._d or x_kv.shape[0] != b:
            raise ag.ShapeError(f"attention: inputs {x_q.shape}, {x_kv.shape} do not match d={self._d}")
        h, dh = self._heads, self.head_dim

        q = (x_q @ self.w_q).reshape(b, lq, h, dh).transpose(0, 2, 1, 3)
        kt = (x_kv @ self.w_k).reshape(b, lk, h, dh).transpose(0, 2, 3, 1)
        v = (x_kv @ self.w_v).reshape(b, lk, h, dh).transpose(0, 2, 1, 3)
        scores = ag.mul(q @ kt, 1.0 / math.sqrt(dh))

        blocked = np.zeros((b, 1, lq, lk), dtype=bool)
        if kv_mask is not None:
            kv_mask = np.asarray(kv_mask, dtype=bool)
            if kv_mask.shape != (b, lk):
                raise ag.ShapeError(f"attention: key mask {kv_mask.shape} != {(b, lk)}")
            blocked |= ~kv_mask[:, None, None, :]
        if causal:
            blocked |= np.triu(np.ones((lq, lk), dtype=bool), k=1)[None, None]
        if blocked.all(axis=-1).any():
            raise ValueError("attention: a query row has every key masked")
        if blocked.any():
            scores = ag.masked_fill(scores, blocked, -np.inf)
        weights = ag.softmax(scores, axis=-1)

        # blocked so that padded keys (weight exactly 0) cannot change the rounding
        ctx = ag.blocked_matmul(weights, v).transpose(0, 2, 1, 3).reshape(b, lq, d)
        out = ctx @ self.w_o
        if squeeze:
            out = ag.reshape(out, (lq, d))
        if return_weights:
            return out, weights
        return out


class FeedForward(Module):
    """Position-wise relu(x W1 + b1) W2 + b2."""

    def __init__(self, d: int, d_ff: int, rng: np.random.Generator):
        self.w_1 = glorot(rng, d, d_ff)
        self.b_1 = zeros(d_ff)
        self.w_2 = glorot(rng, d_ff, d)
        self.b_2 = zeros(d)

    def __call__(self, x: Tensor) -> Tensor:
        return ag.relu(x @ self.w_1 + self.b_1) @ self.w_2 + self.b_2


class EncoderLayer(Module):
    """Post-norm self-attention + feed-forward block."""

    def __init__(self, d: int, heads: int, d_ff: int, rng: np.random.Generator,
                 dropout: float = 0.0):
        self.self_attn = MultiHeadAttention(d, heads, rng)
        self.norm_1 = LayerNorm(d)
        self.ffn = FeedForward(d, d_ff, rng)
        self.norm_2 = LayerNorm(d)
        self._dropout = dropout

    def __call__(self, x: Tensor, mask: np.ndarray | None = None,
                 rng: np.random.Generator | None = None) -> Tensor:
        p = self._dropout
        y = self.norm_1(x + ag.dropout(self.self_attn(x, x, mask), p, rng))
        return self.norm_2(y + ag.dropout(self.ffn(y), p, rng))


class ReviserLayer(Module):
    """Unmasked slot self-attention, cross-attention to the dialogue, feed-forward.

    ``causal=True`` turns the slot self-attention into the usual
    decoder-style masked attention; it exists only as a control for tests.
    """

    def __init__(self, d: int, heads: int, d_ff: int, rng: np.random.Generator,
                 dropout: float = 0.0, causal: bool = False):
        self.self_attn = MultiHeadAttention(d, heads, rng)
        self.norm_1 = LayerNorm(d)
        self.cross_attn = MultiHeadAttention(d, heads, rng)
        self.norm_2 = LayerNorm(d)
        self.ffn = FeedForward(d, d_ff, rng)
        self.norm_3 = LayerNorm(d)
        self._dropout = dropout
        self._causal = causal

    def __call__(self, slots: Tensor, dialogue: Tensor, dialogue_mask: np.ndarray | None = None,
                 rng: np.random.Generator | None = None) -> Tensor:
        p = self._dropout
        y1 = self.norm_1(slots + ag.dropout(self.self_attn(slots, slots, causal=self._causal), p, rng))
        y2 = self.norm_2(y1 + ag.dropout(self.cross_attn(y1, dialogue, dialogue_mask), p, rng))
        return self.norm_3(y2 + ag.dropout(self.ffn(y2), p, rng))


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator):
        self.weight = glorot(rng, d_in, d_out)
        self.bias = zeros(d_out)

    def __call__(self, x: Tensor) -> Tensor:
        return x @ self.weight + self.bias


def positional_encoding(max_len: int, d: int) -> np.ndarray:
    """Sinusoidal table with the frequency indexed by each scalar dimension k.

    ``p(pos, k) = sin(pos / 10000**(k/d))`` for even k and ``cos(...)`` for
    odd k. Note the exponent uses k itself rather than the pair index
    ``2*(k//2)`` used by most implementations.
    """
    if d < 1:
        raise ValueError("positional_encoding: d must be >= 1")
    pos = np.arange(max_len, dtype=np.float64)[:, None]
    k = np.arange(d, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, k / d)
    return np.where(np.arange(d)[None, :] % 2 == 0, np.sin(angle), np.cos(angle))


def attention(x_q, x_kv, params: MultiHeadAttention, kv_pad_mask=None):
    """Functional form of :class:`MultiHeadAttention` (``kv_pad_mask`` True = padding)."""
    valid = None if kv_pad_mask is None else ~np.asarray(kv_pad_mask, dtype=bool)
    return params(ag.as_tensor(x_q), ag.as_tensor(x_kv), valid)


def encoder_layer_forward(x, layer: EncoderLayer, pad_mask=None):
    valid = None if pad_mask is None else ~np.asarray(pad_mask, dtype=bool)
    x = ag.as_tensor(x)
    if x.ndim == 2:
        out = layer(ag.reshape(x, (1,) + x.shape), None if valid is None else valid[None])
        return ag.reshape(out, x.shape)
    return layer(x, valid)


def reviser_layer_forward(slots, dialogue_z, layer: ReviserLayer, dialogue_pad_mask=None):
    valid = None if dialogue_pad_mask is None else ~np.asarray(dialogue_pad_mask, dtype=bool)
    slots, z = ag.as_tensor(slots), ag.as_tensor(dialogue_z)
    if slots.ndim == 2:
        out = layer(ag.reshape(slots, (1,) + slots.shape), ag.reshape(z, (1,) + z.shape),
                    None if valid is None else valid[None])
        return ag.reshape(out, slots.shape)
    return layer(slots, z, valid)
