"""Attention building blocks and the four block-stack layouts.

All forwards take batched [B, n, d] tensors. Boolean masks use True for
"attendable". Blocks are pre-norm residual with a x4 GELU feed-forward.
"""

from __future__ import annotations

import math

import numpy as np

from . import autograd as ag
from .autograd import Tensor


class ParamSet:
    """Named parameter registry with seeded Xavier-uniform init."""

    def __init__(self, rng: np.random.Generator):
        self.rng = rng
        self.tensors: dict[str, Tensor] = {}

    def add(self, name: str, shape: tuple, init: str = "xavier") -> Tensor:
        if name in self.tensors:
            raise ValueError(f"duplicate parameter {name!r}")
        if init == "xavier":
            fan_in = shape[0] if len(shape) > 1 else shape[0]
            fan_out = shape[-1]
            bound = math.sqrt(6.0 / (fan_in + fan_out))
            data = self.rng.uniform(-bound, bound, size=shape)
        elif init == "zeros":
            data = np.zeros(shape)
        elif init == "ones":
            data = np.ones(shape)
        else:
            raise ValueError(f"unknown init {init!r}")
        t = Tensor(data, requires_grad=True)
        self.tensors[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def zero_grads(self) -> None:
        for t in self.tensors.values():
            t.zero_grad()

    def load(self, arrays: dict[str, np.ndarray]) -> None:
        missing = set(self.tensors) - set(arrays)
        extra = set(arrays) - set(self.tensors)
        if missing or extra:
            raise ValueError(f"parameter mismatch: missing={sorted(missing)} extra={sorted(extra)}")
        for name, arr in arrays.items():
            t = self.tensors[name]
            if t.shape != arr.shape:
                raise ValueError(f"{name}: shape {arr.shape} != expected {t.shape}")
            t.data = np.asarray(arr, dtype=t.data.dtype).copy()


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return ag.matmul(x, w) + b


def causal_mask(n: int) -> np.ndarray:
    """Lower-triangular attendability matrix, diagonal included."""
    return np.tril(np.ones((n, n), dtype=bool))


def _combine_masks(B: int, n: int, m: int, key_mask, attn_mask, causal: bool):
    """Merge key padding, explicit pairwise and causal masks into [B,1,n,m] or None."""
    mask = None
    if key_mask is not None:
        mask = np.asarray(key_mask, dtype=bool).reshape(B, 1, 1, m)
    if attn_mask is not None:
        am = np.asarray(attn_mask, dtype=bool)
        am = am.reshape((B, 1, n, m) if am.ndim == 3 else (1, 1, n, m))
        mask = am if mask is None else (mask & am)
    if causal:
        cm = causal_mask(n).reshape(1, 1, n, m)
        mask = cm if mask is None else (mask & cm)
    return mask


class MultiHeadAttention:
    """Scaled dot-product attention with h heads and output projection."""

    def __init__(self, params: ParamSet, prefix: str, d: int, heads: int):
        if d % heads:
            raise ValueError(f"hidden size {d} not divisible by {heads} heads")
        self.d, self.heads, self.dh = d, heads, d // heads
        self.wq = params.add(f"{prefix}.wq", (d, d))
        self.bq = params.add(f"{prefix}.bq", (d,), "zeros")
        self.wk = params.add(f"{prefix}.wk", (d, d))
        self.bk = params.add(f"{prefix}.bk", (d,), "zeros")
        self.wv = params.add(f"{prefix}.wv", (d, d))
        self.bv = params.add(f"{prefix}.bv", (d,), "zeros")
        self.wo = params.add(f"{prefix}.wo", (d, d))
        self.bo = params.add(f"{prefix}.bo", (d,), "zeros")

    def __call__(self, q: Tensor, kv: Tensor, key_mask=None, attn_mask=None,
                 causal: bool = False) -> Tensor:
        B, n, _ = q.shape
        m = kv.shape[1]
        if m == 0:
            raise ValueError("attention over empty context")
        h, dh = self.heads, self.dh

        def split(x, w, b, length):
            return linear(x, w, b).reshape(B, length, h, dh).transpose(0, 2, 1, 3)

        Q = split(q, self.wq, self.bq, n)
        K = split(kv, self.wk, self.bk, m)
        V = split(kv, self.wv, self.bv, m)
        scores = ag.matmul(Q, K.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(dh))
        mask = _combine_masks(B, n, m, key_mask, attn_mask, causal)
        weights = ag.softmax(scores, axis=-1, mask=mask)
        out = ag.matmul(weights, V)
        out = out.transpose(0, 2, 1, 3).reshape(B, n, self.d)
        return linear(out, self.wo, self.bo)


class FeedForward:
    def __init__(self, params: ParamSet, prefix: str, d: int, expansion: int = 4):
        self.w1 = params.add(f"{prefix}.w1", (d, expansion * d))
        self.b1 = params.add(f"{prefix}.b1", (expansion * d,), "zeros")
        self.w2 = params.add(f"{prefix}.w2", (expansion * d, d))
        self.b2 = params.add(f"{prefix}.b2", (d,), "zeros")

    def __call__(self, x: Tensor) -> Tensor:
        return linear(ag.gelu(linear(x, self.w1, self.b1)), self.w2, self.b2)


class LayerNorm:
    def __init__(self, params: ParamSet, prefix: str, d: int):
        self.gain = params.add(f"{prefix}.gain", (d,), "ones")
        self.bias = params.add(f"{prefix}.bias", (d,), "zeros")

    def __call__(self, x: Tensor) -> Tensor:
        return ag.layer_norm(x, self.gain, self.bias)


class EncoderBlock:
    """[self_att; feedforward] with pre-norm residuals."""

    def __init__(self, params: ParamSet, prefix: str, d: int, heads: int):
        self.ln1 = LayerNorm(params, f"{prefix}.ln1", d)
        self.attn = MultiHeadAttention(params, f"{prefix}.attn", d, heads)
        self.ln2 = LayerNorm(params, f"{prefix}.ln2", d)
        self.ff = FeedForward(params, f"{prefix}.ff", d)

    def __call__(self, x: Tensor, key_mask=None, attn_mask=None, causal=False) -> Tensor:
        if x.shape[1] == 0:
            raise ValueError("self-attention over empty sequence")
        a = self.ln1(x)
        x = x + self.attn(a, a, key_mask=key_mask, attn_mask=attn_mask, causal=causal)
        return x + self.ff(self.ln2(x))


class DecoderBlock:
    """[cross_att; self_att; feedforward] with pre-norm residuals."""

    def __init__(self, params: ParamSet, prefix: str, d: int, heads: int,
                 causal_self: bool):
        self.causal_self = causal_self
        self.ln_c = LayerNorm(params, f"{prefix}.ln_c", d)
        self.cross = MultiHeadAttention(params, f"{prefix}.cross", d, heads)
        self.ln_s = LayerNorm(params, f"{prefix}.ln_s", d)
        self.self_attn = MultiHeadAttention(params, f"{prefix}.self", d, heads)
        self.ln_f = LayerNorm(params, f"{prefix}.ff_ln", d)
        self.ff = FeedForward(params, f"{prefix}.ff", d)

    def __call__(self, x: Tensor, ctx: Tensor, ctx_mask=None, self_mask=None) -> Tensor:
        a = self.ln_c(x)
        x = x + self.cross(a, ctx, key_mask=ctx_mask)
        s = self.ln_s(x)
        x = x + self.self_attn(s, s, key_mask=self_mask, causal=self.causal_self)
        return x + self.ff(self.ln_f(x))


class EncoderStack:
    def __init__(self, params: ParamSet, prefix: str, d: int, heads: int, depth: int):
        if depth < 1:
            raise ValueError("stack depth must be >= 1")
        self.blocks = [EncoderBlock(params, f"{prefix}.{i}", d, heads) for i in range(depth)]

    def __call__(self, x: Tensor, key_mask=None, attn_mask=None, causal=False) -> Tensor:
        for block in self.blocks:
            x = block(x, key_mask=key_mask, attn_mask=attn_mask, causal=causal)
        return x


class DecoderStack:
    def __init__(self, params: ParamSet, prefix: str, d: int, heads: int, depth: int,
                 causal_self: bool):
        if depth < 1:
            raise ValueError("stack depth must be >= 1")
        self.blocks = [DecoderBlock(params, f"{prefix}.{i}", d, heads, causal_self)
                       for i in range(depth)]

    def __call__(self, x: Tensor, ctx: Tensor, ctx_mask=None, self_mask=None) -> Tensor:
        for block in self.blocks:
            x = block(x, ctx, ctx_mask=ctx_mask, self_mask=self_mask)
        return x
