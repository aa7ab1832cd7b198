"""Transformer building blocks on top of the tape engine."""

from __future__ import annotations

import math

import numpy as np

from .engine import (MASK_NEG, Tensor, add, gelu, layer_norm, matmul, mul,
                     reshape, softmax, transpose)
from .params import ModelParams
from .rng import SeedStream

__all__ = [
    "Linear", "LayerNorm", "Attention", "Mlp", "TransformerBlock",
    "causal_frame_bias", "sinusoidal_features",
]


class Linear:
    def __init__(self, store: ModelParams, name: str, d_in: int, d_out: int,
                 rng: SeedStream, scale: float | None = None,
                 zero_init: bool = False, dtype=np.float32):
        if zero_init:
            w = np.zeros((d_in, d_out), dtype=dtype)
        else:
            if scale is None:
                scale = math.sqrt(2.0 / (d_in + d_out))  # Xavier-normal
            w = (rng.normal((d_in, d_out), dtype=np.float64) * scale).astype(dtype)
        self.w = store.add(f"{name}.w", w)
        self.b = store.add(f"{name}.b", np.zeros(d_out, dtype=dtype))

    def __call__(self, x: Tensor) -> Tensor:
        return add(matmul(x, self.w), self.b)


class LayerNorm:
    def __init__(self, store: ModelParams, name: str, dim: int, dtype=np.float32):
        self.gamma = store.add(f"{name}.gamma", np.ones(dim, dtype=dtype))
        self.beta = store.add(f"{name}.beta", np.zeros(dim, dtype=dtype))

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gamma, self.beta)


class Attention:
    """Multi-head self-attention; an additive bias realizes causal masking."""

    def __init__(self, store: ModelParams, name: str, dim: int, heads: int,
                 rng: SeedStream, dtype=np.float32):
        assert dim % heads == 0, f"dim {dim} not divisible by heads {heads}"
        self.heads = heads
        self.head_dim = dim // heads
        self.dim = dim
        self.wq = Linear(store, f"{name}.q", dim, dim, rng.child("q"), dtype=dtype)
        self.wk = Linear(store, f"{name}.k", dim, dim, rng.child("k"), dtype=dtype)
        self.wv = Linear(store, f"{name}.v", dim, dim, rng.child("v"), dtype=dtype)
        self.wo = Linear(store, f"{name}.o", dim, dim, rng.child("o"), dtype=dtype)

    def __call__(self, x: Tensor, bias: np.ndarray | None = None) -> Tensor:
        b, n, d = x.shape
        h, hd = self.heads, self.head_dim

        def split(t):
            return transpose(reshape(t, (b, n, h, hd)), (0, 2, 1, 3))

        q = split(self.wq(x))
        k = split(self.wk(x))
        v = split(self.wv(x))
        logits = mul(matmul(q, transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(hd))
        if bias is not None:
            logits = add(logits, Tensor(bias.astype(x.dtype)))
        att = softmax(logits)
        ctx = matmul(att, v)
        ctx = reshape(transpose(ctx, (0, 2, 1, 3)), (b, n, d))
        return self.wo(ctx)


class Mlp:
    def __init__(self, store: ModelParams, name: str, dim: int, ratio: int,
                 rng: SeedStream, dtype=np.float32):
        self.fc1 = Linear(store, f"{name}.fc1", dim, dim * ratio, rng.child("fc1"), dtype=dtype)
        self.fc2 = Linear(store, f"{name}.fc2", dim * ratio, dim, rng.child("fc2"), dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(gelu(self.fc1(x)))


class TransformerBlock:
    """Pre-norm block: x + attn(ln(x)); x + mlp(ln(x))."""

    def __init__(self, store: ModelParams, name: str, dim: int, heads: int,
                 rng: SeedStream, mlp_ratio: int = 4, dtype=np.float32):
        self.ln1 = LayerNorm(store, f"{name}.ln1", dim, dtype=dtype)
        self.attn = Attention(store, f"{name}.attn", dim, heads, rng.child("attn"), dtype=dtype)
        self.ln2 = LayerNorm(store, f"{name}.ln2", dim, dtype=dtype)
        self.mlp = Mlp(store, f"{name}.mlp", dim, mlp_ratio, rng.child("mlp"), dtype=dtype)

    def __call__(self, x: Tensor, bias: np.ndarray | None = None) -> Tensor:
        x = add(x, self.attn(self.ln1(x), bias))
        return add(x, self.mlp(self.ln2(x)))


def causal_frame_bias(t_frames: int, tokens_per_frame: int) -> np.ndarray:
    """Additive attention bias: token at frame t attends to frames <= t only,
    with full attention inside a frame."""
    frame_of = np.repeat(np.arange(t_frames), tokens_per_frame)
    allowed = frame_of[None, :] <= frame_of[:, None]
    return np.where(allowed, 0.0, MASK_NEG).astype(np.float32)


def sinusoidal_features(x: np.ndarray, dim: int, scale: float = 1000.0) -> np.ndarray:
    """Fixed sin/cos features of a scalar signal in [0, 1]."""
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / max(half - 1, 1))
    ang = np.asarray(x, dtype=np.float64)[..., None] * scale * freqs
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=-1).astype(np.float32)
