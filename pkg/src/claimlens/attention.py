"""Multi-head attention and pre-norm transformer layers.

Sequences are unbatched [L, dim] arrays; heads ride on a leading batch axis
inside the block.  Masks are boolean [Lq, Lk] with True = may attend; the
mask is applied as an additive -1e30 before softmax, which underflows to an
exact zero weight while keeping every intermediate finite.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import ParamStore, ShapeError, Tensor

MASK_NEG = -1e30
FFN_MULT = 4
INIT_STD = 0.02


@dataclass(frozen=True)
class AttentionConfig:
    model_dim: int
    num_heads: int

    def __post_init__(self):
        if self.model_dim % self.num_heads != 0:
            raise ValueError(f"model_dim {self.model_dim} not divisible by "
                             f"num_heads {self.num_heads}")

    @property
    def head_dim(self) -> int:
        return self.model_dim // self.num_heads


class AttentionMask:
    """Boolean attend-permission matrix; every query row must allow something."""

    def __init__(self, allowed: np.ndarray):
        allowed = np.asarray(allowed, dtype=bool)
        if allowed.ndim != 2:
            raise ShapeError(f"mask must be 2-d, got shape {allowed.shape}")
        if not allowed.any(axis=1).all():
            raise ValueError("attention mask has a fully blocked query row")
        allowed.flags.writeable = False
        self.allowed = allowed

    @property
    def shape(self) -> tuple[int, int]:
        return self.allowed.shape

    @staticmethod
    def full(lq: int, lk: int) -> "AttentionMask":
        return AttentionMask(np.ones((lq, lk), dtype=bool))

    @staticmethod
    def causal(length: int) -> "AttentionMask":
        return AttentionMask(np.tril(np.ones((length, length), dtype=bool)))

    def bias(self, dtype: np.dtype) -> np.ndarray:
        return np.where(self.allowed, 0.0, MASK_NEG).astype(dtype)


def init_weight(rng: np.random.Generator, shape: tuple[int, ...],
                dtype: np.dtype, std: float = INIT_STD) -> np.ndarray:
    return (rng.standard_normal(shape) * std).astype(dtype)


class LayerNorm:
    def __init__(self, store: ParamStore, prefix: str, dim: int,
                 group: str, dtype: np.dtype):
        self.gain = store.add(f"{prefix}.gain", np.ones(dim, dtype=dtype), group)
        self.bias = store.add(f"{prefix}.bias", np.zeros(dim, dtype=dtype), group)

    def __call__(self, x: Tensor) -> Tensor:
        return ag.layer_norm(x, self.gain.tensor, self.bias.tensor)


class MultiHeadAttention:
    """Scaled dot-product attention with a learned output projection."""

    def __init__(self, store: ParamStore, prefix: str, cfg: AttentionConfig,
                 rng: np.random.Generator, group: str, dtype: np.dtype,
                 zero_out: bool = True):
        d = cfg.model_dim
        self.cfg = cfg
        self.wq = store.add(f"{prefix}.wq", init_weight(rng, (d, d), dtype), group)
        self.wk = store.add(f"{prefix}.wk", init_weight(rng, (d, d), dtype), group)
        self.wv = store.add(f"{prefix}.wv", init_weight(rng, (d, d), dtype), group)
        # zero output projection makes a fresh residual block start as identity;
        # stacks that must learn quickly from scratch opt out, since a zero wo
        # also zeroes the gradients reaching wq/wk/wv
        wo = np.zeros((d, d), dtype=dtype) if zero_out else init_weight(rng, (d, d), dtype)
        self.wo = store.add(f"{prefix}.wo", wo, group)

    def _heads(self, x: Tensor) -> Tensor:
        l = x.shape[0]
        h, hd = self.cfg.num_heads, self.cfg.head_dim
        return ag.swapaxes(ag.reshape(x, (l, h, hd)), 0, 1)  # [H, L, hd]

    def __call__(self, q_in: Tensor, kv_in: Tensor, mask: AttentionMask,
                 return_weights: bool = False):
        if q_in.shape[-1] != self.cfg.model_dim or kv_in.shape[-1] != self.cfg.model_dim:
            raise ShapeError(f"attention expects dim {self.cfg.model_dim}, got "
                             f"{q_in.shape} / {kv_in.shape}")
        if mask.shape != (q_in.shape[0], kv_in.shape[0]):
            raise ShapeError(f"mask shape {mask.shape} does not match "
                             f"[{q_in.shape[0]}, {kv_in.shape[0]}]")
        q = self._heads(ag.matmul(q_in, self.wq.tensor))
        k = self._heads(ag.matmul(kv_in, self.wk.tensor))
        v = self._heads(ag.matmul(kv_in, self.wv.tensor))
        scores = ag.mul(ag.matmul(q, ag.swapaxes(k, 1, 2)),
                        1.0 / math.sqrt(self.cfg.head_dim))
        scores = ag.add(scores, mask.bias(q_in.dtype))  # broadcasts over heads
        weights = ag.softmax_lastdim(scores)
        ctx = ag.matmul(weights, v)  # [H, Lq, hd]
        lq = q_in.shape[0]
        merged = ag.reshape(ag.swapaxes(ctx, 0, 1), (lq, self.cfg.model_dim))
        out = ag.matmul(merged, self.wo.tensor)
        if return_weights:
            return out, weights.data
        return out


class FeedForward:
    def __init__(self, store: ParamStore, prefix: str, dim: int,
                 rng: np.random.Generator, group: str, dtype: np.dtype,
                 zero_out: bool = True):
        hidden = FFN_MULT * dim
        self.w1 = store.add(f"{prefix}.w1", init_weight(rng, (dim, hidden), dtype), group)
        self.b1 = store.add(f"{prefix}.b1", np.zeros(hidden, dtype=dtype), group)
        w2 = (np.zeros((hidden, dim), dtype=dtype) if zero_out
              else init_weight(rng, (hidden, dim), dtype))
        self.w2 = store.add(f"{prefix}.w2", w2, group)
        self.b2 = store.add(f"{prefix}.b2", np.zeros(dim, dtype=dtype), group)

    def __call__(self, x: Tensor) -> Tensor:
        h = ag.gelu(ag.linear(x, self.w1.tensor, self.b1.tensor))
        return ag.linear(h, self.w2.tensor, self.b2.tensor)


class TransformerLayer:
    """Pre-norm block: self-attention, optional cross-attention, feed-forward."""

    def __init__(self, store: ParamStore, prefix: str, cfg: AttentionConfig,
                 rng: np.random.Generator, group: str, dtype: np.dtype,
                 cross: bool = False, zero_out: bool = True):
        self.self_attn = MultiHeadAttention(store, f"{prefix}.self", cfg, rng, group,
                                            dtype, zero_out)
        self.ln1 = LayerNorm(store, f"{prefix}.ln1", cfg.model_dim, group, dtype)
        self.cross_attn = None
        if cross:
            self.cross_attn = MultiHeadAttention(store, f"{prefix}.cross", cfg, rng,
                                                 group, dtype, zero_out)
            self.ln_cross = LayerNorm(store, f"{prefix}.lnx", cfg.model_dim, group, dtype)
        self.ffn = FeedForward(store, f"{prefix}.ffn", cfg.model_dim, rng, group,
                               dtype, zero_out)
        self.ln2 = LayerNorm(store, f"{prefix}.ln2", cfg.model_dim, group, dtype)

    def __call__(self, x: Tensor, self_mask: AttentionMask,
                 kv: Tensor | None = None,
                 cross_mask: AttentionMask | None = None) -> Tensor:
        h = self.ln1(x)
        x = ag.add(x, self.self_attn(h, h, self_mask))
        if kv is not None:
            if self.cross_attn is None:
                raise ShapeError("layer built without cross-attention got kv input")
            cm = cross_mask or AttentionMask.full(x.shape[0], kv.shape[0])
            x = ag.add(x, self.cross_attn(self.ln_cross(x), kv, cm))
        x = ag.add(x, self.ffn(self.ln2(x)))
        return x
