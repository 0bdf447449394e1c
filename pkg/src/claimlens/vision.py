"""Patch-transformer image encoder with dynamic tiling.

Large images are split into a grid of base-sized tiles (edges padded by
replicating border pixels) plus one mean-pooled global view, appended last.
Each view is embedded patch-wise, given a learned positional embedding, run
through a small self-attention stack, and the per-view outputs are
concatenated along the patch axis.  Records that ship precomputed feature
matrices bypass the encoder entirely.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .attention import AttentionConfig, AttentionMask, LayerNorm, TransformerLayer, init_weight
from .autograd import ParamStore, ShapeError, Tensor


@dataclass(frozen=True)
class VisionConfig:
    base_size: int = 32
    patch_size: int = 8
    feat_dim: int = 64
    num_layers: int = 2
    num_heads: int = 4
    channels: int = 1

    def __post_init__(self):
        if self.base_size % self.patch_size != 0:
            raise ValueError(f"base_size {self.base_size} not divisible by "
                             f"patch_size {self.patch_size}")

    @property
    def grid(self) -> int:
        return self.base_size // self.patch_size

    @property
    def patches_per_view(self) -> int:
        return self.grid * self.grid


@dataclass(frozen=True)
class ImageInput:
    """Either raw pixels in [0,1] or a precomputed [n, feat_dim] feature matrix."""
    pixels: np.ndarray | None = None
    features: np.ndarray | None = None

    def __post_init__(self):
        if (self.pixels is None) == (self.features is None):
            raise ValueError("exactly one of pixels/features must be set")
        if self.pixels is not None:
            px = np.asarray(self.pixels, dtype=np.float64)
            if px.ndim == 2:
                px = px[:, :, None]
            if px.ndim != 3:
                raise ShapeError(f"pixels must be HxW or HxWxC, got {px.shape}")
            if px.min() < 0.0 or px.max() > 1.0:
                raise ValueError("pixel values must lie in [0, 1]")
            object.__setattr__(self, "pixels", px)
        else:
            f = np.asarray(self.features, dtype=np.float64)
            if f.ndim != 2:
                raise ShapeError(f"feature matrix must be 2-d, got {f.shape}")
            object.__setattr__(self, "features", f)


@dataclass(frozen=True)
class TilePlan:
    base_size: int
    rows: int
    cols: int
    offsets: tuple[tuple[int, int], ...]  # (y, x) in the padded image
    has_tiles: bool

    @property
    def num_views(self) -> int:
        # the downsized global view is always last
        return (self.rows * self.cols if self.has_tiles else 0) + 1


def plan_tiles(h: int, w: int, base: int) -> TilePlan:
    """Grid of ceil(h/base) x ceil(w/base) tiles plus one global view.

    Images smaller than base in either dimension get the global view only.
    """
    if h <= 0 or w <= 0 or base <= 0:
        raise ValueError(f"bad tiling geometry h={h} w={w} base={base}")
    if h < base or w < base:
        return TilePlan(base, 0, 0, (), has_tiles=False)
    rows = math.ceil(h / base)
    cols = math.ceil(w / base)
    offsets = tuple((r * base, c * base) for r in range(rows) for c in range(cols))
    return TilePlan(base, rows, cols, offsets, has_tiles=True)


def _pad_to_multiple(px: np.ndarray, base: int) -> np.ndarray:
    h, w, _ = px.shape
    ph = math.ceil(h / base) * base if h >= base else base
    pw = math.ceil(w / base) * base if w >= base else base
    ph, pw = max(ph, base), max(pw, base)
    return np.pad(px, ((0, ph - h), (0, pw - w), (0, 0)), mode="edge")


def _mean_pool(px: np.ndarray, out_size: int) -> np.ndarray:
    """Block mean-pool a padded square-multiple image down to out_size."""
    h, w, c = px.shape
    fy, fx = h // out_size, w // out_size
    return px.reshape(out_size, fy, out_size, fx, c).mean(axis=(1, 3))


class VisionEncoder:
    """Transformer over non-overlapping patches, one view at a time."""

    def __init__(self, store: ParamStore, cfg: VisionConfig,
                 rng: np.random.Generator, dtype: np.dtype, prefix: str = "vision"):
        self.cfg = cfg
        self.dtype = dtype
        p = cfg.patch_size
        in_dim = p * p * cfg.channels
        self.proj = store.add(f"{prefix}.patch_proj",
                              init_weight(rng, (in_dim, cfg.feat_dim), dtype), "vision")
        self.proj_b = store.add(f"{prefix}.patch_bias",
                                np.zeros(cfg.feat_dim, dtype=dtype), "vision")
        self.pos = store.add(f"{prefix}.pos",
                             init_weight(rng, (cfg.patches_per_view, cfg.feat_dim), dtype),
                             "vision")
        acfg = AttentionConfig(cfg.feat_dim, cfg.num_heads)
        self.layers = [TransformerLayer(store, f"{prefix}.layer{i}", acfg, rng,
                                        "vision", dtype, zero_out=False)
                       for i in range(cfg.num_layers)]
        self.ln_out = LayerNorm(store, f"{prefix}.ln_out", cfg.feat_dim, "vision", dtype)

    def _views(self, pixels: np.ndarray) -> list[np.ndarray]:
        base = self.cfg.base_size
        plan = plan_tiles(pixels.shape[0], pixels.shape[1], base)
        padded = _pad_to_multiple(pixels, base)
        views = [padded[y:y + base, x:x + base] for y, x in plan.offsets]
        views.append(_mean_pool(padded, base))
        return views

    def patch_embed(self, view: np.ndarray) -> Tensor:
        """Project p x p patches of one view, row-major, before positions."""
        base, p = self.cfg.base_size, self.cfg.patch_size
        if view.shape[:2] != (base, base) or view.shape[0] % p or view.shape[1] % p:
            raise ShapeError(f"view shape {view.shape} not a {base}x{base} multiple of {p}")
        g = self.cfg.grid
        c = view.shape[2]
        patches = (view.reshape(g, p, g, p, c)
                       .transpose(0, 2, 1, 3, 4)
                       .reshape(g * g, p * p * c))
        x = Tensor(patches.astype(self.dtype))
        return ag.linear(x, self.proj.tensor, self.proj_b.tensor)

    def _encode_view(self, view: np.ndarray) -> Tensor:
        x = ag.add(self.patch_embed(view), self.pos.tensor)
        mask = AttentionMask.full(self.cfg.patches_per_view, self.cfg.patches_per_view)
        for layer in self.layers:
            x = layer(x, mask)
        return self.ln_out(x)

    def encode(self, image: ImageInput) -> Tensor:
        """Feature matrix [n_total_patches, feat_dim] for one image."""
        if image.features is not None:
            if image.features.shape[1] != self.cfg.feat_dim:
                raise ShapeError(f"feature matrix dim {image.features.shape[1]} != "
                                 f"feat_dim {self.cfg.feat_dim}")
            return Tensor(image.features.astype(self.dtype))
        views = self._views(image.pixels)
        return ag.concat([self._encode_view(v) for v in views], axis=0)

    def num_patches(self, image: ImageInput) -> int:
        if image.features is not None:
            return image.features.shape[0]
        plan = plan_tiles(image.pixels.shape[0], image.pixels.shape[1], self.cfg.base_size)
        return plan.num_views * self.cfg.patches_per_view
