"""Correlation volumes between two feature maps and the feature fusion module."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .encoder import FeaturePyramid
from .nn import Conv2d, Module
from .tensor import ShapeError, Tensor, _count, _make, concat_channels

FUSION_MODES = ("feature-maps-only", "local", "global", "both")


def _check_pair(m0: Tensor, m1: Tensor) -> None:
    if m0.shape != m1.shape or m0.ndim != 4:
        raise ShapeError(f"correlation needs two equal 4-D maps, got {m0.shape} and {m1.shape}")


def _shifted(a: np.ndarray, dy: int, dx: int) -> np.ndarray:
    """``out[..., y, x] = a[..., y + dy, x + dx]``, zero where out of range."""
    H, W = a.shape[-2:]
    out = np.zeros_like(a)
    ys, ye = max(0, -dy), min(H, H - dy)
    xs, xe = max(0, -dx), min(W, W - dx)
    if ys < ye and xs < xe:
        out[..., ys:ye, xs:xe] = a[..., ys + dy:ye + dy, xs + dx:xe + dx]
    return out


def _box_sum(a: np.ndarray, radius: int) -> np.ndarray:
    """Zero-padded sum over the (2·radius+1)² window, offsets in raster order."""
    if radius == 0:
        return a
    out = np.zeros_like(a)
    for oy in range(-radius, radius + 1):
        for ox in range(-radius, radius + 1):
            out = out + _shifted(a, oy, ox)
    return out


def _channel_sum(prod: np.ndarray, axis: int) -> np.ndarray:
    """Sum over ``axis`` strictly left to right.

    numpy switches to pairwise summation when the axis is contiguous, which
    would make results depend on memory layout.
    """
    prod = np.moveaxis(prod, axis, 0)
    out = prod[0].copy()
    for c in range(1, prod.shape[0]):
        out += prod[c]
    return out


def displacements(radius: int) -> list[tuple[int, int]]:
    """Channel order of the local volume: dy outer, dx inner."""
    return [(dy, dx) for dy in range(-radius, radius + 1) for dx in range(-radius, radius + 1)]


def local_correlation(m0: Tensor, m1: Tensor, radius: int, patch_radius: int = 0) -> Tensor:
    """Displacement correlation volume with (2·radius+1)² channels.

    Channel ``(dy, dx)`` at pixel p holds
    ``sum_o <m0(p+o), m1(p+d+o)> / (C · (2·patch_radius+1)²)`` with o over the
    patch window; feature vectors outside the map read as zero.
    """
    _check_pair(m0, m1)
    if radius < 0 or patch_radius < 0:
        raise ValueError("correlation radius and patch radius must be non-negative")
    B, C, H, W = m0.shape
    a, b = m0.data, m1.data
    norm = C * (2 * patch_radius + 1) ** 2
    disp = displacements(radius)
    _count(B * H * W * len(disp) * C * (2 * patch_radius + 1) ** 2)
    shifted = np.stack([_shifted(b, dy, dx) for dy, dx in disp])
    dot = _channel_sum(a[None] * shifted, axis=2)
    out = np.ascontiguousarray(np.moveaxis(_box_sum(dot, patch_radius) / norm, 0, 1))

    def bw(g):
        ga = np.zeros_like(a) if m0.requires_grad else None
        gb = np.zeros_like(b) if m1.requires_grad else None
        for k, (dy, dx) in enumerate(disp):
            # box sum with zero padding is self-adjoint
            gd = _box_sum(g[:, k], patch_radius)[:, None] / norm
            if ga is not None:
                ga += gd * _shifted(b, dy, dx)
            if gb is not None:
                gb += _shifted(gd * a, -dy, -dx)
        return ga, gb

    return _make(out, (m0, m1), bw, "local_correlation")


def global_correlation(m0: Tensor, m1: Tensor) -> Tensor:
    """Correlation of every pixel of ``m0`` with every pixel of ``m1``.

    Channel k holds ``<m0(p), m1(q_k)> / C`` where q_k runs over ``m1`` in
    raster order.
    """
    _check_pair(m0, m1)
    B, C, H, W = m0.shape
    a = m0.data
    bf = m1.data.reshape(B, C, H * W)
    _count(B * H * W * H * W * C)
    out = _channel_sum(a[:, :, None, :, :] * bf[:, :, :, None, None], axis=1) / C

    def bw(g):
        ga = gb = None
        if m0.requires_grad:
            ga = (g[:, None] * bf[:, :, :, None, None]).sum(axis=2) / C
        if m1.requires_grad:
            gb = (g[:, None] * a[:, :, None]).sum(axis=(3, 4)).reshape(B, C, H, W) / C
        return ga, gb

    return _make(out, (m0, m1), bw, "global_correlation")


def fused_channels(mode: str, reduced_channels: int, radius: int, grid: tuple[int, int], levels: int = 4) -> int:
    """Channel count of the fused feature for a given configuration."""
    if mode not in FUSION_MODES:
        raise ValueError(f"unknown fusion mode {mode!r}; choose from {FUSION_MODES}")
    per = 2 * reduced_channels if mode in ("feature-maps-only", "both") else 0
    if mode in ("local", "both"):
        per += (2 * radius + 1) ** 2
    elif mode == "global":
        per += grid[0] * grid[1]
    return levels * per


@dataclass
class FusedFeature:
    values: Tensor
    provenance: list[tuple[int, str]]

    @property
    def channels(self) -> int:
        return self.values.shape[1]


class FeatureFusion(Module):
    """Per pyramid level: 1x1-reduce both maps, add their correlation volume,
    concatenate; then concatenate the level blocks.

    ``mode``: ``both`` (reduced maps + local correlation), ``local`` or
    ``global`` (correlation only), ``feature-maps-only`` (reduced maps only).
    ``top_level_only`` computes a single correlation volume from the deepest
    level and appends it once.
    """

    def __init__(self, feature_channels: int, reduced_channels: int = 8, radius: int = 3,
                 patch_radius: int = 0, mode: str = "both", top_level_only: bool = False,
                 rng: np.random.Generator | None = None, dtype=np.float32):
        if mode not in FUSION_MODES:
            raise ValueError(f"unknown fusion mode {mode!r}; choose from {FUSION_MODES}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.mode = mode
        self.radius = radius
        self.patch_radius = patch_radius
        self.top_level_only = top_level_only
        self.uses_maps = mode in ("feature-maps-only", "both")
        self.reduce = (
            [Conv2d(feature_channels, reduced_channels, 1, rng, dtype=dtype) for _ in range(4)]
            if self.uses_maps else []
        )

    def _corr(self, a: Tensor, b: Tensor) -> Tensor:
        if self.mode == "global":
            return global_correlation(a, b)
        return local_correlation(a, b, self.radius, self.patch_radius)

    def forward(self, p0: FeaturePyramid, p1: FeaturePyramid) -> FusedFeature:
        if p0.shape != p1.shape:
            raise ShapeError(f"pyramid shapes differ: {p0.shape} vs {p1.shape}")
        use_corr = self.mode != "feature-maps-only"
        blocks: list[Tensor] = []
        provenance: list[tuple[int, str]] = []
        for i, (a, b) in enumerate(zip(p0.levels, p1.levels)):
            if self.uses_maps:
                ra, rb = self.reduce[i](a), self.reduce[i](b)
                blocks += [ra, rb]
                provenance += [(i, "reduced-t0")] * ra.shape[1] + [(i, "reduced-t1")] * rb.shape[1]
            if use_corr and (not self.top_level_only or i == len(p0.levels) - 1):
                c = self._corr(a, b)
                blocks.append(c)
                provenance += [(i, "correlation")] * c.shape[1]
        return FusedFeature(concat_channels(blocks), provenance)


def fuse(fusion: FeatureFusion, p0: FeaturePyramid, p1: FeaturePyramid) -> FusedFeature:
    return fusion(p0, p1)
