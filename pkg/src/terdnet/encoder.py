"""Toy siamese encoder producing a four-level, uniform-resolution feature pyramid."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .nn import Conv2d, Module
from .tensor import ShapeError, Tensor, add, relu

STRIDE = 16
NUM_LEVELS = 4


def quarter_taps(depth: int) -> tuple[int, ...]:
    """Zero-based index of the last block in each quarter of ``depth`` blocks.

    >>> quarter_taps(12)
    (2, 5, 8, 11)
    """
    if depth < NUM_LEVELS:
        raise ValueError(f"encoder depth must be at least {NUM_LEVELS}, got {depth}")
    return tuple((q + 1) * depth // NUM_LEVELS - 1 for q in range(NUM_LEVELS))


@dataclass
class EncoderConfig:
    feature_channels: int = 32
    depth: int = 4
    tap_rule: tuple[int, ...] | None = None
    frozen: bool = False
    stem_channels: tuple[int, ...] = (16, 24, 32)

    def taps(self) -> tuple[int, ...]:
        taps = tuple(self.tap_rule) if self.tap_rule is not None else quarter_taps(self.depth)
        if len(taps) != NUM_LEVELS:
            raise ValueError(f"tap rule must select exactly {NUM_LEVELS} blocks, got {taps}")
        if any(b <= a for a, b in zip(taps, taps[1:])):
            raise ValueError(f"tap indices must be strictly increasing, got {taps}")
        if taps[0] < 0 or taps[-1] >= self.depth:
            raise ValueError(f"tap indices {taps} out of range for depth {self.depth}")
        return taps


@dataclass
class FeaturePyramid:
    levels: list[Tensor]
    source_time: str = "t0"

    def __post_init__(self):
        if len(self.levels) != NUM_LEVELS:
            raise ShapeError(f"a feature pyramid has {NUM_LEVELS} levels, got {len(self.levels)}")
        shapes = {lvl.shape for lvl in self.levels}
        if len(shapes) != 1:
            raise ShapeError(f"pyramid levels must share one shape, got {sorted(shapes)}")

    @property
    def shape(self) -> tuple[int, ...]:
        return self.levels[0].shape


class ResidualBlock(Module):
    def __init__(self, channels: int, rng, dtype):
        self.conv1 = Conv2d(channels, channels, 3, rng, dtype=dtype)
        self.conv2 = Conv2d(channels, channels, 3, rng, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        return relu(add(x, self.conv2(relu(self.conv1(x)))))


class ToyEncoder(Module):
    """Four stride-2 stages down to 1/16 resolution, then ``depth`` residual
    blocks at that resolution. The blocks selected by the tap rule form the
    pyramid, so every level has the same shape."""

    def __init__(self, config: EncoderConfig, rng: np.random.Generator, dtype=np.float32):
        self.config = config
        widths = (3, *config.stem_channels, config.feature_channels)
        self.stem = [Conv2d(widths[i], widths[i + 1], 3, rng, stride=2, dtype=dtype) for i in range(4)]
        self.blocks = [ResidualBlock(config.feature_channels, rng, dtype) for _ in range(config.depth)]
        self._taps = config.taps()

    def forward(self, image: Tensor, source_time: str = "t0") -> FeaturePyramid:
        if image.ndim != 4 or image.shape[1] != 3:
            raise ShapeError(f"encoder expects (B, 3, H, W) images, got {image.shape}")
        H, W = image.shape[2:]
        if H % STRIDE or W % STRIDE:
            raise ShapeError(f"image height and width must be multiples of {STRIDE}, got {H}x{W}")
        x = add(image, -0.5)
        for conv in self.stem:
            x = relu(conv(x))
        levels = []
        for i, block in enumerate(self.blocks):
            x = block(x)
            if i in self._taps:
                levels.append(x)
        return FeaturePyramid(levels, source_time)


def encode(encoder: ToyEncoder, image: Tensor, source_time: str = "t0") -> FeaturePyramid:
    return encoder(image, source_time)
