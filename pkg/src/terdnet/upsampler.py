"""Combined conv + bilinear upsampler and the change-mask decision rule."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nn import Conv2d, Module
from .tensor import ShapeError, Tensor, bilinear_resize, relu

CHANNEL_SCHEDULE = (256, 128, 64, 2)
STATIC, CHANGE = 0, 1


@dataclass
class ChangeMask:
    logits: Tensor

    def __post_init__(self):
        if self.logits.ndim != 4 or self.logits.shape[1] != 2:
            raise ShapeError(f"change logits must be (B, 2, H, W), got {self.logits.shape}")

    @property
    def labels(self) -> np.ndarray:
        return predict(self.logits.data)


class UpsamplerHead(Module):
    """Four blocks of 3x3 conv then bilinear x2: 512 -> 256 -> 128 -> 64 -> 2.

    ReLU follows the first three convs; the last conv emits raw logits.
    """

    def __init__(self, hidden: int = 512, rng: np.random.Generator | None = None,
                 schedule: tuple[int, ...] = CHANNEL_SCHEDULE, dtype=np.float32):
        rng = rng if rng is not None else np.random.default_rng(0)
        widths = (hidden, *schedule)
        self.hidden = hidden
        self.blocks = [Conv2d(widths[i], widths[i + 1], 3, rng, dtype=dtype) for i in range(len(schedule))]

    def trace(self, h: Tensor) -> list[tuple[int, ...]]:
        """Shapes after every block, starting with the input."""
        shapes: list[tuple[int, ...]] = []
        self._run(h, shapes)
        return shapes

    def _run(self, h: Tensor, shapes: list | None = None) -> Tensor:
        x = h
        if shapes is not None:
            shapes.append(x.shape)
        for i, conv in enumerate(self.blocks):
            x = conv(x)
            if i < len(self.blocks) - 1:
                x = relu(x)
            x = bilinear_resize(x, 2 * x.shape[2], 2 * x.shape[3])
            if shapes is not None:
                shapes.append(x.shape)
        return x

    def forward(self, h: Tensor, target_h: int | None = None, target_w: int | None = None) -> Tensor:
        scale = 2 ** len(self.blocks)
        if h.ndim != 4 or h.shape[1] != self.hidden:
            raise ShapeError(f"upsampler expects ({self.hidden}-channel) hidden state, got {h.shape}")
        if target_h is not None and (h.shape[2] * scale, h.shape[3] * scale) != (target_h, target_w):
            raise ShapeError(
                f"hidden grid {h.shape[2]}x{h.shape[3]} cannot produce a {target_h}x{target_w} mask "
                f"(needs {target_h / scale:g}x{target_w / scale:g})"
            )
        return self._run(h)


def upsample_head(head: UpsamplerHead, h: Tensor, target_h: int, target_w: int) -> ChangeMask:
    return ChangeMask(head(h, target_h, target_w))


def predict(logits) -> np.ndarray:
    """Per-pixel argmax over the two classes; ties go to static."""
    d = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    return (d[:, CHANGE] > d[:, STATIC]).astype(np.uint8)
