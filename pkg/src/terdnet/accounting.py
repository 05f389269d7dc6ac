"""Parameter and FLOP accounting per pipeline stage."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from .model import TERDNet
from .tensor import Tensor, count_macs, flop_scope

STAGES = ("encoder", "fusion", "decoder-init", "decoder", "upsampler")

# parameters live under these top-level attributes; decoder-init work (the
# gating map, h0 and the x-side projections) uses decoder weights
_PARAM_OWNER = {"encoder": "encoder", "fusion": "fusion", "decoder": "decoder", "upsampler": "upsampler"}


@dataclass
class StageRow:
    stage: str
    params: int
    flops: int


@dataclass
class CostReport:
    rows: list[StageRow]
    height: int
    width: int
    iterations: int

    @property
    def total_params(self) -> int:
        return sum(r.params for r in self.rows)

    @property
    def total_flops(self) -> int:
        return sum(r.flops for r in self.rows)

    def row(self, stage: str) -> StageRow:
        return next(r for r in self.rows if r.stage == stage)

    def to_dict(self) -> dict:
        return {
            "height": self.height,
            "width": self.width,
            "iterations": self.iterations,
            "rows": [asdict(r) for r in self.rows],
            "total_params": self.total_params,
            "total_flops": self.total_flops,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def table(self) -> str:
        lines = [f"{'stage':<14s}{'params':>14s}{'GFLOPs':>12s}"]
        for r in self.rows:
            lines.append(f"{r.stage:<14s}{r.params:>14,d}{r.flops / 1e9:>12.4f}")
        lines.append(f"{'total':<14s}{self.total_params:>14,d}{self.total_flops / 1e9:>12.4f}")
        lines.append(f"input {self.height}x{self.width}, {self.iterations} decoder iterations")
        return "\n".join(lines)


def count_parameters(model) -> dict[str, int]:
    """Parameter count per top-level stage; absent stages count zero."""
    counts = {stage: 0 for stage in _PARAM_OWNER}
    for name, p in model.named_parameters():
        owner = name.split(".", 1)[0]
        counts[_PARAM_OWNER.get(owner, owner)] = counts.get(owner, 0) + int(p.data.size)
    return counts


def estimate_flops(model: TERDNet, height: int, width: int, iterations: int | None = None) -> dict[str, int]:
    """FLOPs (2 per multiply-accumulate) of one forward pass on a single pair."""
    flops = {stage: 0 for stage in STAGES}
    img = np.zeros((1, 3, height, width), dtype=model.dtype)
    with count_macs() as counter:
        if model.config.encoder_only:
            with flop_scope("encoder"):
                model.encoder(Tensor(img), "t0")
                model.encoder(Tensor(img), "t1")
        else:
            model(img, img, iterations)
    for scope, macs in counter.macs_by_scope.items():
        flops[scope] = flops.get(scope, 0) + 2 * macs
    return flops


def cost_report(model: TERDNet, height: int | None = None, width: int | None = None,
                iterations: int | None = None) -> CostReport:
    height = height or model.config.image_size
    width = width or height
    m = iterations if iterations is not None else model.iterations if not model.config.encoder_only else 0
    params = count_parameters(model)
    flops = estimate_flops(model, height, width, iterations)
    rows = [
        StageRow("encoder", params["encoder"], flops["encoder"]),
        StageRow("fusion", params["fusion"], flops["fusion"]),
        StageRow("decoder-init", 0, flops["decoder-init"]),
        StageRow("decoder", params["decoder"], flops["decoder"]),
        StageRow("upsampler", params["upsampler"], flops["upsampler"]),
    ]
    extra = sorted(set(flops) - set(STAGES))
    rows += [StageRow(s, params.get(s, 0), flops[s]) for s in extra]
    return CostReport(rows, height, width, m)
