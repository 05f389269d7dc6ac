"""Ablation sweeps and the misalignment robustness protocol."""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .config import RunConfig
from .data import ChangePair, Perturbation, PERTURBATION_KINDS, scaled_magnitudes, warp
from .model import TERDNet
from .train import evaluate_pairs, held_out_pairs, train

ABLATION_AXES = {
    "fusion-mode": ("fusion_mode", ("feature-maps-only", "local", "global", "both")),
    "gru-variant": ("gru", ("none", "basic", "three-gate")),
    "iters": ("iters", (3, 5, 7, 10)),
}


@dataclass
class AblationCell:
    value: object
    seed: int
    f1: float
    miou: float
    seconds: float


@dataclass
class AblationTable:
    axis: str
    steps: int
    cells: list[AblationCell]

    def values(self) -> list:
        seen = []
        for c in self.cells:
            if c.value not in seen:
                seen.append(c.value)
        return seen

    def mean_f1(self, value) -> float:
        return float(np.mean([c.f1 for c in self.cells if c.value == value]))

    def f1_by_seed(self, value) -> dict[int, float]:
        return {c.seed: c.f1 for c in self.cells if c.value == value}

    def to_json(self) -> str:
        return json.dumps({"axis": self.axis, "steps": self.steps,
                           "cells": [dataclasses.asdict(c) for c in self.cells]}, indent=2)

    def text(self) -> str:
        seeds = sorted({c.seed for c in self.cells})
        head = f"{self.axis:<20s}" + "".join(f"{'seed ' + str(s):>10s}" for s in seeds) + f"{'mean F1':>10s}"
        lines = [head]
        for v in self.values():
            per = self.f1_by_seed(v)
            lines.append(f"{str(v):<20s}" + "".join(f"{per[s]:>10.4f}" for s in seeds) + f"{self.mean_f1(v):>10.4f}")
        return "\n".join(lines)


def run_ablation(base: RunConfig, axis: str, seeds: Sequence[int] = (0,), values: Sequence | None = None,
                 steps: int | None = None, eval_pairs: int | None = None,
                 on_cell: Callable[[AblationCell], None] | None = None) -> AblationTable:
    """Train and evaluate one model per (axis value, seed) with one shared budget."""
    if axis not in ABLATION_AXES:
        raise ValueError(f"unknown ablation axis {axis!r}; choose from {sorted(ABLATION_AXES)}")
    field_name, defaults = ABLATION_AXES[axis]
    values = list(values) if values is not None else list(defaults)
    steps = base.steps if steps is None else steps
    cells = []
    for seed in seeds:
        # the held-out set depends only on the seed, so every value sees the same pairs
        probe = dataclasses.replace(base, seed=seed, eval_pairs=eval_pairs or base.eval_pairs)
        pairs = held_out_pairs(probe)
        for value in values:
            cfg = dataclasses.replace(probe, steps=steps, **{field_name: value})
            result = train(cfg)
            rep = evaluate_pairs(result.model, pairs)[-1]
            cell = AblationCell(value, seed, rep.f1_change, rep.miou, result.seconds)
            cells.append(cell)
            if on_cell is not None:
                on_cell(cell)
    return AblationTable(axis, steps, cells)


@dataclass
class RobustRow:
    kind: str
    magnitude: float
    f1: float
    baseline_f1: float

    @property
    def delta(self) -> float:
        return self.f1 - self.baseline_f1

    def to_dict(self) -> dict:
        return {**dataclasses.asdict(self), "delta": self.delta}


def perturb_pairs(pairs: Sequence[ChangePair], kind: str, magnitude: float, seed: int = 0) -> list[ChangePair]:
    """Warp every t0 image; each pair draws its own direction from ``seed``."""
    out = []
    for i, pair in enumerate(pairs):
        p = Perturbation(kind, magnitude, seed=seed * 1_000_003 + i)
        out.append(dataclasses.replace(pair, img_t0=warp(pair.img_t0, p)))
    return out


def robustness_report(model: TERDNet, pairs: Sequence[ChangePair], magnitudes: Sequence[float] | None = None,
                      kinds: Sequence[str] = PERTURBATION_KINDS, seed: int = 0) -> list[RobustRow]:
    """F1 under each (kind, magnitude) warp of t0 against the unperturbed F1."""
    pairs = list(pairs)
    if not pairs:
        raise ValueError("robustness evaluation needs at least one pair")
    H, W = pairs[0].gt.shape
    if magnitudes is None:
        magnitudes = scaled_magnitudes(W)
    for m in magnitudes:
        if m < 0 or m >= min(H, W):
            raise ValueError(f"perturbation magnitude {m} lies outside the image bounds {H}x{W}")
    baseline = evaluate_pairs(model, pairs)[-1].f1_change
    rows = []
    for kind in kinds:
        for m in magnitudes:
            f1 = evaluate_pairs(model, perturb_pairs(pairs, kind, m, seed))[-1].f1_change
            rows.append(RobustRow(kind, float(m), f1, baseline))
    return rows


def robust_text(rows: Sequence[RobustRow]) -> str:
    lines = [f"{'kind':<12s}{'magnitude':>10s}{'F1':>9s}{'baseline':>10s}{'delta':>9s}"]
    for r in rows:
        lines.append(f"{r.kind:<12s}{r.magnitude:>10.3f}{r.f1:>9.4f}{r.baseline_f1:>10.4f}{r.delta:>+9.4f}")
    return "\n".join(lines)
