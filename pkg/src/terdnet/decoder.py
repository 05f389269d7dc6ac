"""Recurrent decoder: the pyramid-difference gating map and the 3-gate conv-GRU.

Per step, with x the fused feature and f the gating map::

    r = σ(W_r*x + U_r*h + F_r*f)
    z = σ(W_z*x + U_z*h + F_z*f)
    p = σ(W_p*x + U_p*h + F_p*f)
    h̃ = tanh(W*x + U*(r⊙h) + F*(p⊙f))
    h = (1 - z)⊙h + z⊙h̃

The ``basic`` variant drops p and every F term; ``none`` is a single
feed-forward step ``h = tanh(W*x)``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .encoder import FeaturePyramid
from .nn import Conv2d, Module, Parameter, kaiming
from .tensor import (
    ShapeError,
    Tensor,
    add,
    concat_channels,
    conv2d,
    flop_scope,
    mul,
    sigmoid,
    sub,
    tanh,
)

GRU_VARIANTS = ("three-gate", "basic", "none")
H0_MODES = ("feature", "zero")


@dataclass
class GruState:
    h: Tensor
    step: int
    f: Tensor | None = None


class RatiosForReflection(Module):
    """f = σ(P * concat_i(m0^i − m1^i)), computed once per image pair."""

    def __init__(self, feature_channels: int, gate_channels: int, rng, levels: int = 4,
                 kernel: int = 1, dtype=np.float32):
        self.proj = Conv2d(levels * feature_channels, gate_channels, kernel, rng, dtype=dtype)

    def forward(self, p0: FeaturePyramid, p1: FeaturePyramid) -> Tensor:
        if p0.shape != p1.shape:
            raise ShapeError(f"pyramid shapes differ: {p0.shape} vs {p1.shape}")
        diffs = [sub(a, b) for a, b in zip(p0.levels, p1.levels)]
        return sigmoid(self.proj(concat_channels(diffs)))


def ratios_for_reflection(block: RatiosForReflection, p0: FeaturePyramid, p1: FeaturePyramid) -> Tensor:
    return block(p0, p1)


class GruWeights(Module):
    """Kernels of the recurrent cell, one set per gate (``W_r``, ``U_r``, ...).

    r and z are ``hidden`` wide; p gates f elementwise and so has
    ``gate_channels``. Only the x-side kernels carry a bias; a bias on U or F
    would just add to it.
    """

    def __init__(self, input_channels: int, hidden: int = 512, gate_channels: int = 512,
                 variant: str = "three-gate", kernel: int = 3, gate_kernel: int = 1,
                 rng: np.random.Generator | None = None, dtype=np.float32):
        if variant not in GRU_VARIANTS:
            raise ValueError(f"unknown GRU variant {variant!r}; choose from {GRU_VARIANTS}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.variant = variant
        self.hidden = hidden
        self.kernel = kernel
        self.gate_kernel = gate_kernel
        self.gate_channels = gate_channels
        conv = lambda o, i, k: Parameter(kaiming(rng, (o, i, k, k), dtype))
        bias = lambda o: Parameter(np.zeros(o, dtype=dtype))
        if variant == "none":
            self.W = conv(hidden, input_channels, kernel)
            self.b = bias(hidden)
            return
        self.gates = ("r", "z", "p") if variant == "three-gate" else ("r", "z")
        for g in self.gates:
            width = gate_channels if g == "p" else hidden
            setattr(self, f"W_{g}", conv(width, input_channels, kernel))
            setattr(self, f"b_{g}", bias(width))
            setattr(self, f"U_{g}", conv(width, hidden, kernel))
            if variant == "three-gate":
                setattr(self, f"F_{g}", conv(width, gate_channels, gate_kernel))
        self.W = conv(hidden, input_channels, kernel)
        self.b = bias(hidden)
        self.U = conv(hidden, hidden, kernel)
        if variant == "three-gate":
            self.F = conv(hidden, gate_channels, gate_kernel)

    @property
    def pad(self) -> int:
        return (self.kernel - 1) // 2

    @property
    def gate_pad(self) -> int:
        return (self.gate_kernel - 1) // 2

    def kernel_of(self, kind: str, gate: str) -> Parameter:
        return getattr(self, f"{kind}_{gate}")


class _Projected:
    """The terms of the recurrence that do not depend on h, evaluated once."""

    def __init__(self, w: GruWeights, x: Tensor, f: Tensor | None):
        self.gates_x = {}
        for g in w.gates:
            pre = conv2d(x, w.kernel_of("W", g), w.kernel_of("b", g), padding=w.pad)
            if w.variant == "three-gate":
                pre = add(pre, conv2d(f, w.kernel_of("F", g), padding=w.gate_pad))
            self.gates_x[g] = pre
        self.cand_x = conv2d(x, w.W, w.b, padding=w.pad)


def _step(w: GruWeights, proj: _Projected, h: Tensor, f: Tensor | None) -> Tensor:
    gate = {g: sigmoid(add(proj.gates_x[g], conv2d(h, w.kernel_of("U", g), padding=w.pad))) for g in w.gates}
    cand = add(proj.cand_x, conv2d(mul(gate["r"], h), w.U, padding=w.pad))
    if w.variant == "three-gate":
        cand = add(cand, conv2d(mul(gate["p"], f), w.F, padding=w.gate_pad))
    h_tilde = tanh(cand)
    z = gate["z"]
    return add(mul(sub(1.0, z), h), mul(z, h_tilde))


def gru_cell(x: Tensor, state: GruState | None, w: GruWeights) -> GruState:
    """One update of the cell; ``state`` is None only for the feed-forward variant."""
    if w.variant == "none":
        if state is not None and state.step > 0:
            raise ValueError("the feed-forward decoder has no state to carry past step 0")
        return GruState(tanh(conv2d(x, w.W, w.b, padding=w.pad)), 1, None)
    if state is None:
        raise ValueError(f"{w.variant} GRU needs a previous state")
    _check_spatial(x, state.h, state.f)
    f = state.f if w.variant == "three-gate" else None
    if w.variant == "three-gate" and f is None:
        raise ValueError("three-gate GRU needs the gating map f")
    h = _step(w, _Projected(w, x, f), state.h, f)
    return GruState(h, state.step + 1, state.f)


def _check_spatial(x: Tensor, h: Tensor, f: Tensor | None) -> None:
    shapes = [x.shape[2:], h.shape[2:]] + ([f.shape[2:]] if f is not None else [])
    if len(set(shapes)) != 1 or x.shape[0] != h.shape[0]:
        raise ShapeError(f"x, h, f must share batch and spatial dims, got {[x.shape, h.shape] + ([f.shape] if f is not None else [])}")


class RecurrentDecoder(Module):
    def __init__(self, input_channels: int, feature_channels: int, hidden: int = 512,
                 gate_channels: int = 512, variant: str = "three-gate", h0: str = "feature",
                 rng: np.random.Generator | None = None, dtype=np.float32):
        if h0 not in H0_MODES:
            raise ValueError(f"unknown h0 mode {h0!r}; choose from {H0_MODES}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.variant = variant
        self.h0_mode = h0
        self.hidden = hidden
        self.gru = GruWeights(input_channels, hidden, gate_channels, variant, rng=rng, dtype=dtype)
        self.rfr = (
            RatiosForReflection(feature_channels, gate_channels, rng, dtype=dtype)
            if variant == "three-gate" else None
        )
        self.h0 = (
            Conv2d(input_channels, hidden, 3, rng, dtype=dtype)
            if h0 == "feature" and variant != "none" else None
        )

    def initial_state(self, x: Tensor, f: Tensor | None) -> GruState:
        if self.h0 is not None:
            h = tanh(self.h0(x))
        else:
            B, _, H, W = x.shape
            h = Tensor(np.zeros((B, self.hidden, H, W), dtype=x.dtype))
        return GruState(h, 0, f)

    def forward(self, x: Tensor, p0: FeaturePyramid | None, p1: FeaturePyramid | None,
                iterations: int) -> list[GruState]:
        with flop_scope("decoder-init"):
            f = self.rfr(p0, p1) if self.rfr is not None else None
            state = None if self.variant == "none" else self.initial_state(x, f)
        return run_decoder(x, state, self.gru, iterations)


def run_decoder(x: Tensor, state: GruState | None, w: GruWeights, iterations: int) -> list[GruState]:
    """Iterate the cell ``iterations`` times on a constant input; returns every state."""
    if iterations < 1:
        raise ValueError(f"the decoder needs at least one iteration, got {iterations}")
    if w.variant == "none":
        if iterations != 1:
            raise ValueError("the feed-forward decoder runs exactly one iteration")
        with flop_scope("decoder"):
            return [gru_cell(x, None, w)]
    if state is None:
        raise ValueError(f"{w.variant} GRU needs an initial state")
    _check_spatial(x, state.h, state.f)
    f = state.f if w.variant == "three-gate" else None
    if w.variant == "three-gate" and f is None:
        raise ValueError("three-gate GRU needs the gating map f")
    with flop_scope("decoder-init"):
        proj = _Projected(w, x, f)
    states = []
    h = state.h
    with flop_scope("decoder"):
        for t in range(iterations):
            h = _step(w, proj, h, f)
            states.append(GruState(h, state.step + t + 1, state.f))
    return states
