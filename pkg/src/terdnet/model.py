"""End-to-end change detector: siamese encoder, fusion, recurrent decoder, upsampler."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import RunConfig
from .correlation import FeatureFusion, FusedFeature, fused_channels
from .decoder import GruState, RecurrentDecoder
from .encoder import STRIDE, EncoderConfig, FeaturePyramid, ToyEncoder
from .nn import Module
from .tensor import Tensor, concat, flop_scope, split
from .upsampler import UpsamplerHead


@dataclass
class ForwardResult:
    logits: list[Tensor]
    states: list[GruState]
    fused: FusedFeature
    pyramids: tuple[FeaturePyramid, FeaturePyramid]


class TERDNet(Module):
    def __init__(self, config: RunConfig | None = None):
        config = config or RunConfig()
        self.config = config
        dtype = np.dtype(config.dtype)
        rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0]))
        self.encoder = ToyEncoder(
            EncoderConfig(config.feature_channels, config.encoder_depth, frozen=config.frozen_encoder),
            rng, dtype,
        )
        if config.encoder_only:
            return
        grid = (config.image_size // STRIDE,) * 2
        self.fusion = FeatureFusion(
            config.feature_channels, config.reduced_channels, config.radius, config.patch_radius,
            config.fusion_mode, config.corr_top_level_only, rng, dtype,
        )
        self.fused_channels = (
            fused_channels(config.fusion_mode, config.reduced_channels, config.radius, grid)
            if not config.corr_top_level_only else None
        )
        in_ch = self.fused_channels or self._probe_fused_channels(grid)
        self.decoder = RecurrentDecoder(
            in_ch, config.feature_channels, config.hidden, config.gate_channels,
            config.gru, config.h0, rng, dtype,
        )
        self.upsampler = UpsamplerHead(config.hidden, rng, dtype=dtype)

    def _probe_fused_channels(self, grid) -> int:
        C = self.config.feature_channels
        zeros = [Tensor(np.zeros((1, C, *grid), dtype=self.config.dtype)) for _ in range(4)]
        return self.fusion(FeaturePyramid(zeros), FeaturePyramid(list(zeros))).channels

    @property
    def iterations(self) -> int:
        return 1 if self.config.gru == "none" else self.config.iters

    def trainable_parameters(self):
        if self.config.frozen_encoder:
            frozen = {id(p) for p in self.encoder.parameters()}
            return [p for p in self.parameters() if id(p) not in frozen]
        return self.parameters()

    def forward(self, img_t0: Tensor, img_t1: Tensor, iterations: int | None = None) -> ForwardResult:
        if self.config.encoder_only:
            raise RuntimeError("an encoder-only model cannot produce change masks")
        dtype = self.dtype
        img_t0 = img_t0 if isinstance(img_t0, Tensor) else Tensor(np.asarray(img_t0, dtype=dtype))
        img_t1 = img_t1 if isinstance(img_t1, Tensor) else Tensor(np.asarray(img_t1, dtype=dtype))
        if img_t0.shape != img_t1.shape:
            raise ValueError(f"t0 and t1 images differ in shape: {img_t0.shape} vs {img_t1.shape}")
        if img_t0.dtype != dtype:
            img_t0, img_t1 = Tensor(img_t0.data.astype(dtype)), Tensor(img_t1.data.astype(dtype))
        H, W = img_t0.shape[2:]
        m = self.iterations if iterations is None else iterations
        with flop_scope("encoder"):
            p0 = self.encoder(img_t0, "t0")
            p1 = self.encoder(img_t1, "t1")
        with flop_scope("fusion"):
            fused = self.fusion(p0, p1)
        states = self.decoder(fused.values, p0, p1, m)
        with flop_scope("upsampler"):
            # one shared head over all iterations, batched along axis 0
            B = img_t0.shape[0]
            hs = concat([s.h for s in states], axis=0) if len(states) > 1 else states[0].h
            out = self.upsampler(hs, H, W)
            logits = split(out, [B] * len(states), axis=0) if len(states) > 1 else [out]
        return ForwardResult(logits, states, fused, (p0, p1))


def build_model(config: RunConfig) -> TERDNet:
    return TERDNet(config)
