"""Run configuration shared by the model builder, trainer and CLI."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path


@dataclass
class SceneSpec:
    """Parameters of the synthetic change-pair generator."""

    min_objects: int = 1
    max_objects: int = 3
    min_size: int = 20
    max_size: int = 36
    change_prob: float = 0.5
    max_added: int = 1
    photometric_jitter: float = 0.08
    camera_shift: int = 0
    texture_amplitude: float = 0.15

    def validate(self) -> None:
        if self.max_objects < 1 or self.min_objects < 1 or self.min_objects > self.max_objects:
            raise ValueError(f"scene needs at least one object, got range {self.min_objects}..{self.max_objects}")
        if not 0 <= self.change_prob <= 1:
            raise ValueError(f"change_prob must lie in [0, 1], got {self.change_prob}")
        if self.min_size < 1 or self.min_size > self.max_size:
            raise ValueError(f"bad object size range {self.min_size}..{self.max_size}")


@dataclass
class RunConfig:
    # model
    feature_channels: int = 32
    encoder_depth: int = 4
    frozen_encoder: bool = False
    encoder_only: bool = False
    reduced_channels: int = 8
    radius: int = 3
    patch_radius: int = 0
    fusion_mode: str = "both"
    corr_top_level_only: bool = False
    hidden: int = 512
    gate_channels: int = 512
    gru: str = "three-gate"
    iters: int = 5
    h0: str = "feature"
    gamma: float = 0.8
    # optimisation
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    steps: int = 2000
    batch_size: int = 1
    seed: int = 0
    dtype: str = "float32"
    # data
    image_size: int = 64
    eval_pairs: int = 64
    scene: SceneSpec = field(default_factory=SceneSpec)
    # output
    output_dir: str = "runs/default"
    log_every: int = 1

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, data: dict) -> RunConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config fields: {sorted(unknown)}")
        data = dict(data)
        if "scene" in data and isinstance(data["scene"], dict):
            data["scene"] = SceneSpec(**data["scene"])
        return cls(**data)

    @classmethod
    def from_json(cls, text: str) -> RunConfig:
        return cls.from_dict(json.loads(text))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json() + "\n")

    @classmethod
    def load(cls, path: str | Path) -> RunConfig:
        return cls.from_json(Path(path).read_text())

    def model_signature(self) -> dict:
        """Fields that determine the parameter layout of the model."""
        keys = ("feature_channels", "encoder_depth", "encoder_only", "reduced_channels", "radius",
                "fusion_mode", "corr_top_level_only", "hidden", "gate_channels", "gru", "h0", "image_size")
        return {k: getattr(self, k) for k in keys}
