import json
import struct

import numpy as np
import pytest

from terdnet.accounting import count_parameters
from terdnet.checkpoint import (
    CheckpointMismatch,
    decode_checkpoint,
    encode_checkpoint,
    load_checkpoint,
    load_model,
    read_header,
    save_checkpoint,
)
from terdnet.config import RunConfig
from terdnet.model import TERDNet

SMALL = dict(feature_channels=8, reduced_channels=4, radius=1, hidden=16, gate_channels=8, image_size=32)


@pytest.fixture(scope="module")
def model():
    return TERDNet(RunConfig(**SMALL))


class TestFormat:
    def test_header_layout(self, tmp_path, model):
        path = tmp_path / "m.ckpt"
        save_checkpoint(path, model, {"note": "x"})
        raw = path.read_bytes()
        (n,) = struct.unpack("<Q", raw[:8])
        header = json.loads(raw[8:8 + n])
        assert header["meta"] == {"note": "x"}
        entries = header["params"]
        assert [e["name"] for e in entries] == [name for name, _ in model.named_parameters()]
        # offsets are contiguous float32 runs
        sizes = [int(np.prod(e["shape"])) * 4 for e in entries]
        assert [e["offset"] for e in entries] == list(np.cumsum([0] + sizes[:-1]))
        assert len(raw) == 8 + n + sum(sizes)

    def test_payload_is_little_endian_float32(self, model):
        state = {"a": np.array([1.5, -2.0], dtype=np.float32)}
        blob = encode_checkpoint(state)
        (n,) = struct.unpack("<Q", blob[:8])
        assert blob[8 + n:] == struct.pack("<2f", 1.5, -2.0)

    def test_round_trip(self, tmp_path, model):
        path = tmp_path / "m.ckpt"
        save_checkpoint(path, model)
        other = TERDNet(RunConfig(**SMALL, seed=9))
        load_checkpoint(path, other)
        for (n1, p1), (n2, p2) in zip(model.named_parameters(), other.named_parameters()):
            assert n1 == n2
            np.testing.assert_array_equal(p1.data, p2.data)

    def test_truncated(self):
        with pytest.raises(ValueError):
            decode_checkpoint(b"\x00\x01")

    def test_registry_sum_matches_header(self, tmp_path, model):
        path = tmp_path / "m.ckpt"
        save_checkpoint(path, model)
        header_total = sum(int(np.prod(e["shape"])) for e in read_header(path)["params"])
        assert header_total == sum(count_parameters(model).values())
        assert header_total == sum(p.data.size for p in model.parameters())


class TestLoadModel:
    def test_signature_mismatch(self, tmp_path, model):
        cfg = RunConfig(**SMALL)
        path = tmp_path / "m.ckpt"
        save_checkpoint(path, model, {"signature": cfg.model_signature()})
        assert load_model(path, cfg).config == cfg
        with pytest.raises(CheckpointMismatch, match="gru"):
            load_model(path, RunConfig(**{**SMALL, "gru": "basic"}))

    def test_shape_mismatch_without_signature(self, tmp_path, model):
        path = tmp_path / "m.ckpt"
        save_checkpoint(path, model)
        with pytest.raises(CheckpointMismatch):
            load_model(path, RunConfig(**{**SMALL, "hidden": 8}))


class TestConfig:
    def test_json_fixed_point(self):
        cfg = RunConfig(iters=3, gru="basic")
        text = cfg.to_json()
        assert RunConfig.from_json(text).to_json() == text
        assert RunConfig.from_json(text) == cfg

    def test_file_round_trip(self, tmp_path):
        cfg = RunConfig(seed=4)
        cfg.save(tmp_path / "c.json")
        assert RunConfig.load(tmp_path / "c.json") == cfg

    def test_unknown_field(self):
        with pytest.raises(ValueError, match="unknown"):
            RunConfig.from_dict({"learning_rate": 1})

    def test_defaults(self):
        cfg = RunConfig()
        assert (cfg.image_size, cfg.feature_channels, cfg.reduced_channels, cfg.radius, cfg.iters, cfg.steps) == (
            64, 32, 8, 3, 5, 2000)
        assert cfg.gamma == 0.8 and cfg.fusion_mode == "both" and cfg.gru == "three-gate"
