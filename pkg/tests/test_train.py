import dataclasses
import json
import logging

import numpy as np
import pytest

from terdnet import losses
from terdnet.checkpoint import decode_checkpoint, read_header
from terdnet.config import RunConfig
from terdnet.tensor import Tensor
from terdnet.train import Adam, NonFiniteLoss, eval_seeds, evaluate_pairs, held_out_pairs, train, train_seeds

SMALL = RunConfig(feature_channels=8, reduced_channels=4, radius=1, hidden=16, gate_channels=8,
                  image_size=32, iters=3, steps=4, eval_pairs=4)


def state_of(model):
    return {n: p.data.copy() for n, p in model.named_parameters()}


class TestAdam:
    def test_first_step_moves_by_lr(self):
        # bias correction makes the first step exactly lr * sign(g)
        p = Tensor(np.array([1.0, -2.0, 3.0]), requires_grad=True)
        p.grad = np.array([0.5, -4.0, 2.0])
        Adam([p], lr=0.1).step()
        np.testing.assert_allclose(p.data, [0.9, -1.9, 2.9], rtol=1e-6)

    def test_matches_reference(self):
        rng = np.random.default_rng(0)
        p = Tensor(rng.normal(size=5), requires_grad=True)
        ref, m, v = p.data.copy(), np.zeros(5), np.zeros(5)
        opt = Adam([p], lr=0.01)
        for t in range(1, 6):
            g = rng.normal(size=5)
            p.grad = g.copy()
            opt.step()
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            lr_t = 0.01 * np.sqrt(1 - 0.999**t) / (1 - 0.9**t)
            ref -= lr_t * m / (np.sqrt(v) + 1e-8)
        np.testing.assert_allclose(p.data, ref, rtol=1e-10, atol=1e-12)

    def test_missing_grad_skipped(self):
        p = Tensor(np.ones(3), requires_grad=True)
        Adam([p], lr=1.0).step()
        np.testing.assert_array_equal(p.data, np.ones(3))


class TestSeeds:
    def test_train_and_eval_disjoint(self):
        cfg = dataclasses.replace(SMALL, steps=3000, batch_size=2)
        used = {s for step in range(cfg.steps) for s in train_seeds(cfg, step)}
        assert used.isdisjoint(eval_seeds(cfg))

    def test_streams_depend_on_seed(self):
        assert train_seeds(SMALL, 0) != train_seeds(dataclasses.replace(SMALL, seed=1), 0)
        assert held_out_pairs(SMALL, 2)[0].gt.shape == (32, 32)


class TestTrain:
    def test_zero_lr_keeps_weights(self):
        from terdnet.model import TERDNet

        init = state_of(TERDNet(SMALL))
        result = train(dataclasses.replace(SMALL, lr=0.0, steps=1))
        for name, value in state_of(result.model).items():
            np.testing.assert_array_equal(value, init[name])

    def test_records(self):
        result = train(SMALL)
        assert [r["step"] for r in result.log] == [0, 1, 2, 3]
        for r in result.log:
            assert len(r["per_iter_losses"]) == 3
            assert r["iter_weights"] == pytest.approx([0.64, 0.8, 1.0])
            assert r["total_loss"] == pytest.approx(sum(w * l for w, l in zip(r["iter_weights"], r["per_iter_losses"])))

    def test_deterministic(self):
        a, b = train(SMALL), train(SMALL)
        assert [r["total_loss"] for r in a.log] == [r["total_loss"] for r in b.log]
        sa, sb = state_of(a.model), state_of(b.model)
        assert all(sa[n].tobytes() == sb[n].tobytes() for n in sa)

    def test_frozen_encoder_untouched(self):
        cfg = dataclasses.replace(SMALL, frozen_encoder=True, steps=2)
        from terdnet.model import TERDNet

        init = state_of(TERDNet(cfg))
        after = state_of(train(cfg).model)
        enc = [n for n in init if n.startswith("encoder")]
        assert enc and all(np.array_equal(after[n], init[n]) for n in enc)
        assert any(not np.array_equal(after[n], init[n]) for n in init if n.startswith("decoder"))

    def test_loss_decreases(self):
        cfg = dataclasses.replace(SMALL, steps=120, lr=3e-3, iters=2)
        log = train(cfg).log
        first = np.mean([r["total_loss"] for r in log[:10]])
        last = np.mean([r["total_loss"] for r in log[-10:]])
        assert last < first

    def test_output_files(self, tmp_path):
        train(dataclasses.replace(SMALL, log_every=2), out_dir=tmp_path)
        lines = (tmp_path / "train_log.jsonl").read_text().splitlines()
        assert [json.loads(l)["step"] for l in lines] == [0, 2]
        header = read_header(tmp_path / "model.ckpt")
        assert header["meta"]["signature"] == SMALL.model_signature()
        assert RunConfig.load(tmp_path / "config.json") == dataclasses.replace(SMALL, log_every=2)

    def test_single_class_batch_warns(self, caplog):
        cfg = dataclasses.replace(SMALL, steps=1, scene=dataclasses.replace(SMALL.scene, change_prob=0.0))
        with caplog.at_level(logging.WARNING, logger="terdnet"):
            train(cfg)
        assert "single class" in caplog.text


class TestNonFinite:
    def test_abort_and_snapshot(self, tmp_path, monkeypatch):
        real = losses.sequential_weighted_ce

        def poisoned(*args, **kwargs):
            rep = real(*args, **kwargs)
            return dataclasses.replace(rep, total=rep.total * np.nan)

        monkeypatch.setattr("terdnet.train.sequential_weighted_ce", poisoned)
        with pytest.raises(NonFiniteLoss, match="step 0"):
            train(SMALL, out_dir=tmp_path)
        state, header = decode_checkpoint((tmp_path / "nonfinite.ckpt").read_bytes())
        assert header["meta"]["step"] == 0 and all(np.isfinite(v).all() for v in state.values())
        assert not (tmp_path / "model.ckpt").exists()


class TestEvaluate:
    def test_per_iteration_reports(self):
        from terdnet.model import TERDNet

        reps = evaluate_pairs(TERDNet(SMALL), held_out_pairs(SMALL, 3), batch_size=2)
        assert len(reps) == 3
        assert all(0.0 <= r.f1_change <= 1.0 for r in reps)
