"""Adam training on synthetic pairs, evaluation and inference."""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable

import numba
import numpy as np

from .checkpoint import save_checkpoint
from .config import RunConfig
from .data import ChangePair, batch, generate_pair
from .losses import Confusion, MetricReport, class_weights, sequential_weighted_ce
from .model import TERDNet
from .nn import Parameter
from .tensor import Tape
from .upsampler import predict

log = logging.getLogger(__name__)

EVAL_SEED_OFFSET = 10_000_000


class NonFiniteLoss(RuntimeError):
    pass


@numba.njit(cache=True, fastmath=True)
def _adam_update(p, g, m, v, lr_t, b1, b2, eps):
    # one pass over memory; the update is bandwidth bound
    c1 = 1 - b1
    c2 = 1 - b2
    for i in range(p.size):
        gi = g[i]
        mi = b1 * m[i] + c1 * gi
        vi = b2 * v[i] + c2 * gi * gi
        m[i] = mi
        v[i] = vi
        p[i] -= lr_t * mi / (np.sqrt(vi) + eps)


class Adam:
    def __init__(self, params: Iterable[Parameter], lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        lr_t = self.lr * math.sqrt(1 - b2 ** self.t) / (1 - b1 ** self.t)
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            f = p.dtype.type
            _adam_update(p.data.reshape(-1), p.grad.reshape(-1), m.reshape(-1), v.reshape(-1),
                         f(lr_t), f(b1), f(b2), f(self.eps))

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def train_seeds(config: RunConfig, step: int) -> list[int]:
    base = config.seed * 1_000_003 + step * config.batch_size
    return [base + i for i in range(config.batch_size)]


def eval_seeds(config: RunConfig, n: int | None = None) -> list[int]:
    n = config.eval_pairs if n is None else n
    return [EVAL_SEED_OFFSET + config.seed * 10_007 + i for i in range(n)]


@dataclass
class TrainResult:
    model: TERDNet
    log: list[dict] = field(default_factory=list)
    seconds: float = 0.0


def train(config: RunConfig, model: TERDNet | None = None, out_dir: str | Path | None = None,
          on_step: Callable[[dict], None] | None = None) -> TrainResult:
    """Run ``config.steps`` Adam steps of the sequential weighted loss.

    Each step draws ``batch_size`` fresh pairs from a seed stream, so runs
    with equal configs are bit-reproducible.
    """
    model = model or TERDNet(config)
    opt = Adam(model.trainable_parameters(), config.lr, config.beta1, config.beta2)
    dtype = model.dtype
    size = config.image_size
    records: list[dict] = []
    logf = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        config.save(out_dir / "config.json")
        logf = open(out_dir / "train_log.jsonl", "w")
    start = time.perf_counter()
    try:
        for step in range(config.steps):
            pairs = [generate_pair(s, size, size, config.scene) for s in train_seeds(config, step)]
            t0, t1, gt = batch(pairs, dtype)
            weights = class_weights(gt)
            if min(weights) == 0.0:
                log.warning("step %d: batch holds a single class; class weights %s", step, weights)
            opt.zero_grad()
            with Tape() as tape:
                result = model(t0, t1)
                report = sequential_weighted_ce(result.logits, gt, config.gamma, weights)
            total = report.total.item()
            if not math.isfinite(total):
                if out_dir is not None:
                    save_checkpoint(out_dir / "nonfinite.ckpt", model,
                                    {"signature": config.model_signature(), "step": step})
                raise NonFiniteLoss(f"non-finite loss {total} at step {step}")
            tape.backward(report.total, opt.params)
            opt.step()
            rec = {
                "step": step,
                "total_loss": total,
                "per_iter_losses": report.per_iteration,
                "iter_weights": report.iteration_weights,
            }
            records.append(rec)
            if logf is not None and step % config.log_every == 0:
                logf.write(json.dumps(rec) + "\n")
            if on_step is not None:
                on_step(rec)
    finally:
        if logf is not None:
            logf.close()
    if out_dir is not None:
        save_checkpoint(out_dir / "model.ckpt", model,
                        {"signature": config.model_signature(), "steps": config.steps})
    return TrainResult(model, records, time.perf_counter() - start)


def infer(model: TERDNet, img_t0, img_t1, iterations: int | None = None) -> list[np.ndarray]:
    """Per-iteration label maps (B, H, W), last entry is the final prediction."""
    result = model(img_t0, img_t1, iterations)
    return [predict(l) for l in result.logits]


def evaluate_pairs(model: TERDNet, pairs: Iterable[ChangePair],
                   transform_t0: Callable | None = None, batch_size: int = 8) -> list[MetricReport]:
    """Dataset-level (micro-averaged) metrics per decoder iteration."""
    counts: list[Confusion] | None = None
    pairs = list(pairs)
    for i in range(0, len(pairs), batch_size):
        chunk = pairs[i:i + batch_size]
        t0, t1, gt = batch(chunk, model.dtype)
        if transform_t0 is not None:
            t0 = np.stack([transform_t0(x) for x in t0])
        preds = infer(model, t0, t1)
        if counts is None:
            counts = [Confusion() for _ in preds]
        counts = [c + Confusion.of(p, gt) for c, p in zip(counts, preds)]
    return [c.report() for c in counts or []]


def held_out_pairs(config: RunConfig, n: int | None = None) -> list[ChangePair]:
    size = config.image_size
    return [generate_pair(s, size, size, config.scene) for s in eval_seeds(config, n)]
