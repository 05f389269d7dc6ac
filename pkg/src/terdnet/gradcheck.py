"""Finite-difference verification of every differentiable operation."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import correlation, losses, tensor
from .tensor import Tape, Tensor


@dataclass
class GradRow:
    name: str
    max_rel_error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return bool(self.max_rel_error < self.tolerance)

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status}  {self.name:<28s} max_rel_err={self.max_rel_error:.3e}  tol={self.tolerance:.0e}"


def rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    return float(np.max(np.abs(analytic - numeric)) / (np.max(np.abs(numeric)) + 1e-8))


def numeric_grad(f: Callable[[], float], x: np.ndarray, eps: float = 1e-6,
                 index: Sequence[tuple[int, ...]] | None = None) -> np.ndarray:
    """Central differences of scalar ``f`` w.r.t. ``x``, perturbed in place.

    With ``index`` only those entries are evaluated and a 1-D array is returned.
    """
    idx = list(index) if index is not None else list(np.ndindex(*x.shape))
    out = np.empty(len(idx))
    for k, i in enumerate(idx):
        old = x[i]
        x[i] = old + eps
        fp = f()
        x[i] = old - eps
        fm = f()
        x[i] = old
        out[k] = (fp - fm) / (2 * eps)
    return out if index is not None else out.reshape(x.shape)


def check_function(name: str, fn: Callable[..., Tensor], inputs: Sequence[np.ndarray],
                   seed: int = 0, eps: float = 1e-6, tol: float = 1e-3) -> GradRow:
    """Compare tape gradients of ``sum(fn(*inputs) * R)`` with central differences.

    R is a fixed random weighting so every output element carries a distinct
    upstream gradient.
    """
    rng = np.random.default_rng(seed)
    arrays = [np.array(a, dtype=np.float64) for a in inputs]
    leaves = [Tensor(a, requires_grad=True) for a in arrays]
    R = rng.standard_normal(fn(*[Tensor(a) for a in arrays]).shape)

    def scalar() -> float:
        return float((fn(*[Tensor(a) for a in arrays]).data * R).sum())

    with Tape() as tape:
        out = fn(*leaves)
        loss = tensor.sum_all(tensor.mul(out, R))
    grads = tape.backward(loss, leaves)
    err = 0.0
    for leaf, a in zip(leaves, arrays):
        num = numeric_grad(scalar, a, eps)
        err = max(err, rel_error(grads[leaf], num))
    return GradRow(name, err, tol)


def check_model(model, img_t0: np.ndarray, img_t1: np.ndarray, gt: np.ndarray, gamma: float = 0.8,
                entries: int = 5, seed: int = 0, eps: float = 1e-6, tol: float = 1e-2) -> list[GradRow]:
    """Per-parameter check of the sequential loss on a float64 model."""
    rng = np.random.default_rng(seed)
    params = list(model.named_parameters())

    def loss_value() -> float:
        r = model(img_t0, img_t1)
        return losses.sequential_weighted_ce(r.logits, gt, gamma).total.item()

    model.zero_grad()
    with Tape() as tape:
        r = model(img_t0, img_t1)
        rep = losses.sequential_weighted_ce(r.logits, gt, gamma)
    grads = tape.backward(rep.total, [p for _, p in params])
    rows = []
    for name, p in params:
        flat = rng.choice(p.data.size, size=min(entries, p.data.size), replace=False)
        idx = [np.unravel_index(int(i), p.shape) for i in flat]
        num = numeric_grad(loss_value, p.data, eps, idx)
        ana = np.array([grads[p][i] for i in idx])
        rows.append(GradRow(f"param:{name}", rel_error(ana, num), tol))
    return rows


def op_suite(seed: int = 0) -> list[GradRow]:
    """One row per differentiable primitive, all at float64."""
    rng = np.random.default_rng(seed)
    T = tensor
    r = lambda *shape: rng.standard_normal(shape)
    away = lambda *shape: np.sign(r(*shape)) * rng.uniform(0.1, 1.0, shape)  # no relu kinks
    gt = (rng.random((2, 6, 6)) < 0.3).astype(np.uint8)
    rows = [
        check_function("conv2d", lambda x, w, b: T.conv2d(x, w, b, 1, 1), [r(2, 3, 5, 5), r(4, 3, 3, 3), r(4)], seed, eps=1e-3),
        check_function("conv2d/stride2", lambda x, w, b: T.conv2d(x, w, b, 2, 1), [r(1, 2, 6, 6), r(3, 2, 3, 3), r(3)], seed),
        check_function("conv2d/1x1", lambda x, w: T.conv2d(x, w), [r(1, 3, 4, 4), r(2, 3, 1, 1)], seed),
        check_function("sigmoid", T.sigmoid, [r(1, 2, 3, 3) * 3], seed),
        check_function("tanh", T.tanh, [r(1, 2, 3, 3) * 2], seed),
        check_function("relu", T.relu, [away(1, 2, 3, 3)], seed),
        check_function("softmax_channels", T.softmax_channels, [r(2, 3, 2, 2)], seed),
        check_function("bilinear_resize", lambda x: T.bilinear_resize(x, 5, 7), [r(1, 2, 3, 4)], seed),
        check_function("concat_channels", lambda a, b: T.concat_channels([a, b]), [r(1, 3, 2, 2), r(1, 5, 2, 2)], seed),
        check_function("split", lambda a: T.mul(T.split(a, [1, 2], axis=1)[1], 2.0), [r(1, 3, 2, 2)], seed),
        check_function("add", T.add, [r(1, 2, 3, 3), r(1, 2, 3, 3)], seed),
        check_function("sub", T.sub, [r(1, 2, 3, 3), r(1, 2, 3, 3)], seed),
        check_function("mul", T.mul, [r(1, 2, 3, 3), r(1, 2, 3, 3)], seed),
        check_function("local_correlation", lambda a, b: correlation.local_correlation(a, b, 1), [r(1, 3, 4, 4), r(1, 3, 4, 4)], seed),
        check_function("local_correlation/patch", lambda a, b: correlation.local_correlation(a, b, 1, 1), [r(1, 2, 4, 4), r(1, 2, 4, 4)], seed),
        check_function("global_correlation", correlation.global_correlation, [r(1, 2, 3, 3), r(1, 2, 3, 3)], seed),
        check_function(
            "sequential_weighted_ce",
            lambda a, b: T.add(losses.sequential_weighted_ce([a, b], gt, 0.8).total, 0.0),
            [r(2, 2, 6, 6), r(2, 2, 6, 6)], seed, tol=1e-6,
        ),
    ]
    return rows


def end_to_end_suite(seed: int = 0, size: int = 32, entries: int = 5) -> list[GradRow]:
    from .config import RunConfig
    from .data import generate_pair
    from .model import TERDNet

    cfg = RunConfig(dtype="float64", image_size=size, seed=seed)
    model = TERDNet(cfg)
    pair = generate_pair(seed, size, size)
    return check_model(model, pair.img_t0, pair.img_t1, pair.gt[None], cfg.gamma, entries, seed)


def run_all(seed: int = 0, end_to_end: bool = True) -> list[GradRow]:
    rows = op_suite(seed)
    if end_to_end:
        e2e = end_to_end_suite(seed)
        worst = max(e2e, key=lambda row: row.max_rel_error)
        rows.append(GradRow("end_to_end_loss", worst.max_rel_error, worst.tolerance))
    return rows
