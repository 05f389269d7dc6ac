"""Command-line interface: train, infer, ablate, robust, report, gradcheck.

Exit codes: 0 success, 1 usage error, 2 runtime failure, 3 gradcheck failure.
Every failure prints a single ``E_<CODE>: message`` line on stderr.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import CheckpointMismatch, load_model
from .config import RunConfig
from .data import PERTURBATION_KINDS, ChangePair, load_image, load_mask, read_dataset, save_mask
from .decoder import GRU_VARIANTS, H0_MODES
from .correlation import FUSION_MODES
from .losses import Confusion
from .train import NonFiniteLoss, held_out_pairs, infer, train

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME, EXIT_GRADCHECK = 0, 1, 2, 3

log = logging.getLogger("terdnet")


class CliError(Exception):
    def __init__(self, code: str, message: str, exit_code: int = EXIT_RUNTIME):
        super().__init__(message)
        self.code = code
        self.exit_code = exit_code


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError("E_USAGE", message, EXIT_USAGE)


# --------------------------------------------------------------------------
# config handling
# --------------------------------------------------------------------------

_OVERRIDES = {
    # flag dest -> RunConfig field
    "steps": "steps", "seed": "seed", "lr": "lr", "batch_size": "batch_size", "iters": "iters",
    "gru": "gru", "h0": "h0", "fusion_mode": "fusion_mode", "image_size": "image_size",
    "eval_pairs": "eval_pairs", "dtype": "dtype",
}


def _add_model_flags(p: argparse.ArgumentParser, training: bool = True) -> None:
    p.add_argument("--config", type=Path, help="JSON run config; flags override its fields")
    p.add_argument("--iters", type=int, help="decoder iterations M")
    p.add_argument("--gru", choices=GRU_VARIANTS, help="decoder variant")
    p.add_argument("--h0", choices=H0_MODES, help="initial hidden state")
    p.add_argument("--fusion-mode", choices=FUSION_MODES)
    p.add_argument("--image-size", type=int)
    p.add_argument("--seed", type=int)
    if training:
        p.add_argument("--steps", type=int)
        p.add_argument("--lr", type=float)
        p.add_argument("--batch-size", type=int)
        p.add_argument("--eval-pairs", type=int)
        p.add_argument("--dtype", choices=("float32", "float64"))


def _config(args, base: RunConfig | None = None) -> RunConfig:
    if getattr(args, "config", None) is not None:
        try:
            cfg = RunConfig.load(args.config)
        except FileNotFoundError as exc:
            raise CliError("E_IO", f"config file not found: {args.config}") from exc
        except (ValueError, TypeError) as exc:
            raise CliError("E_CONFIG", f"invalid config {args.config}: {exc}", EXIT_USAGE) from exc
    else:
        cfg = base or RunConfig()
    updates = {f: getattr(args, d) for d, f in _OVERRIDES.items() if getattr(args, d, None) is not None}
    cfg = dataclasses.replace(cfg, **updates)
    _validate(cfg)
    return cfg


def _validate(cfg: RunConfig) -> None:
    problems = []
    if cfg.iters < 1:
        problems.append("iters must be at least 1")
    if cfg.steps < 0:
        problems.append("steps must be non-negative")
    if cfg.batch_size < 1:
        problems.append("batch size must be at least 1")
    if cfg.image_size % 16 or cfg.image_size <= 0:
        problems.append("image size must be a positive multiple of 16")
    if not 0 < cfg.gamma <= 1:
        problems.append("gamma must lie in (0, 1]")
    if problems:
        raise CliError("E_CONFIG", "; ".join(problems), EXIT_USAGE)


def _emit(obj) -> None:
    print(json.dumps(obj, sort_keys=True))


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------


def cmd_train(args) -> int:
    cfg = _config(args)
    out = Path(args.out or cfg.output_dir)
    cfg = dataclasses.replace(cfg, output_dir=str(out))

    def progress(rec):
        if not args.quiet and (rec["step"] % args.print_every == 0 or rec["step"] == cfg.steps - 1):
            print(json.dumps({k: rec[k] for k in ("step", "total_loss", "per_iter_losses")}), flush=True)

    try:
        result = train(cfg, out_dir=out, on_step=progress)
    except NonFiniteLoss as exc:
        raise CliError("E_NONFINITE", f"{exc}; snapshot in {out / 'nonfinite.ckpt'}") from exc
    summary = {"checkpoint": str(out / "model.ckpt"), "config": str(out / "config.json"),
               "steps": cfg.steps, "seconds": round(result.seconds, 3)}
    if args.evaluate:
        from .train import evaluate_pairs
        reps = evaluate_pairs(result.model, held_out_pairs(cfg))
        summary["f1_per_iter"] = [r.f1_change for r in reps]
        summary["metrics"] = dataclasses.asdict(reps[-1])
    _emit(summary)
    return EXIT_OK


def _load(args):
    ckpt = Path(args.checkpoint)
    if not ckpt.exists():
        raise CliError("E_IO", f"checkpoint not found: {ckpt}")
    if args.config is None:
        sibling = ckpt.parent / "config.json"
        if not sibling.exists():
            raise CliError("E_USAGE", "no --config given and no config.json beside the checkpoint", EXIT_USAGE)
        args.config = sibling
    cfg = _config(args)
    try:
        return load_model(ckpt, cfg), cfg
    except CheckpointMismatch as exc:
        raise CliError("E_CHECKPOINT_MISMATCH", str(exc)) from exc


def cmd_infer(args) -> int:
    model, cfg = _load(args)
    try:
        t0, size0 = load_image(args.t0, model.dtype)
        t1, size1 = load_image(args.t1, model.dtype)
    except (OSError, ValueError) as exc:
        raise CliError("E_IO", str(exc)) from exc
    if size0 != size1:
        raise CliError("E_SHAPE", f"t0 is {size0[0]}x{size0[1]} but t1 is {size1[0]}x{size1[1]}")
    preds = infer(model, t0, t1, iterations=args.iters)
    H, W = size0
    save_mask(args.out, preds[-1], (H, W))
    out = {"mask": str(args.out), "height": H, "width": W,
           "change_fraction": float(preds[-1][0, :H, :W].mean())}
    if args.gt is not None:
        gt = load_mask(args.gt)
        if gt.shape != (H, W):
            raise CliError("E_SHAPE", f"ground truth is {gt.shape[0]}x{gt.shape[1]}, images are {H}x{W}")
        reps = [Confusion.of(p[0, :H, :W], gt).report() for p in preds]
        out["f1_per_iter"] = [r.f1_change for r in reps]
        out["metrics"] = dataclasses.asdict(reps[-1])
    _emit(out)
    return EXIT_OK


def cmd_ablate(args) -> int:
    from .experiments import ABLATION_AXES, run_ablation

    cfg = _config(args)
    field_name, defaults = ABLATION_AXES[args.axis]
    values = defaults
    if args.values:
        cast = int if args.axis == "iters" else str
        try:
            values = [cast(v) for v in args.values]
        except ValueError as exc:
            raise CliError("E_USAGE", f"bad value for axis {args.axis}: {exc}", EXIT_USAGE) from exc
        allowed = {"gru-variant": GRU_VARIANTS, "fusion-mode": FUSION_MODES}.get(args.axis)
        bad = [v for v in values if (allowed and v not in allowed) or (args.axis == "iters" and v < 1)]
        if bad:
            raise CliError("E_USAGE", f"invalid values for axis {args.axis}: {bad}", EXIT_USAGE)
    seeds = args.seeds or [cfg.seed]

    def show(cell):
        if not args.quiet:
            print(json.dumps({"value": cell.value, "seed": cell.seed, "f1": cell.f1}), file=sys.stderr, flush=True)

    table = run_ablation(cfg, args.axis, seeds, values, on_cell=show)
    print(table.text())
    if args.json is not None:
        Path(args.json).write_text(table.to_json() + "\n")
    return EXIT_OK


def _dataset_pairs(root: Path, dtype) -> list[ChangePair]:
    pairs = []
    try:
        for pid, p0, p1, pg in read_dataset(root):
            t0, size = load_image(p0, dtype)
            t1, _ = load_image(p1, dtype)
            gt = np.zeros(t0.shape[2:], dtype=np.uint8)
            gt[: size[0], : size[1]] = load_mask(pg)
            pairs.append(ChangePair(t0.data, t1.data, gt, 0))
    except (OSError, KeyError, ValueError) as exc:
        raise CliError("E_IO", f"cannot read pairs from {root}: {exc}") from exc
    return pairs


def cmd_robust(args) -> int:
    from .experiments import robust_text, robustness_report

    model, cfg = _load(args)
    pairs = _dataset_pairs(args.pairs, model.dtype) if args.pairs else held_out_pairs(cfg, args.n_pairs)
    try:
        rows = robustness_report(model, pairs, args.magnitudes, args.kinds, seed=args.seed or 0)
    except ValueError as exc:
        raise CliError("E_MAGNITUDE", str(exc)) from exc
    print(robust_text(rows))
    if args.json is not None:
        Path(args.json).write_text(json.dumps([r.to_dict() for r in rows], indent=2) + "\n")
    return EXIT_OK


def cmd_report(args) -> int:
    from .accounting import cost_report
    from .model import TERDNet

    cfg = _config(args)
    size = args.height or cfg.image_size
    if size % 16 or (args.width or size) % 16:
        raise CliError("E_USAGE", "report resolution must be a multiple of 16", EXIT_USAGE)
    rep = cost_report(TERDNet(cfg), size, args.width or size, cfg.iters if cfg.gru != "none" else 1)
    print(rep.to_json() if args.json else rep.table())
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_all

    rows = run_all(args.seed, end_to_end=not args.ops_only)
    for row in rows:
        print(row.line())
    failed = [r.name for r in rows if not r.passed]
    if failed:
        raise CliError("E_GRADCHECK", f"{len(failed)} row(s) failed: {', '.join(failed)}", EXIT_GRADCHECK)
    return EXIT_OK


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="terdnet", description="Recurrent correlation-based scene change detection.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log warnings from training")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="train on synthetic change pairs")
    _add_model_flags(p)
    p.add_argument("--out", type=Path, help="output directory (default: config output_dir)")
    p.add_argument("--evaluate", action="store_true", help="report held-out metrics after training")
    p.add_argument("--print-every", type=int, default=50)
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="predict a change mask for one image pair")
    p.add_argument("--checkpoint", required=True, type=Path)
    p.add_argument("--config", type=Path, help="defaults to config.json beside the checkpoint")
    p.add_argument("--iters", type=int, help="decoder iterations at inference")
    p.add_argument("--gt", type=Path, help="ground-truth mask PNG for metrics")
    p.add_argument("t0", type=Path)
    p.add_argument("t1", type=Path)
    p.add_argument("out", type=Path)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("ablate", help="train one model per value of an ablation axis")
    _add_model_flags(p)
    p.add_argument("--axis", required=True, choices=("fusion-mode", "gru-variant", "iters"))
    p.add_argument("--values", nargs="+", help="subset of axis values (default: the full sweep)")
    p.add_argument("--seeds", type=int, nargs="+")
    p.add_argument("--json", type=Path, help="also write the table as JSON")
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("robust", help="F1 under translation/homography misalignment of t0")
    p.add_argument("--checkpoint", required=True, type=Path)
    p.add_argument("--config", type=Path)
    p.add_argument("--pairs", type=Path, help="dataset directory with manifest.json (default: held-out synthetic)")
    p.add_argument("--n-pairs", type=int, help="number of synthetic pairs when --pairs is absent")
    p.add_argument("--magnitudes", type=float, nargs="+", help="pixels (default: 50 and 100 scaled from 512 px)")
    p.add_argument("--kinds", nargs="+", choices=PERTURBATION_KINDS, default=list(PERTURBATION_KINDS))
    p.add_argument("--seed", type=int)
    p.add_argument("--json", type=Path)
    p.set_defaults(func=cmd_robust)

    p = sub.add_parser("report", help="parameter and FLOP counts per stage")
    _add_model_flags(p, training=False)
    p.add_argument("--height", type=int)
    p.add_argument("--width", type=int)
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("gradcheck", help="finite-difference check of every differentiable op")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--ops-only", action="store_true", help="skip the end-to-end model check")
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.WARNING if args.verbose else logging.ERROR, format="%(message)s")
        return args.func(args)
    except CliError as exc:
        print(f"{exc.code}: {exc}", file=sys.stderr)
        return exc.exit_code
    except KeyboardInterrupt:
        print("E_INTERRUPTED: stopped by user", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:  # noqa: BLE001 - every failure maps to one error line
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"E_RUNTIME: {type(exc).__name__}: {msg}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
