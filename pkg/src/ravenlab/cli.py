"""Command-line entry point.

Subcommands: gen (write a puzzle dataset), train (warm start + joint),
eval (reasoning accuracy on fresh puzzles), metrics (disentanglement report
from a checkpoint's encoder), inspect (render one puzzle to a netpbm file),
report (figures + CSV from training/eval artifacts).  Exit codes: 0 ok,
2 usage error, 1 runtime error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import report as report_mod
from .metrics import evaluate_metrics
from .puzzles import generate_puzzle, write_dataset
from .render import render, render_grid, save_image
from .rng import RngStream
from .space import build_space
from .train import (
    TrainConfig,
    evaluate_reasoning,
    run_training,
    trainer_from_checkpoint,
    trainer_to_checkpoint,
)


def _add_gen(sub):
    p = sub.add_parser("gen", help="generate a puzzle dataset directory")
    p.add_argument("--space", required=True, help="preset name or space config JSON file")
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--l", type=int, default=1, help="number of rule factors")
    p.add_argument("--out", required=True)
    p.add_argument("--render", action="store_true", help="also write netpbm panels per puzzle")
    p.add_argument("--cell", type=int, default=64, help="panel size in pixels when rendering")


def _add_train(sub):
    p = sub.add_parser("train", help="run warm start + joint training")
    p.add_argument("--config", required=True, help="TrainConfig JSON file")
    p.add_argument("--out", required=True, help="checkpoint output path")
    p.add_argument("--log", help="training log JSONL output path")


def _add_eval(sub):
    p = sub.add_parser("eval", help="reasoning accuracy of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--n", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--figures", help="directory for the CSV + PNG report")
    p.add_argument("--dump-inference", help="per-puzzle mask diagnostics JSONL path")


def _add_metrics(sub):
    p = sub.add_parser("metrics", help="disentanglement metrics of a checkpoint encoder")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--n", type=int, default=10000, help="probe size")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--figures", help="directory for the CSV + PNG report")


def _add_inspect(sub):
    p = sub.add_parser("inspect", help="render one generated puzzle to a netpbm file")
    p.add_argument("--space", required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--l", type=int, default=1)
    p.add_argument("--cell", type=int, default=64)
    p.add_argument("--out", required=True)


def _add_report(sub):
    p = sub.add_parser("report", help="figures + CSV from run artifacts")
    p.add_argument("--log", help="training log JSONL")
    p.add_argument("--eval-json", help="eval output JSON")
    p.add_argument("--metrics-json", help="metrics output JSON")
    p.add_argument("--out", required=True, help="output directory")


def _space_from_arg(arg: str):
    if Path(arg).exists():
        with open(arg) as fh:
            return build_space(json.load(fh))
    return build_space(arg)


def _cmd_gen(args) -> int:
    space = _space_from_arg(args.space)
    instances = write_dataset(args.out, space, args.count, args.l, args.seed)
    if args.render:
        for i, inst in enumerate(instances):
            pdir = Path(args.out) / f"puzzle_{i:05d}"
            pdir.mkdir(exist_ok=True)
            for row in range(3):
                for col in range(3):
                    if row == 2 and col == 2:
                        continue  # withheld cell
                    img = render(space, inst.grid[row * 3 + col], args.cell)
                    save_image(pdir / f"p{row + 1}{col + 1}.ppm", img)
            for k, choice in enumerate(inst.choices):
                save_image(pdir / f"c{k}.ppm", render(space, choice, args.cell))
    print(f"wrote {len(instances)} puzzles to {args.out}")
    return 0


def _cmd_train(args) -> int:
    config = TrainConfig.from_file(args.config)
    log: list = []
    trainer = run_training(config, log)
    trainer_to_checkpoint(trainer, args.out)
    if args.log:
        report_mod.write_log(args.log, log)
    print(f"wrote checkpoint {args.out}")
    return 0


def _cmd_eval(args) -> int:
    trainer, _ = trainer_from_checkpoint(args.checkpoint)
    result = evaluate_reasoning(trainer, args.n, args.seed)
    if args.dump_inference:
        _dump_inference(trainer, args.n, args.seed, args.dump_inference)
    print(json.dumps(result, indent=2))
    if args.figures:
        for path in report_mod.per_factor_accuracy(result, args.figures):
            print(f"wrote {path}", file=sys.stderr)
    return 0


def _dump_inference(trainer, n, seed, path) -> None:
    from .inference import infer_rule_mask, infer_z_prime, masks_to_json

    space = trainer.space
    cfg = trainer.config
    root = RngStream(seed).child(999)
    with open(path, "w") as fh:
        for i in range(n):
            puzzle = generate_puzzle(space, cfg.l, root.child(i))
            panels = trainer.panel_cache.batch(list(puzzle.context()) + list(puzzle.choices))
            latent = infer_z_prime(trainer.model.encode, panels)
            means = np.vstack([latent.context.mean, latent.choices.mean])
            from .inference import infer_active_mask

            o_kn = infer_active_mask(means, cfg.epsilon)
            if int(o_kn.sum()) < cfg.l:
                o_kn = np.ones(cfg.latent_dim, dtype=np.uint8)
            masks, profile = infer_rule_mask(latent, o_kn, cfg.l)
            fh.write(json.dumps(masks_to_json(masks, profile)) + "\n")


def _cmd_metrics(args) -> int:
    trainer, _ = trainer_from_checkpoint(args.checkpoint)
    rng = RngStream(args.seed).child(777)
    mreport = evaluate_metrics(trainer.space, trainer.encode_means, rng, n_probe=args.n)
    print(json.dumps(mreport.to_dict(), indent=2))
    print(mreport.table())
    if args.figures:
        for path in report_mod.metric_bars(mreport.to_dict(), args.figures):
            print(f"wrote {path}", file=sys.stderr)
    return 0


def _cmd_inspect(args) -> int:
    space = _space_from_arg(args.space)
    puzzle = generate_puzzle(space, args.l, RngStream(args.seed))
    img = render_grid(space, puzzle, args.cell)
    save_image(args.out, img)
    print(f"wrote {args.out} (answer index {puzzle.answer_index})")
    return 0


def _cmd_report(args) -> int:
    wrote = []
    if args.log:
        wrote += report_mod.training_curves(report_mod.read_log(args.log), args.out)
    if args.eval_json:
        with open(args.eval_json) as fh:
            wrote += report_mod.per_factor_accuracy(json.load(fh), args.out)
    if args.metrics_json:
        with open(args.metrics_json) as fh:
            wrote += report_mod.metric_bars(json.load(fh), args.out)
    if not wrote:
        print("nothing to report: pass --log, --eval-json, or --metrics-json", file=sys.stderr)
        return 2
    for path in wrote:
        print(f"wrote {path}")
    return 0


_COMMANDS = {
    "gen": _cmd_gen,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "metrics": _cmd_metrics,
    "inspect": _cmd_inspect,
    "report": _cmd_report,
}


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="ravenlab", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for add in (_add_gen, _add_train, _add_eval, _add_metrics, _add_inspect, _add_report):
        add(sub)
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return _COMMANDS[args.command](args)
    except (BrokenPipeError, KeyboardInterrupt):
        return 1
    except Exception as exc:  # runtime failure -> exit 1 with a message
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
