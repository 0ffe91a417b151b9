"""``stl`` command line entry point.

Exit status: 0 on success, 1 on usage errors, 2 on runtime errors.
Logging verbosity comes from ``STL_LOG`` (error, info or debug).
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys

from .config import AblationPlan, ExperimentConfig, merge
from .engine import compute_miou, predict_labels
from .errors import SelfTrainError
from .experiments import load_split, run_ablation, run_search_cmd, run_training
from .report import read_curve_csv, render_svg_from_csv, write_curve_csv
from .segmodel import load_checkpoint
from .synthgen import read_dataset, write_dataset, make_split

log = logging.getLogger("selftrain")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _common(p):
    p.add_argument("--config", help="experiment config JSON")
    p.add_argument("--seed", type=int, help="master seed (also the dataset seed)")
    p.add_argument("--out", help="output directory")
    p.add_argument("--jobs", type=int, default=None, help="max concurrent runs")


def build_parser():
    parser = _Parser(prog="stl", description="iterative self-training for segmentation")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("gen-data", help="generate and store a synthetic dataset")
    _common(p)

    p = sub.add_parser("train", help="train one strategy and write a run directory")
    _common(p)
    p.add_argument("--strategy", choices=["supervised", "fist", "gist", "rist"], default="fist")
    p.add_argument("--alpha", type=float)
    p.add_argument("--stages", type=int)
    p.add_argument("--path", help="explicit L/P path, overrides --strategy")
    p.add_argument("--data", help="stored dataset directory")

    p = sub.add_parser("search", help="run a path search and write search.json")
    _common(p)
    p.add_argument("--strategy", choices=["rist", "gist", "exhaustive"], default="rist")
    p.add_argument("--runs", type=int)
    p.add_argument("--beam", type=int)
    p.add_argument("--stages", type=int)
    p.add_argument("--data")

    p = sub.add_parser("eval", help="mIoU of a stored checkpoint on a stored dataset")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=["development", "validation"], default="validation")

    p = sub.add_parser("ablate", help="add-on ablation for RIST and GIST")
    _common(p)
    p.add_argument("--plan", default="default")
    p.add_argument("--data")

    p = sub.add_parser("report", help="render stage curves")
    _common(p)
    p.add_argument("--from", dest="source", required=True)
    return parser


def _load_config(args):
    data = ExperimentConfig().to_dict()
    if args.config:
        with open(args.config) as fh:
            data = merge(data, json.load(fh))
    cfg = ExperimentConfig.from_dict(data)
    if args.seed is not None:
        if not 0 <= args.seed < 2**64:
            raise UsageError("--seed must be an unsigned 64-bit integer")
        cfg.master_seed = args.seed
        cfg.dataset.seed = args.seed
    if args.out:
        cfg.output_dir = args.out
    if args.jobs is not None:
        if args.jobs < 1:
            raise UsageError("--jobs must be >= 1")
        cfg.jobs = args.jobs
    stages = getattr(args, "stages", None)
    if stages is not None:
        cfg.stage.num_stages = stages
        cfg.search.num_stages = stages
    # re-run validation after overrides
    return ExperimentConfig.from_dict(cfg.to_dict())


def _cmd_gen_data(args, cfg):
    split = make_split(cfg.dataset)
    write_dataset(split, cfg.output_dir)
    print(json.dumps({p: len(getattr(split, p)) for p in split.PARTS}))


def _cmd_train(args, cfg):
    if args.alpha is not None:
        if not 0.0 <= args.alpha <= 1.0:
            raise UsageError("--alpha must lie in [0, 1]")
        cfg.search.fist_alpha = args.alpha
    if args.path and len(args.path) != cfg.stage.num_stages:
        if args.stages is not None:
            raise UsageError("--path length must equal --stages")
        cfg.stage.num_stages = cfg.search.num_stages = len(args.path)
        cfg = ExperimentConfig.from_dict(cfg.to_dict())
    split = load_split(cfg, args.data)
    result = run_training(cfg, args.strategy, split, cfg.output_dir, args.alpha, args.path)
    print(json.dumps({"path": result.path, "best_stage": result.best_stage, "final_val_miou": result.final_val}))


def _cmd_search(args, cfg):
    cfg.search.strategy = args.strategy
    if args.runs is not None:
        cfg.search.rist_runs = args.runs
    if args.beam is not None:
        cfg.search.beam_size = args.beam
    cfg = ExperimentConfig.from_dict(cfg.to_dict())
    split = load_split(cfg, args.data)
    res = run_search_cmd(cfg, split, cfg.output_dir)
    print(json.dumps({"winner": res.winner.path, "stage_trainings": res.stage_trainings}))


def _cmd_eval(args, cfg):
    params, _, _, _ = load_checkpoint(args.checkpoint)
    split = read_dataset(args.data)
    feats, labels = split.features(args.split), split.labels(args.split)
    miou, per_class = compute_miou(predict_labels(params, feats.astype("float64")), labels, params.num_classes)
    out = {"split": args.split, "miou": miou, "per_class": [None if v != v else v for v in per_class]}
    print(json.dumps(out))
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "eval.json"), "w") as fh:
            json.dump(out, fh, indent=1, sort_keys=True)


def _cmd_ablate(args, cfg):
    plan = AblationPlan.named(args.plan)
    split = load_split(cfg, args.data)
    table, _ = run_ablation(plan, cfg, split, cfg.output_dir)
    for label, r, g in table:
        print(f"{label}\t{r:.4f}\t{g:.4f}")


def _cmd_report(args, cfg):
    src = args.source
    out = args.out or src
    os.makedirs(out, exist_ok=True)
    stored = os.path.join(src, "stage_curve.csv")
    target_csv = os.path.join(out, "stage_curve.csv")
    if os.path.exists(stored):
        if os.path.abspath(stored) != os.path.abspath(target_csv):
            with open(stored) as fh, open(target_csv, "w") as oh:
                oh.write(fh.read())
    else:
        rows = []
        for root, dirs, files in os.walk(src):
            dirs.sort()
            if "curve.csv" in files:
                label = os.path.relpath(root, src)
                rows.extend(_rows_from_run_curve(os.path.join(root, "curve.csv"), label))
        if not rows:
            raise SelfTrainError(f"no stage_curve.csv or curve.csv under {src}")
        write_curve_csv(rows, target_csv)
    read_curve_csv(target_csv)
    svg = render_svg_from_csv(target_csv, os.path.join(out, "stage_curve.svg"))
    print(svg)


def _rows_from_run_curve(path, label):
    import csv

    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            dom = row["dominant_frac"]
            yield (label, int(row["stage"]), float(row["devel_miou"]), float(row["val_miou"]), float(dom))


_COMMANDS = {
    "gen-data": _cmd_gen_data,
    "train": _cmd_train,
    "search": _cmd_search,
    "eval": _cmd_eval,
    "ablate": _cmd_ablate,
    "report": _cmd_report,
}


def _setup_logging():
    level = os.environ.get("STL_LOG", "error").lower()
    levels = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
    logging.basicConfig(
        level=levels.get(level, logging.ERROR),
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )


def cli_main(argv=None) -> int:
    _setup_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not args.command:
            parser.print_help(sys.stderr)
            return 1
        cfg = _load_config(args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except (ValueError, TypeError, OSError, json.JSONDecodeError) as exc:
        print(f"stl: invalid configuration: {exc}", file=sys.stderr)
        return 1
    try:
        _COMMANDS[args.command](args, cfg)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except (SelfTrainError, OSError, ValueError) as exc:
        print(f"stl: {exc}", file=sys.stderr)
        return 2
    return 0


def main():
    sys.exit(cli_main())


if __name__ == "__main__":
    main()
