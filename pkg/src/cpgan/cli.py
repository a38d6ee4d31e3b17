"""Command-line entry point: ``cpgan <command> [flags]``.

Exit codes: 0 success, 1 validation error, 2 runtime error (including
non-finite losses).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from cpgan import data as data_mod
from cpgan import gradcheck as gc
from cpgan import metrics as M
from cpgan.networks import SegNet
from cpgan.tensor import load_checkpoint
from cpgan.trainer import (
    ConfigError,
    NonFiniteLossError,
    TrainConfig,
    _csv_text,
    evaluate,
    run_experiment,
)

log = logging.getLogger("cpgan")

ABLATION_COMPONENTS = ("scm", "assistant")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


def _rates(text: str) -> list[float]:
    try:
        rates = [float(r) for r in text.split(",") if r.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad rate list {text!r}") from None
    if not rates:
        raise argparse.ArgumentTypeError("empty rate list")
    return rates


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="cpgan", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="write a synthetic dataset directory")
    g.add_argument("--out", required=True)
    g.add_argument("--count", type=int, default=200)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--size", type=int, default=64)

    t = sub.add_parser("train", help="run one training experiment")
    t.add_argument("--config", required=True)
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)

    e = sub.add_parser("eval", help="evaluate a checkpoint's segmentation net")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--split", default="test")

    c = sub.add_parser("gradcheck", help="finite-difference check of every op and loss")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--out", default=None)

    s = sub.add_parser("sweep", help="label-rate sweep (median over seeds)")
    s.add_argument("--config", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--rates", type=_rates, default=[1.0, 0.8, 0.6, 0.4, 0.2])
    s.add_argument("--seeds", type=int, default=3)

    a = sub.add_parser("ablate", help="paired runs with a component on and off")
    a.add_argument("--component", required=True)
    a.add_argument("--config", required=True)
    a.add_argument("--data", required=True)
    a.add_argument("--out", required=True)
    a.add_argument("--seeds", type=int, default=3)
    return p


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args) -> int:
    cfg = data_mod.SynthConfig(count=args.count, size=args.size, seed=args.seed)
    cfg.validate()
    samples = data_mod.generate_synthetic(cfg)
    splits = data_mod.split_dataset(samples, seed=args.seed)
    assignment = {s.id: name for name, part in splits.items() for s in part}
    out = Path(args.out)
    data_mod.save_dataset(samples, out, assignment)
    (out / "gen_config.txt").write_text(
        f"count = {cfg.count}\nsize = {cfg.size}\nseed = {cfg.seed}\nnoise = {cfg.noise}\n"
        f"lesions = {cfg.lesions[0]},{cfg.lesions[1]}\n"
        f"radius = {cfg.radius_range[0]},{cfg.radius_range[1]}\n")
    print(f"wrote {len(samples)} samples to {out}")
    return 0


def _load_data(path) -> dict:
    splits = data_mod.load_splits(path)
    if not splits.get("train"):
        raise ConfigError(f"{path}: dataset has no training samples")
    return splits


def cmd_train(args) -> int:
    cfg = TrainConfig.load(args.config)
    splits = _load_data(args.data)
    rep = run_experiment(cfg, splits, args.out)
    fv = rep["final_validation"]
    print(f"final validation Dic {fv['dic']:.4f} Jac {fv['jac']:.4f}; run directory {args.out}")
    return 0


def cmd_eval(args) -> int:
    state = load_checkpoint(args.checkpoint)
    seg_state = {k[2:]: v for k, v in state.items() if k.startswith("S.")}
    if not seg_state:
        raise ConfigError(f"{args.checkpoint}: no segmentation parameters (S.*) in checkpoint")
    net = SegNet.from_state(seg_state)
    splits = data_mod.load_splits(args.data)
    if args.split not in splits:
        raise ConfigError(f"unknown split {args.split!r}; available: {sorted(splits)}")
    rep, _ = evaluate(net, splits[args.split])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "eval_config.txt").write_text(f"checkpoint = {args.checkpoint}\ndata = {args.data}\nsplit = {args.split}\n")
    (out / "report.json").write_text(json.dumps({"split": args.split, "metrics": rep.to_dict()}, indent=1,
                                                sort_keys=True) + "\n")
    (out / "metrics.csv").write_text(_csv_text(("split",) + M.TABLE_COLUMNS, [(args.split, *rep.row())]))
    print(f"{args.split}: " + " ".join(f"{c} {v:.4f}" for c, v in zip(M.TABLE_COLUMNS, rep.row())))
    return 0


def cmd_gradcheck(args, registry=None) -> int:
    results = gc.run_all(args.seed, registry)
    lines = [f"{'PASS' if r.passed else 'FAIL'} {r.name} rel_error={r.rel_error:.3e} coords={r.n_coords}"
             for r in results]
    ok = all(r.passed for r in results)
    lines.append(f"{'ALL PASS' if ok else 'FAILURES'}: {sum(r.passed for r in results)}/{len(results)}")
    print("\n".join(lines))
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "gradcheck.txt").write_text("\n".join(lines) + "\n")
    return 0 if ok else 2


def _median_row(reports: list[M.MetricsReport]) -> list[float]:
    return [float(np.median([r.row()[i] for r in reports])) for i in range(len(M.TABLE_COLUMNS))]


def _final_val(rep: dict) -> M.MetricsReport:
    fv = rep["final_validation"]
    return M.MetricsReport(fv["dic"], fv["jac"], fv["acc"], fv["sen"], fv["spe"])


def cmd_sweep(args) -> int:
    base = TrainConfig.load(args.config)
    for r in args.rates:
        if not 0.0 < r <= 1.0:
            raise ConfigError(f"label rate {r} outside (0, 1]")
    if args.seeds < 1:
        raise ConfigError("--seeds must be >= 1")
    splits = _load_data(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(base.dumps())
    median_rows, seed_rows = [], []
    for rate in args.rates:
        reps = []
        for i in range(args.seeds):
            cfg = replace(base, label_rate=rate, seed=base.seed + i)
            rep = run_experiment(cfg, splits, out / f"rate_{rate:g}" / f"seed_{cfg.seed}")
            mr = _final_val(rep)
            reps.append(mr)
            seed_rows.append((rate, cfg.seed, *mr.row()))
        median_rows.append((rate, *_median_row(reps)))
    (out / "sweep.csv").write_text(_csv_text(("rate",) + M.TABLE_COLUMNS, median_rows))
    (out / "sweep_per_seed.csv").write_text(_csv_text(("rate", "seed") + M.TABLE_COLUMNS, seed_rows))
    print((out / "sweep.csv").read_text(), end="")
    return 0


def cmd_ablate(args) -> int:
    if args.component not in ABLATION_COMPONENTS:
        raise ConfigError(f"unknown component {args.component!r}; valid values: {', '.join(ABLATION_COMPONENTS)}")
    base = TrainConfig.load(args.config)
    if args.seeds < 1:
        raise ConfigError("--seeds must be >= 1")
    splits = _load_data(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(base.dumps())
    flag = f"{args.component}_enabled"
    rows, summary, series = [], [], []
    for variant, on in (("with", True), ("without", False)):
        reps = []
        for i in range(args.seeds):
            cfg = replace(base, seed=base.seed + i, **{flag: on})
            rep = run_experiment(cfg, splits, out / f"{variant}_{args.component}" / f"seed_{cfg.seed}")
            mr = _final_val(rep)
            reps.append(mr)
            rows.append((variant, cfg.seed, *mr.row()))
            series.extend((variant, cfg.seed, e["epoch"], e["disc_acc"]) for e in rep["epochs"])
        summary.append((variant, *_median_row(reps)))
    (out / "ablation.csv").write_text(_csv_text((args.component, "seed") + M.TABLE_COLUMNS, rows))
    (out / "ablation_summary.csv").write_text(_csv_text((args.component,) + M.TABLE_COLUMNS, summary))
    if args.component == "assistant":
        (out / "disc_accuracy.csv").write_text(_csv_text(("variant", "seed", "epoch", "disc_acc"), series))
    print((out / "ablation_summary.csv").read_text(), end="")
    return 0


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "sweep": cmd_sweep,
    "ablate": cmd_ablate,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, data_mod.DataFormatError, FileNotFoundError, KeyError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (NonFiniteLossError, FloatingPointError, RuntimeError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
