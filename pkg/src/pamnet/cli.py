"""Command line entry point: ``pamnet {generate,train,eval,ablate,gradcheck,defaults}``."""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
import time
from pathlib import Path

from .checkpoint import load_checkpoint
from .config import ExperimentConfig, dump_config, load_config
from .data import SplitSpec, load_csv, make_windows, split_chronological, standardize, synth_generate, write_csv
from .experiment import ABLATIONS, MetricReport, evaluate, run_ablation, run_experiment
from .training import LOSS_MODES, LossConfig, grad_check, tiny_config


def _cmd_generate(args) -> int:
    cfg = load_config(args.spec, args.set)
    frame = synth_generate(cfg.synth)
    write_csv(frame, args.out)
    print(f"wrote {frame.T}x{frame.N} series to {args.out}")
    return 0


def _cmd_train(args) -> int:
    cfg = load_config(args.config, args.set)
    if args.output:
        cfg = dataclasses.replace(cfg, output_dir=args.output)
    report = run_experiment(cfg)
    _print_report(report)
    return 0 if report.ok_rows() and len(report.ok_rows()) == len(report.seeds) else 1


def _cmd_eval(args) -> int:
    params, model_cfg, meta = load_checkpoint(args.checkpoint)
    frame = load_csv(args.data)
    if args.split:
        spec = SplitSpec(fractions=tuple(float(x) for x in args.split.split(",")))
    elif meta.get("split_counts"):
        spec = SplitSpec(counts=tuple(meta["split_counts"]))
    else:
        spec = SplitSpec(fractions=tuple(meta.get("split") or (0.7, 0.1, 0.2)))
    if frame.N != model_cfg.channels:
        print(f"error: checkpoint expects {model_cfg.channels} channels, data has {frame.N}", file=sys.stderr)
        return 2
    L, H = model_cfg.lookback, model_cfg.horizon
    splits = split_chronological(frame, spec, L, H)
    stats = None
    if meta.get("standardize", True):
        frame, stats = standardize(frame, (0, splits.targets[0][1]))
    test = make_windows(frame, splits.test, L, H)
    inverse = stats.inverse if (args.raw_units and stats is not None) else None
    metrics, _ = evaluate(params, model_cfg, test, frame.names, args.target_channel, inverse=inverse)
    row = {"seed": meta.get("seed"), "status": "ok", **metrics}
    report = MetricReport(horizon=H, ablation=meta.get("ablation", "full"), target_channel=args.target_channel, seeds=[row])
    text = json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    print(text, end="")
    return 0


def _cmd_ablate(args) -> int:
    cfg = load_config(args.config, args.set)
    if args.output:
        cfg = dataclasses.replace(cfg, output_dir=args.output)
    tags = args.tags.split(",") if args.tags else list(ABLATIONS)
    unknown = [t for t in tags if t not in ABLATIONS]
    if unknown:
        print(f"error: unknown ablation tags {unknown}; registered: {list(ABLATIONS)}", file=sys.stderr)
        return 2
    results = run_ablation(cfg, tags)
    for tag, rep in results.items():
        agg = rep.aggregate()
        print(f"{tag:14s} mse={agg.get('mse_mean', float('nan')):.4f} mae={agg.get('mae_mean', float('nan')):.4f}")
    print(f"comparison table: {Path(cfg.output_dir) / 'ablation.csv'}")
    ok = all(len(r.ok_rows()) == len(r.seeds) for r in results.values())
    return 0 if ok else 1


def _cmd_gradcheck(args) -> int:
    config = tiny_config(activation=args.activation)
    modes = LOSS_MODES if args.loss == "all" else (args.loss,)
    t0 = time.perf_counter()
    ok = True
    for mode in modes:
        rep = grad_check(config, LossConfig(alpha=args.alpha, mode=mode), seed=args.seed, tolerance=args.tol)
        ok &= rep.passed
        status = "PASS" if rep.passed else "FAIL"
        print(f"[{status}] loss={mode} max_rel_err={rep.max_error:.3e}")
        for name, err in rep.errors.items():
            print(f"    {name:20s} {err:.3e}")
    print(f"elapsed {time.perf_counter() - t0:.2f}s")
    return 0 if ok else 1


def _cmd_defaults(args) -> int:
    print(dump_config(ExperimentConfig()), end="")
    return 0


def _print_report(report: MetricReport) -> None:
    for row in report.seeds:
        if row["status"] == "ok":
            print(f"seed {row['seed']}: mse={row['mse']:.5f} mae={row['mae']:.5f} best_epoch={row['best_epoch']}")
        else:
            print(f"seed {row['seed']}: FAILED {row['error']}")
    agg = report.aggregate()
    if "mse_mean" in agg:
        print(f"mean mse={agg['mse_mean']:.5f} mae={agg['mae_mean']:.5f}")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pamnet", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def with_overrides(sp):
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")

    g = sub.add_parser("generate", help="write a synthetic series CSV")
    g.add_argument("spec", nargs="?", help="key=value file with synth.* keys")
    g.add_argument("-o", "--out", required=True)
    with_overrides(g)
    g.set_defaults(func=_cmd_generate)

    t = sub.add_parser("train", help="train every seed of a config")
    t.add_argument("config", nargs="?")
    t.add_argument("-o", "--output")
    with_overrides(t)
    t.set_defaults(func=_cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on the test split of a CSV")
    e.add_argument("checkpoint")
    e.add_argument("data")
    e.add_argument("--split", help="train,val,test fractions (default: from checkpoint)")
    e.add_argument("--target-channel")
    e.add_argument("--raw-units", action="store_true")
    e.add_argument("-o", "--out")
    e.set_defaults(func=_cmd_eval)

    a = sub.add_parser("ablate", help="run ablation tags and write a comparison CSV")
    a.add_argument("config", nargs="?")
    a.add_argument("--tags", help=f"comma list (default all: {','.join(ABLATIONS)})")
    a.add_argument("-o", "--output")
    with_overrides(a)
    a.set_defaults(func=_cmd_ablate)

    gc = sub.add_parser("gradcheck", help="finite-difference gradient check on a tiny model")
    gc.add_argument("--loss", default="all", choices=("all",) + LOSS_MODES)
    gc.add_argument("--alpha", type=float, default=0.25)
    gc.add_argument("--activation", default="silu")
    gc.add_argument("--seed", type=int, default=0)
    gc.add_argument("--tol", type=float, default=1e-4)
    gc.set_defaults(func=_cmd_gradcheck)

    d = sub.add_parser("defaults", help="print the built-in configuration")
    d.set_defaults(func=_cmd_defaults)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
