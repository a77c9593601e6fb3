"""Command-line entry point: ``tcrl gen-data | train | eval | ablate | plot``.

Exit codes: 0 success, 2 configuration or input error, 3 runtime abort
(non-finite loss, no clusters, unreadable checkpoint).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
from dataclasses import replace
from pathlib import Path

from . import config as cfgmod
from .clustering import ClusteringError
from .data import DataError, SyntheticData, gen_synthetic, load_dataset_dir, write_dataset
from .losses import ABLATION_ROWS, ablation_config
from .pipeline import (
    CheckpointError,
    TrainingAborted,
    evaluate,
    load_checkpoint,
    run_summary,
    state_digest,
    train,
)
from .plot import PlotError, plot_files

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_ABORT = 3

TELEMETRY_FILE = "telemetry.csv"
CHECKPOINT_FILE = "checkpoint.tcrl"
CONFIG_FILE = "config.ini"
REPORT_FILE = "report.json"
CMC_FILE = "cmc.csv"
ABLATION_FILE = "ablation.csv"


class UsageError(Exception):
    pass


def _positive_min2(text: str) -> int:
    v = int(text)
    if v < 2:
        raise argparse.ArgumentTypeError(f"must be >= 2, got {v}")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tcrl", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="verb", required=True)

    g = sub.add_parser("gen-data", help="write a synthetic dataset as PNG folders plus a manifest")
    g.add_argument("--out", required=True, help="dataset root")
    g.add_argument("--ids", type=_positive_min2, default=20)
    g.add_argument("--per-id", type=_positive_min2, default=20)
    g.add_argument("--height", type=int, default=32)
    g.add_argument("--width", type=int, default=32)
    g.add_argument("--seed", type=int, default=0)

    def run_args(sp):
        sp.add_argument("--config", help="INI config file")
        sp.add_argument("--out", help="output directory (overrides output.dir)")
        sp.add_argument("--epochs", type=int, help="shorthand for train.epochs")
        sp.add_argument("--seed", type=int, help="shorthand for train.seed")
        sp.epilog = "Any other setting can be overridden as --section.key=value, e.g. --loss.enable_pcl=false"

    t = sub.add_parser("train", help="train and write checkpoint + telemetry")
    run_args(t)
    t.add_argument("--resume", action="store_true", help="continue from the checkpoint in the output directory")

    e = sub.add_parser("eval", help="evaluate a checkpoint on the query/gallery split")
    run_args(e)
    e.add_argument("--checkpoint", required=True)

    a = sub.add_parser("ablate", help="train every (row, seed) pair and write a summary CSV")
    run_args(a)
    a.add_argument("--rows", default=",".join(ABLATION_ROWS),
                   help=f"comma-separated rows from: {', '.join(ABLATION_ROWS)}")
    a.add_argument("--seeds", default="0", help="comma-separated training seeds")

    pl = sub.add_parser("plot", help="overlay CMC CSVs in one SVG")
    pl.add_argument("csv", nargs="+")
    pl.add_argument("--out", required=True, help="SVG path")
    pl.add_argument("--labels", help="comma-separated legend labels (default: file stems)")
    pl.add_argument("--title", default="CMC")
    return p


def _split_overrides(extra: list[str]) -> list[str]:
    bad = [tok for tok in extra if not (tok.startswith("--") and "=" in tok and "." in tok.split("=", 1)[0])]
    if bad:
        raise UsageError(f"unrecognized arguments: {' '.join(bad)}")
    return extra


def resolve_config(args, extra: list[str]) -> cfgmod.RunConfig:
    overrides = _split_overrides(extra)
    if getattr(args, "epochs", None) is not None:
        overrides.append(f"train.epochs={args.epochs}")
    if getattr(args, "seed", None) is not None:
        overrides.append(f"train.seed={args.seed}")
    if getattr(args, "out", None):
        overrides.append(f"output.dir={args.out}")
    return cfgmod.load(args.config, overrides)


def load_data(run: cfgmod.RunConfig) -> SyntheticData:
    d = run.data
    if d.source == "folder":
        return load_dataset_dir(d.path)
    return gen_synthetic(d.ids, d.per_id, d.height, d.width, d.seed)


def _check_fit(run: cfgmod.RunConfig, data: SyntheticData) -> None:
    tc = run.train
    if tc.P * tc.k > len(data.train):
        raise cfgmod.ConfigError([f"train.P * train.k = {tc.P * tc.k} exceeds the {len(data.train)} training images"])


def _prepare_out(run: cfgmod.RunConfig) -> Path:
    out = run.output_path()
    out.mkdir(parents=True, exist_ok=True)
    (out / CONFIG_FILE).write_text(cfgmod.dumps(run))
    return out


def cmd_gen_data(args, extra) -> int:
    if extra:
        raise UsageError(f"unrecognized arguments: {' '.join(extra)}")
    data = gen_synthetic(args.ids, args.per_id, args.height, args.width, args.seed)
    meta = {"ids": args.ids, "per_id": args.per_id, "height": args.height, "width": args.width, "seed": args.seed}
    manifest = write_dataset(args.out, data, meta)
    print(f"wrote {sum(len(s) for s in data)} images and {manifest}")
    return EXIT_OK


def cmd_train(args, extra) -> int:
    run = resolve_config(args, extra)
    data = load_data(run)
    _check_fit(run, data)
    out = _prepare_out(run)
    ckpt = out / CHECKPOINT_FILE
    state = None
    if args.resume and ckpt.exists():
        state = load_checkpoint(ckpt)
        state.config = run.train
    state, _ = train(run.train, data.train, out / TELEMETRY_FILE, ckpt, state)
    print(f"trained {state.epoch} epochs; checkpoint {ckpt} sha256 {state_digest(state)}")
    return EXIT_OK


def cmd_eval(args, extra) -> int:
    run = resolve_config(args, extra)
    if not Path(args.checkpoint).is_file():
        raise UsageError(f"checkpoint {args.checkpoint} not found")
    state = load_checkpoint(args.checkpoint)
    data = load_data(run)
    out = _prepare_out(run)
    report = evaluate(state.params, data.query, data.gallery)
    report.write(out / REPORT_FILE, out / CMC_FILE)
    print(json.dumps(run_summary(report), sort_keys=True))
    return EXIT_OK


def ablation_summary(results: list[dict]) -> list[dict]:
    """Per-run rows followed by one mean row per ablation row (seed = 'mean')."""
    out = list(results)
    for row in dict.fromkeys(r["row"] for r in results):
        runs = [r for r in results if r["row"] == row]
        out.append({
            "row": row, "seed": "mean",
            "mAP": math.fsum(r["mAP"] for r in runs) / len(runs),
            "rank1": math.fsum(r["rank1"] for r in runs) / len(runs),
        })
    return out


def write_ablation_csv(path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["row", "seed", "mAP", "rank1"])
        for r in rows:
            w.writerow([r["row"], r["seed"], repr(float(r["mAP"])), repr(float(r["rank1"]))])


def cmd_ablate(args, extra) -> int:
    run = resolve_config(args, extra)
    rows = [r.strip() for r in args.rows.split(",") if r.strip()]
    unknown = [r for r in rows if r not in ABLATION_ROWS]
    try:
        seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    except ValueError:
        raise UsageError(f"--seeds must be comma-separated integers, got {args.seeds!r}") from None
    if unknown or not rows or not seeds:
        raise UsageError(f"bad ablation grid: unknown rows {unknown}" if unknown else "empty ablation grid")
    data = load_data(run)
    _check_fit(run, data)
    out = _prepare_out(run)
    results = []
    for row in rows:
        for seed in seeds:
            tc = replace(run.train, seed=seed, loss=ablation_config(row, run.train.loss))
            state, _ = train(tc, data.train)
            summary = run_summary(evaluate(state.params, data.query, data.gallery), ranks=(1,))
            results.append({"row": row, "seed": seed, "mAP": summary["mAP"], "rank1": summary["rank1"]})
            print(f"{row} seed {seed}: mAP {summary['mAP']:.4f} rank1 {summary['rank1']:.4f}", flush=True)
    write_ablation_csv(out / ABLATION_FILE, ablation_summary(results))
    print(f"wrote {out / ABLATION_FILE}")
    return EXIT_OK


def cmd_plot(args, extra) -> int:
    if extra:
        raise UsageError(f"unrecognized arguments: {' '.join(extra)}")
    labels = args.labels.split(",") if args.labels else None
    path = plot_files(args.csv, args.out, labels, args.title)
    print(f"wrote {path}")
    return EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "plot": cmd_plot,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args, extra = parser.parse_known_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.verb](args, extra)
    except cfgmod.ConfigError as exc:
        print("config error:", file=sys.stderr)
        for problem in exc.problems:
            print(f"  - {problem}", file=sys.stderr)
        return EXIT_CONFIG
    except (UsageError, DataError, PlotError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (TrainingAborted, ClusteringError, CheckpointError) as exc:
        print(f"aborted: {exc}", file=sys.stderr)
        return EXIT_ABORT


if __name__ == "__main__":
    sys.exit(main())
