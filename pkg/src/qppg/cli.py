"""Command-line entry point.

Exit codes: 0 success, 1 invalid input or usage, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .deploy import ProfileError, estimate_latency, load_profile, pareto_front, select_for_device
from .int_runtime import FormatError, ModelError, load_model, run_inference
from .pipeline import (FlowConfig, load_data, merge_from_dir, pareto_csv, postprocess_series,
                       read_pareto_csv, run_flow, run_named_stage)
from .signals import (ParseError, ProtocolError, SchemaError, SynthConfig, read_samples,
                      save_record, signal_windows, synth_generate)
from .tcn import ShapeError, load_network
from .training import evaluate, mae

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2
VALIDATION_ERRORS = (ValueError, ParseError, SchemaError, ProtocolError, FormatError, ModelError,
                     ProfileError, ShapeError, FileNotFoundError, KeyError, json.JSONDecodeError)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _globals() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", default=argparse.SUPPRESS, help="flow config JSON")
    p.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="global seed (u64)")
    p.add_argument("--out", default=argparse.SUPPRESS, help="output directory")
    p.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)
    return p


def build_parser() -> argparse.ArgumentParser:
    g = _globals()
    ap = _Parser(prog="qppg", description="Quantised TCN exploration flow for PPG heart rate",
                 parents=[g])
    sub = ap.add_subparsers(dest="cmd", required=True, parser_class=_Parser)
    s = sub.add_parser("synth", parents=[g], help="write a synthetic dataset as CSV records")
    s.add_argument("--subjects", type=int)
    s.add_argument("--windows", type=int, help="windows per subject")
    sub.add_parser("train", parents=[g], help="train the seed network")
    sub.add_parser("search-channels", parents=[g], help="channel-mask sweep")
    sub.add_parser("search-dilation", parents=[g], help="dilation-gate sweep")
    sub.add_parser("search-precision", parents=[g], help="uniform and mixed-precision QAT")
    sub.add_parser("pareto", parents=[g], help="merge stages into pareto.csv and manifest.json")
    sub.add_parser("run", parents=[g], help="all stages followed by the merge")
    s = sub.add_parser("select", parents=[g], help="pick the best model for a device")
    s.add_argument("--profile", required=True, help="bundled profile name or JSON path")
    s.add_argument("--csv", help="frontier CSV (default <out>/pareto.csv)")
    s = sub.add_parser("infer", parents=[g], help="integer inference on a signal CSV")
    s.add_argument("--model", required=True)
    s.add_argument("--input", required=True)
    s.add_argument("--postprocess", action="store_true")
    s = sub.add_parser("eval", parents=[g], help="MAE of a model on the configured test split")
    s.add_argument("--model", help=".qppg or .npz file (default <out>/nets/seed.npz)")
    return ap


def load_config(args) -> FlowConfig:
    cfg = FlowConfig.load(args.config) if getattr(args, "config", None) else FlowConfig()
    if getattr(args, "seed", None) is not None:
        if not 0 <= args.seed < 1 << 64:
            raise ValueError("seed must be an unsigned 64-bit integer")
        cfg.seed = args.seed
    if getattr(args, "out", None):
        cfg.out_dir = args.out
    return cfg


def cmd_synth(cfg: FlowConfig, args) -> None:
    synth = dict(cfg.data.synth)
    synth["seed"] = cfg.seed
    if args.subjects:
        synth["n_subjects"] = args.subjects
    if args.windows:
        synth["duration_s"] = SynthConfig.windows_to_duration(args.windows)
    recs = synth_generate(SynthConfig(**{k: tuple(v) if isinstance(v, list) else v
                                         for k, v in synth.items()}))
    out = Path(cfg.out_dir) / "data"
    out.mkdir(parents=True, exist_ok=True)
    for r in recs:
        save_record(r, out / f"{r.subject_id}.csv")
        print(out / f"{r.subject_id}.csv")


def cmd_select(cfg: FlowConfig, args) -> None:
    prof = load_profile(args.profile)
    path = args.csv or Path(cfg.out_dir) / "pareto.csv"
    front = pareto_front(read_pareto_csv(path), "bytes")
    pick = select_for_device(front, prof)
    if pick is None:
        print(f"no-fit: no candidate within {prof.budget_bytes:.0f} bytes and {prof.window_s} s")
        return
    lat = estimate_latency(pick, prof)
    print(pareto_csv([pick]).splitlines()[1] + f",latency_s={lat:.4f}")


def cmd_infer(cfg: FlowConfig, args) -> None:
    model = load_model(args.model)
    x = signal_windows(read_samples(args.input))
    pred = run_inference(model, x)
    if args.postprocess:
        pred = postprocess_series(pred)
    for p in pred:
        print(f"{p:.3f}")


def cmd_eval(cfg: FlowConfig, args) -> None:
    data = load_data(cfg)
    path = Path(args.model) if args.model else Path(cfg.out_dir) / "nets" / "seed.npz"
    if path.suffix == ".qppg":
        pred = run_inference(load_model(path), data.test.inputs)
        print(f"mae_bpm={mae(pred, data.test.targets):.4f}")
    else:
        print(f"mae_bpm={evaluate(load_network(path), data.test).mae_bpm:.4f}")


def _stage(name):
    def run(cfg, args):
        res = run_named_stage(cfg, name)
        for c in res.candidates:
            print(f"{c.id},{c.mae_bpm:.4f},{c.bytes},{c.macs}")
        for f in res.failures:
            print(f"failed {f['id']}: {f['error']}", file=sys.stderr)
    return run


def cmd_pareto(cfg: FlowConfig, args) -> None:
    front, doc = merge_from_dir(cfg)
    print(pareto_csv(front), end="")
    print(f"manifest_hash={doc['manifest_hash']}")


def cmd_run(cfg: FlowConfig, args) -> None:
    front, doc = run_flow(cfg)
    print(pareto_csv(front), end="")
    print(f"manifest_hash={doc['manifest_hash']}")


COMMANDS = {
    "synth": cmd_synth, "train": _stage("seed"), "search-channels": _stage("channels"),
    "search-dilation": _stage("dilation"), "search-precision": _stage("quant"),
    "pareto": cmd_pareto, "run": cmd_run, "select": cmd_select, "infer": cmd_infer,
    "eval": cmd_eval,
}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_INVALID
    except SystemExit as exc:      # --help
        return EXIT_OK if not exc.code else EXIT_INVALID
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args)
        COMMANDS[args.cmd](cfg, args)
    except VALIDATION_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:
        print(f"failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
