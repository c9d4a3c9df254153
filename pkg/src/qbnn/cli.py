"""Command-line entry point: ``qbnn {train,qat,eval,sweep,plot-data}``."""

from __future__ import annotations

import argparse
import logging
import sys
from contextlib import nullcontext
from pathlib import Path

from qbnn import harness
from qbnn.bayes import MODES
from qbnn.data import DataError
from qbnn.io import CheckpointError, load_model, save_model
from qbnn.training import ConfigError, JsonlLog


def _config(args) -> harness.ExperimentConfig:
    cfg = harness.load_config(args.config) if args.config else harness.ExperimentConfig()
    if getattr(args, "method", None):
        cfg.methods = [args.method]
    if getattr(args, "seed", None) is not None:
        cfg.seeds = [args.seed]
    if getattr(args, "mode", None):
        cfg.modes = [args.mode]
    if getattr(args, "bits_w", None) is not None:
        cfg.sweep.bits_w = [args.bits_w]
    if getattr(args, "bits_a", None) is not None:
        cfg.sweep.bits_a = [args.bits_a]
    cfg.__post_init__()
    return cfg


def _logger(path):
    return open(path, "w") if path else nullcontext(None)


def cmd_train(args) -> int:
    cfg = _config(args)
    ds = harness.load_dataset(cfg.dataset, cfg.task)
    with _logger(args.log) as fh:
        model = harness.train_for(cfg, ds, cfg.methods[0], cfg.seeds[0], JsonlLog(fh))
    save_model(model, args.out)
    return 0


def cmd_qat(args) -> int:
    cfg = _config(args)
    ds = harness.load_dataset(cfg.dataset, cfg.task)
    model = load_model(args.model)
    bw, ba = cfg.sweep.bits_w[0], cfg.sweep.bits_a[0]
    if cfg.sweep.overflow_guard and ba > bw - 1:
        print(f"error: W{bw}/A{ba} violates the overflow guard (activations must be below weights)",
              file=sys.stderr)
        return 2
    with _logger(args.log) as fh:
        qmodel = harness.quantise_for(cfg, ds, model, cfg.seeds[0], bw, ba, JsonlLog(fh))
    save_model(qmodel, args.out)
    return 0


def cmd_eval(args) -> int:
    cfg = _config(args)
    ds = harness.load_dataset(cfg.dataset, cfg.task)
    model = load_model(args.model)
    method = getattr(model, "method", "sghmc")
    seed = cfg.seeds[0]
    bits = getattr(model, "bits", None) or (model.members[0].bits if hasattr(model, "members") else None)
    rows = []
    sets = harness.evaluation_sets(ds, cfg.dataset)
    for mode in cfg.modes:
        if mode != "float" and not model.finalised:
            continue
        bw, ba = (harness.FLOAT_BITS, harness.FLOAT_BITS) if mode == "float" or bits is None else bits
        for split, metric, value in harness.evaluate(model, sets, cfg, ds, mode, harness.eval_rng(seed)):
            rows.append(harness.ResultRow(method, mode, bw, ba, seed, cfg.dataset.label, split, metric, value))
    _write(rows, args.out)
    return 0


def cmd_sweep(args) -> int:
    cfg = _config(args)
    with _logger(args.log) as fh:
        rows = harness.run_sweep(cfg, logger=JsonlLog(fh))
        _write(rows, args.out)
    return 0


def cmd_plot_data(args) -> int:
    rows = harness.read_csv(args.csv)
    for path in harness.write_plot_tables(rows, args.out):
        print(path)
    return 0


def _write(rows, out) -> None:
    if out:
        harness.emit_csv(rows, out)
    else:
        harness.write_rows(rows, sys.stdout)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="qbnn", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, *, bits=False, mode=False):
        sp.add_argument("--config", help="YAML experiment config")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--method", choices=("pointwise", "mcd", "bbb", "sghmc"))
        if bits:
            sp.add_argument("--bits-w", type=int)
            sp.add_argument("--bits-a", type=int)
        if mode:
            sp.add_argument("--mode", choices=MODES)
        sp.add_argument("--log", help="write line-delimited JSON training records here")

    sp = sub.add_parser("train", help="train a float model and save a checkpoint")
    common(sp)
    sp.add_argument("--out", required=True, help="checkpoint path (.npz)")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("qat", help="quantisation-aware fine-tuning of a checkpoint")
    common(sp, bits=True)
    sp.add_argument("--model", required=True)
    sp.add_argument("--out", required=True, help="quantised checkpoint path (.npz)")
    sp.set_defaults(func=cmd_qat)

    sp = sub.add_parser("eval", help="evaluate a checkpoint and write result rows")
    common(sp, mode=True)
    sp.add_argument("--model", required=True)
    sp.add_argument("--out", help="CSV path; stdout when omitted")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("sweep", help="train, quantise and evaluate across bit-widths")
    common(sp, bits=True, mode=True)
    sp.add_argument("--out", help="CSV path; stdout when omitted")
    sp.set_defaults(func=cmd_sweep)

    sp = sub.add_parser("plot-data", help="split a results CSV into per-figure long tables")
    sp.add_argument("csv", type=Path)
    sp.add_argument("--out", required=True, help="output directory")
    sp.set_defaults(func=cmd_plot_data)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, DataError, CheckpointError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
