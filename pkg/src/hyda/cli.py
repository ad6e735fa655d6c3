"""Command-line entry point: ``hyda <command> ...``.

Exit codes: 0 success, 2 configuration error, 3 data/format error, 4 numeric error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .cohort import SynthSpec, kfold_split, load_cohort, save_cohort, synth_cohort
from .config import load_config
from .errors import ConfigError, FormatError, HydaError, NumericError
from .trainer import (GENERATOR_NOTE, cross_validate, evaluate, load_checkpoint, parse_subsets, prepare,
                      run_ablation, save_checkpoint, summarize_runs, sweep_k, sweep_modalities, train_fold,
                      write_predictions, write_report)

log = logging.getLogger("hyda")

GRADCHECK_TOL = 1e-4


def _bool(text):
    t = text.strip().lower()
    if t in ("1", "true", "yes", "y", "on"):
        return True
    if t in ("0", "false", "no", "n", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def _dims(text):
    try:
        dims = tuple(int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected CxDxHxW, got {text!r}") from None
    if len(dims) != 4 or min(dims) < 1:
        raise argparse.ArgumentTypeError(f"expected four positive extents CxDxHxW, got {text!r}")
    return dims


def _int_list(text):
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hyda", description="Hypergraph dynamic adapter experiments")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic multi-modal cohort")
    s.add_argument("--subjects", type=int, required=True)
    s.add_argument("--imaging", type=int, required=True)
    s.add_argument("--tabular", type=_bool, required=True)
    s.add_argument("--emb-dim", type=int, required=True)
    s.add_argument("--map-dims", type=_dims, required=True)
    s.add_argument("--classes", type=int, required=True)
    s.add_argument("--imbalance", type=float, required=True)
    s.add_argument("--complementarity", type=float, required=True)
    s.add_argument("--noise", type=float, required=True)
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--out", required=True)

    def data_cmd(name, help):
        c = sub.add_parser(name, help=help)
        c.add_argument("--data", required=True)
        c.add_argument("--config", required=True)
        c.add_argument("--out", required=True)
        return c

    data_cmd("train", "train one fold").add_argument("--fold", type=int, default=0)
    data_cmd("cv", "k-fold cross-validation")
    data_cmd("ablation", "the four ablation rows")
    data_cmd("sweep-k", "cross-validate over hyperedge sizes").add_argument("--values", type=_int_list,
                                                                          required=True)
    data_cmd("sweep-modalities", "cross-validate over modality subsets").add_argument("--subsets",
                                                                                    required=True)

    e = sub.add_parser("eval", help="evaluate a checkpoint on listed subject ids")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--ids", required=True, help="text file with one subject id per line")
    e.add_argument("--out", required=True)

    g = sub.add_parser("gradcheck", help="finite-difference check of every trainable tensor")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--scale", choices=("desk", "paper-shapes"), default="desk")

    r = sub.add_parser("report", help="tabulate metrics.json files under a directory")
    r.add_argument("--runs", required=True)
    r.add_argument("--format", choices=("csv", "json"), default="csv")
    return p


# --- commands --------------------------------------------------------------------------

def cmd_synth(a):
    spec = SynthSpec(N=a.subjects, M_imaging=a.imaging, has_tabular=a.tabular, E_m=a.emb_dim,
                     map_dims=a.map_dims, K=a.classes, imbalance_ratio=a.imbalance,
                     complementarity=a.complementarity, noise_sigma=a.noise)
    data = synth_cohort(spec, a.seed)
    save_cohort(data, a.out)
    print(f"wrote {data.N} subjects, modalities {[m.name for m in data.modalities]} to {a.out}")


def cmd_train(a):
    config, data = load_config(a.config), load_cohort(a.data)
    data = prepare(config, data)
    splits = kfold_split(data.labels, config.folds, config.seed, data.ids)
    if not 0 <= a.fold < len(splits):
        raise ConfigError(f"--fold {a.fold} outside [0, {len(splits)})")
    res = train_fold(config, data, splits[a.fold])
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(res.checkpoint, out / "checkpoint.npz")
    write_predictions(out / "predictions.csv", res.val_ids, res.predictions, data.subset(res.val_ids).labels)
    row = {"fold": a.fold, **{k: (None if v is None else float(v)) for k, v in res.metrics.items()}}
    report = {"config": config.to_dict(), "fingerprint": config.fingerprint, "seed": config.seed,
              "folds": [{**row, "best_epoch": res.best_epoch, "seed": config.seed + a.fold,
                         "train_loss": res.history["train_loss"], "val_loss": res.history["val_loss"]}],
              "mean": {k: v for k, v in row.items() if k != "fold"},
              "std": {k: (None if v is None else 0.0) for k, v in row.items() if k != "fold"},
              "modalities": [m.name for m in data.modalities]}
    write_report(report, out)
    print(json.dumps(report["mean"], sort_keys=True))


def _print_means(report):
    print(json.dumps(report["mean"], sort_keys=True))


def cmd_cv(a):
    rep = cross_validate(load_config(a.config), load_cohort(a.data), a.out)
    _print_means(rep)
    counts = rep["param_counts"]
    if "kernel_generator_weights" in counts:
        print(f"kernel generator weights per generator: {counts['kernel_generator_weights']:,}")


def cmd_ablation(a):
    rep = run_ablation(load_config(a.config), load_cohort(a.data), a.out)
    for row in rep["rows"]:
        print(f"#{row['row']} {row['ablation']:<10} " + json.dumps(row["mean"], sort_keys=True))


def cmd_sweep_k(a):
    rep = sweep_k(load_config(a.config), load_cohort(a.data), a.values, a.out)
    for row in rep["rows"]:
        print(f"k={row['k']:<4} " + json.dumps(row["mean"], sort_keys=True))


def cmd_sweep_modalities(a):
    rep = sweep_modalities(load_config(a.config), load_cohort(a.data), parse_subsets(a.subsets), a.out)
    for row in rep["rows"]:
        print(f"{row['subset']:<24} " + json.dumps(row["mean"], sort_keys=True))


def cmd_eval(a):
    ckpt = load_checkpoint(a.checkpoint)
    data = load_cohort(a.data)
    try:
        ids = [ln.strip() for ln in Path(a.ids).read_text(encoding="utf-8").splitlines() if ln.strip()]
    except (FileNotFoundError, UnicodeDecodeError) as e:
        raise FormatError(f"cannot read id list {a.ids}: {e}") from None
    metrics, pred = evaluate(ckpt, data, ids)
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    write_predictions(out / "predictions.csv", ids, pred.p_final, data.subset(ids).labels)
    (out / "metrics.json").write_text(json.dumps({"fingerprint": ckpt.fingerprint, "ids": len(ids),
                                                  "metrics": metrics}, indent=1, sort_keys=True),
                                      encoding="utf-8")
    print(json.dumps(metrics, sort_keys=True))


def cmd_gradcheck(a):
    from .gradcheck import full_size_report, run_gradcheck

    if a.scale == "paper-shapes":
        r = full_size_report()
        print(f"C={r['C']} C_hid={r['C_hid']} C_out={r['C_out']} kernel shape {tuple(r['kernel_shape'])}")
        print(f"kernel generator weights per generator: {r['kernel_generator_weights']:,}")
        print(f"note: {GENERATOR_NOTE}; C*C_hid + C_out = {r['full_tap_product']:,}")
        return
    r = run_gradcheck(a.seed)
    for name, err in r["per_param"].items():
        print(f"{name:<16} {err:.3e}")
    print(f"max relative error {r['max_rel_error']:.3e} over {len(r['per_param'])} tensors "
          f"({r['num_params']:,} parameters) in {r['seconds']:.1f}s")
    print(f"kernel generator weights per generator: {r['kernel_generator_weights']:,}")
    if r["max_rel_error"] >= GRADCHECK_TOL:
        raise NumericError(f"gradient check failed: {r['max_rel_error']:.3e} >= {GRADCHECK_TOL}")


def cmd_report(a):
    if not Path(a.runs).is_dir():
        raise FormatError(f"runs directory {a.runs} not found")
    sys.stdout.write(summarize_runs(a.runs, a.format))
    if a.format == "json":
        sys.stdout.write("\n")


COMMANDS = {
    "synth": cmd_synth, "train": cmd_train, "cv": cmd_cv, "ablation": cmd_ablation,
    "sweep-k": cmd_sweep_k, "sweep-modalities": cmd_sweep_modalities, "eval": cmd_eval,
    "gradcheck": cmd_gradcheck, "report": cmd_report,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        COMMANDS[args.command](args)
    except HydaError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
