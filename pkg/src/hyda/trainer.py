"""Fold training, evaluation, cross-validation, ablations, sweeps, checkpoints and reports."""
from __future__ import annotations

import csv
import io
import json
import logging
import zipfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .cohort import CohortDataset, CohortScaler, kfold_split, normalize
from .config import ABLATIONS, RunConfig
from .errors import ConfigError, FormatError
from .estimator import HyDAClassifier
from .metrics import METRICS, compute_metrics
from .model import HyDANet

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = "HYDA-CKPT1"
GENERATOR_NOTE = ("per-generator stored weights are (C/27)*C_hid + C_out; the product C*C_hid + C_out "
                  "(~0.3M at C=864, C_hid=384, C_out=128) counts the full tap width and is not the "
                  "stored generator size")

# reported clinical-cohort values for the full adapter (ablation row #4); reference only
ABLATION_REFERENCE = {"full_hyda": {"ACC": 88.09, "F1": 70.23, "SPE": 96.43, "SEN": 62.12}}


def positive_class(labels) -> int:
    """Minority class (ties go to the higher index)."""
    counts = np.bincount(np.asarray(labels, dtype=np.int64))
    return int(len(counts) - 1 - np.argmin(counts[::-1]))


def prepare(config: RunConfig, dataset: CohortDataset) -> CohortDataset:
    if config.modalities:
        dataset = dataset.select_modalities(config.modalities)
    return dataset


# --- checkpoints -------------------------------------------------------------------------

@dataclass
class Checkpoint:
    config: RunConfig
    layout: tuple
    num_classes: int
    params: dict
    epoch: int = 0
    optimizer: dict | None = None
    scaler: dict | None = None
    positive_class: int = 1
    seed: int = 0

    @property
    def fingerprint(self):
        return self.config.fingerprint

    def classifier(self) -> HyDAClassifier:
        clf = HyDAClassifier.from_config(self.config, self.layout, self.num_classes, seed=self.seed)
        clf.n_classes_ = self.num_classes
        clf.classes_ = np.arange(self.num_classes)
        clf.net_ = HyDANet(clf.run_config(), self.layout, self.num_classes, seed=self.seed)
        clf.net_.params.load_state_dict(self.params)
        return clf

    def scaler_obj(self):
        if self.scaler is None:
            return None
        return CohortScaler.from_arrays(self.layout, self.scaler["data_min"], self.scaler["data_max"])


def checkpoint_from(clf: HyDAClassifier, config: RunConfig, scaler=None, pos=1) -> Checkpoint:
    return Checkpoint(config=config, layout=tuple(clf.layout), num_classes=clf.n_classes_,
                      params=clf.net_.params.state_dict(), epoch=int(clf.best_epoch_),
                      optimizer=clf.optimizer_.state_dict() if hasattr(clf, "optimizer_") else None,
                      scaler=scaler, positive_class=pos, seed=clf.seed)


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    arrays = {f"param/{k}": v for k, v in ckpt.params.items()}
    if ckpt.optimizer is not None:
        arrays.update({f"adam_m/{k}": v for k, v in ckpt.optimizer["m"].items()})
        arrays.update({f"adam_v/{k}": v for k, v in ckpt.optimizer["v"].items()})
    meta = {
        "format": CHECKPOINT_VERSION,
        "fingerprint": ckpt.fingerprint,
        "config": ckpt.config.to_dict(),
        "layout": [m.to_json() for m in ckpt.layout],
        "num_classes": ckpt.num_classes,
        "epoch": ckpt.epoch,
        "seed": ckpt.seed,
        "positive_class": ckpt.positive_class,
        "scaler": ckpt.scaler,
        "adam_t": ckpt.optimizer["t"] if ckpt.optimizer is not None else None,
        "params": list(ckpt.params),
    }
    arrays["meta"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path, expect_fingerprint: str | None = None) -> Checkpoint:
    from .cohort import ModalitySpec

    try:
        with np.load(path, allow_pickle=False) as z:
            arrays = {k: z[k] for k in z.files}
    except FileNotFoundError:
        raise FormatError(f"checkpoint {path} not found") from None
    except (zipfile.BadZipFile, ValueError, OSError, EOFError) as e:
        raise FormatError(f"checkpoint {path} is corrupt: {e}") from None
    if "meta" not in arrays:
        raise FormatError("checkpoint has no 'meta' entry")
    try:
        meta = json.loads(arrays["meta"].tobytes().decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"checkpoint metadata unreadable: {e}") from None
    if meta.get("format") != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint format {meta.get('format')!r}")
    config = RunConfig.from_dict(meta["config"])
    if config.fingerprint != meta["fingerprint"]:
        raise FormatError("checkpoint fingerprint does not match its stored config")
    if expect_fingerprint is not None and expect_fingerprint != meta["fingerprint"]:
        raise ConfigError(f"checkpoint fingerprint {meta['fingerprint']} != expected {expect_fingerprint}")
    params = {}
    for name in meta["params"]:
        key = f"param/{name}"
        if key not in arrays:
            raise FormatError(f"checkpoint is missing tensor entry {name!r}")
        params[name] = arrays[key].astype(np.float64)
    optimizer = None
    if meta.get("adam_t") is not None:
        try:
            optimizer = {"m": {n: arrays[f"adam_m/{n}"] for n in meta["params"]},
                         "v": {n: arrays[f"adam_v/{n}"] for n in meta["params"]},
                         "t": meta["adam_t"]}
        except KeyError as e:
            raise FormatError(f"checkpoint is missing optimizer entry {e.args[0]!r}") from None
    layout = tuple(ModalitySpec.from_json(d) for d in meta["layout"])
    ckpt = Checkpoint(config, layout, int(meta["num_classes"]), params, int(meta["epoch"]), optimizer,
                      meta.get("scaler"), int(meta.get("positive_class", 1)), int(meta.get("seed", 0)))
    # validates names and shapes against a freshly built network
    ckpt.classifier()
    return ckpt


# --- training / evaluation -------------------------------------------------------------

@dataclass
class FoldResult:
    fold_index: int
    metrics: dict
    checkpoint: Checkpoint
    history: dict
    best_epoch: int
    val_ids: tuple
    predictions: np.ndarray = field(repr=False, default=None)


def train_fold(config: RunConfig, dataset: CohortDataset, split, seed: int | None = None) -> FoldResult:
    """Normalize on the training ids, fit with best-validation selection, score the validation ids."""
    config.validate()
    dataset = prepare(config, dataset)
    seed = config.seed + split.fold_index if seed is None else seed
    normed, scaler = normalize(dataset, split.train_ids)
    tr, va = normed.subset(split.train_ids), normed.subset(split.val_ids)
    X_tr, y_tr = tr.to_matrix()
    X_va, y_va = va.to_matrix()
    clf = HyDAClassifier.from_config(config, dataset.modalities, dataset.num_classes, seed=seed)
    clf.fit(X_tr, y_tr, eval_set=(X_va, y_va))
    pos = positive_class(dataset.labels)
    p = clf.predict_proba(X_va)
    metrics = compute_metrics(p, y_va, pos)
    ckpt = checkpoint_from(clf, config, scaler.to_dict(), pos)
    log.info("fold %d: %s (best epoch %d)", split.fold_index, metrics, clf.best_epoch_)
    return FoldResult(split.fold_index, metrics, ckpt, clf.history_, clf.best_epoch_, tuple(split.val_ids), p)


def evaluate(ckpt: Checkpoint, dataset: CohortDataset, ids) -> tuple:
    """Metrics and per-subject probabilities of a checkpoint on ``ids`` (hypergraph over those ids)."""
    names = [m.name for m in ckpt.layout]
    have = {m.name: m for m in dataset.modalities}
    if any(n not in have or have[n] != m for n, m in zip(names, ckpt.layout)):
        raise ConfigError(f"checkpoint modalities {names} do not match dataset {list(have)}")
    sub = dataset.select_modalities(names).subset(ids)
    X, y = sub.to_matrix()
    scaler = ckpt.scaler_obj()
    if scaler is not None:
        X = scaler.transform(X)
    pred = ckpt.classifier().predict_heads(X)
    return compute_metrics(pred.p_final, y, ckpt.positive_class), pred


def _summary(rows):
    mean, std = {}, {}
    for key in METRICS:
        vals = [r[key] for r in rows if r.get(key) is not None]
        mean[key] = float(np.mean(vals)) if vals else None
        std[key] = float(np.std(vals)) if vals else None
    return mean, std


def _jsonable(metrics):
    return {k: (None if v is None else float(v)) for k, v in metrics.items()}


def param_report(config: RunConfig, dataset: CohortDataset) -> dict:
    net = HyDANet(config, dataset.modalities, dataset.num_classes, seed=config.seed)
    counts = net.param_counts()
    if "kernel_generator_weights" in counts:
        counts["kernel_generator_note"] = GENERATOR_NOTE
    return counts


def cross_validate(config: RunConfig, dataset: CohortDataset, out_dir=None, tag=None) -> dict:
    """Stratified k-fold run; fold i trains with seed ``config.seed + i``."""
    config.validate()
    data = prepare(config, dataset)
    splits = kfold_split(data.labels, config.folds, config.seed, data.ids)
    rows, folds = [], []
    for split in splits:
        res = train_fold(config, data, split)
        row = {"fold": split.fold_index, **_jsonable(res.metrics)}
        rows.append(row)
        folds.append({**row, "best_epoch": int(res.best_epoch), "seed": config.seed + split.fold_index,
                      "train_loss": res.history["train_loss"], "val_loss": res.history["val_loss"],
                      "scaler": res.checkpoint.scaler})
        if out_dir is not None:
            fold_dir = Path(out_dir) / f"fold{split.fold_index}"
            fold_dir.mkdir(parents=True, exist_ok=True)
            save_checkpoint(res.checkpoint, fold_dir / "checkpoint.npz")
            write_predictions(fold_dir / "predictions.csv", res.val_ids, res.predictions,
                               data.subset(res.val_ids).labels)
    mean, std = _summary(rows)
    report = {
        "tag": tag,
        "config": config.to_dict(),
        "fingerprint": config.fingerprint,
        "seed": config.seed,
        "modalities": [m.name for m in data.modalities],
        "folds": folds,
        "mean": mean,
        "std": std,
        "param_counts": param_report(config, data),
    }
    if out_dir is not None:
        write_report(report, out_dir)
    return report


def write_predictions(path, ids, probs, labels):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "label"] + [f"p{k}" for k in range(probs.shape[1])])
        for sid, y, p in zip(ids, labels, probs):
            w.writerow([sid, int(y)] + [repr(float(v)) for v in p])


def metrics_csv(report: dict) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["row"] + list(METRICS))
    fmt = lambda v: "" if v is None else repr(float(v))  # noqa: E731
    for f in report["folds"]:
        w.writerow([f"fold{f['fold']}"] + [fmt(f[m]) for m in METRICS])
    w.writerow(["mean"] + [fmt(report["mean"][m]) for m in METRICS])
    w.writerow(["std"] + [fmt(report["std"][m]) for m in METRICS])
    return buf.getvalue()


def write_report(report: dict, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.json").write_text(json.dumps(report, indent=1, sort_keys=True), encoding="utf-8")
    (out / "metrics.csv").write_text(metrics_csv(report), encoding="utf-8")


# --- experiment runners ------------------------------------------------------------------

def run_ablation(config: RunConfig, dataset: CohortDataset, out_dir=None) -> dict:
    """The four ablation rows on shared folds and seeds."""
    rows = []
    for i, ablation in enumerate(ABLATIONS, start=1):
        sub_dir = None if out_dir is None else Path(out_dir) / ablation
        rep = cross_validate(config.replace(ablation=ablation), dataset, sub_dir, tag=ablation)
        rows.append({"row": i, "ablation": ablation, "mean": rep["mean"], "std": rep["std"]})
    report = {"config": config.to_dict(), "rows": rows, "reference": ABLATION_REFERENCE,
              "reference_note": "clinical-cohort values; not an expected output on synthetic data"}
    if out_dir is not None:
        _write_table(report["rows"], "ablation", Path(out_dir))
        (Path(out_dir) / "ablation.json").write_text(json.dumps(report, indent=1, sort_keys=True),
                                                     encoding="utf-8")
    return report


def _write_table(rows, key, out: Path):
    out.mkdir(parents=True, exist_ok=True)
    with open(out / f"{key}.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([key] + [f"{m}_mean" for m in METRICS] + [f"{m}_std" for m in METRICS])
        for r in rows:
            w.writerow([r[key]] + [r["mean"][m] for m in METRICS] + [r["std"][m] for m in METRICS])


def _write_plot_data(rows, key, out: Path):
    for m in METRICS:
        with open(out / f"plot_{m}.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow([key, "mean", "std"])
            for r in rows:
                w.writerow([r[key], r["mean"][m], r["std"][m]])


def sweep_k(config: RunConfig, dataset: CohortDataset, k_values, out_dir=None) -> dict:
    k_values = [int(k) for k in k_values]
    bad = [k for k in k_values if k > config.batch_size]
    if bad:
        raise ConfigError(f"k values {bad} exceed batch_size={config.batch_size}")
    rows = []
    for k in k_values:
        sub_dir = None if out_dir is None else Path(out_dir) / f"k{k}"
        rep = cross_validate(config.replace(k=k), dataset, sub_dir, tag=f"k={k}")
        rows.append({"k": k, "mean": rep["mean"], "std": rep["std"]})
    report = {"config": config.to_dict(), "rows": rows}
    if out_dir is not None:
        _write_table(rows, "k", Path(out_dir))
        _write_plot_data(rows, "k", Path(out_dir))
        (Path(out_dir) / "sweep.json").write_text(json.dumps(report, indent=1, sort_keys=True), encoding="utf-8")
    return report


def parse_subsets(spec: str) -> list:
    """``"mri;mri,pet;all"`` -> [["mri"], ["mri", "pet"], None]."""
    out = []
    for group in spec.split(";"):
        group = group.strip()
        if not group:
            continue
        out.append(None if group == "all" else [s.strip() for s in group.split(",") if s.strip()])
    if not out:
        raise ConfigError(f"empty modality subset spec {spec!r}")
    return out


def sweep_modalities(config: RunConfig, dataset: CohortDataset, subsets, out_dir=None) -> dict:
    rows = []
    for subset in subsets:
        names = [m.name for m in dataset.modalities] if subset is None else list(subset)
        label = "+".join(names)
        sub_dir = None if out_dir is None else Path(out_dir) / label
        rep = cross_validate(config.replace(modalities=tuple(names)), dataset, sub_dir, tag=label)
        rows.append({"subset": label, "mean": rep["mean"], "std": rep["std"]})
    report = {"config": config.to_dict(), "rows": rows}
    if out_dir is not None:
        _write_table(rows, "subset", Path(out_dir))
        _write_plot_data(rows, "subset", Path(out_dir))
        (Path(out_dir) / "sweep.json").write_text(json.dumps(report, indent=1, sort_keys=True), encoding="utf-8")
    return report


def collect_reports(runs_dir) -> list:
    """Every ``metrics.json`` under ``runs_dir`` as (relative run name, report)."""
    root = Path(runs_dir)
    found = []
    for path in sorted(root.rglob("metrics.json")):
        try:
            rep = json.loads(path.read_text(encoding="utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise FormatError(f"{path}: unreadable report: {e}") from None
        found.append((str(path.parent.relative_to(root)) or ".", rep))
    return found


def summarize_runs(runs_dir, fmt="csv") -> str:
    reports = collect_reports(runs_dir)
    if fmt == "json":
        return json.dumps({name: {"mean": r.get("mean"), "std": r.get("std"), "folds": r.get("folds")}
                           for name, r in reports}, indent=1, sort_keys=True)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["run", "row"] + list(METRICS))
    for name, rep in reports:
        for f in rep.get("folds", []):
            w.writerow([name, f"fold{f.get('fold')}"] + [f.get(m) for m in METRICS])
        for row in ("mean", "std"):
            w.writerow([name, row] + [(rep.get(row) or {}).get(m) for m in METRICS])
    return buf.getvalue()
