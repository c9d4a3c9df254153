"""Experiment configuration, bit-width sweeps and result tables."""

from __future__ import annotations

import csv
import dataclasses
import io
import logging
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np
import yaml

from qbnn import metrics
from qbnn.bayes import METHODS, MODES, predictive
from qbnn.data import (
    AUGMENTATIONS,
    Dataset,
    Split,
    augment,
    load_csv_regression,
    load_idx_images,
    synthetic_dataset,
)
from qbnn.tensor import SeededRng
from qbnn.training import ConfigError, JsonlLog, QatConfig, TrainConfig, qat_finetune, train_model

log = logging.getLogger(__name__)

CSV_COLUMNS = ("method", "mode", "bits_w", "bits_a", "seed", "dataset", "split", "metric", "value")
FLOAT_BITS = 32


# -- configuration ----------------------------------------------------------------

@dataclass
class AugmentSpec:
    kind: str
    strength: float

    def __post_init__(self):
        if self.kind not in AUGMENTATIONS:
            raise ConfigError(f"unknown augmentation {self.kind!r}")

    @property
    def name(self) -> str:
        return f"{self.kind}={self.strength:g}"


@dataclass
class DatasetSpec:
    source: str = "synthetic"  # synthetic | csv | idx
    name: str | None = None
    path: str | None = None
    images: str | None = None
    labels: str | None = None
    test_images: str | None = None
    test_labels: str | None = None
    n_train: int = 800
    n_val: int = 200
    n_test: int = 1000
    fractions: list = field(default_factory=lambda: [0.8, 0.1, 0.1])
    split_seed: int = 0
    augmentations: list = field(default_factory=list)
    confusion: dict | None = None

    def __post_init__(self):
        if self.source not in ("synthetic", "csv", "idx"):
            raise ConfigError(f"unknown dataset source {self.source!r}")
        if self.source == "csv" and not self.path:
            raise ConfigError("csv datasets need 'path'")
        if self.source == "idx" and not (self.images and self.labels):
            raise ConfigError("idx datasets need 'images' and 'labels'")
        self.augmentations = [a if isinstance(a, AugmentSpec) else _build(AugmentSpec, a, "augmentation")
                              for a in self.augmentations]
        if self.confusion is not None:
            allowed = {"images", "labels", "kind", "strength"}
            extra = set(self.confusion) - allowed
            if extra:
                raise ConfigError(f"unknown keys in dataset.confusion: {sorted(extra)}")
            if not ({"images", "labels"} <= set(self.confusion) or {"kind", "strength"} <= set(self.confusion)):
                raise ConfigError("dataset.confusion needs either images+labels or kind+strength")

    @property
    def label(self) -> str:
        if self.name:
            return self.name
        if self.source == "csv":
            return Path(self.path).stem
        return "mnist" if self.source == "idx" else "synthetic"


@dataclass
class QatSection:
    epochs: int = 5
    lr_factor: float = 0.01
    observer_momentum: float = 0.01


@dataclass
class SweepSection:
    bits_w: list = field(default_factory=lambda: [8])
    bits_a: list = field(default_factory=lambda: [7])
    overflow_guard: bool = True

    def cells(self) -> list[tuple[int, int]]:
        out = []
        for bw in self.bits_w:
            for ba in self.bits_a:
                if self.overflow_guard and ba > bw - 1:
                    log.info("skipping W%d/A%d: activations must be at least one bit below weights", bw, ba)
                    continue
                out.append((int(bw), int(ba)))
        if not self.overflow_guard:
            warnings.warn("overflow guard disabled: activation bit-widths may overflow 32-bit accumulators",
                          stacklevel=2)
        return out


@dataclass
class ExperimentConfig:
    task: str = "regression"
    methods: list = field(default_factory=lambda: ["pointwise", "mcd", "bbb", "sghmc"])
    hidden: list = field(default_factory=lambda: [100, 100, 100])
    drop_p: float = 0.1
    seeds: list = field(default_factory=lambda: [0, 1, 2])
    samples: int = 20
    modes: list = field(default_factory=lambda: list(MODES))
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    qat: QatSection = field(default_factory=QatSection)
    sweep: SweepSection = field(default_factory=SweepSection)

    def __post_init__(self):
        if self.task not in ("regression", "classification"):
            raise ConfigError(f"unknown task {self.task!r}")
        for m in self.methods:
            if m not in METHODS:
                raise ConfigError(f"unknown method {m!r}")
        for m in self.modes:
            if m not in MODES:
                raise ConfigError(f"unknown mode {m!r}")
        if self.samples < 1:
            raise ConfigError("samples must be >= 1")
        for bw in self.sweep.bits_w:
            if not 3 <= bw <= 8:
                raise ConfigError(f"weight bit-width {bw} outside [3, 8]")
        for ba in self.sweep.bits_a:
            if not 3 <= ba <= 7:
                raise ConfigError(f"activation bit-width {ba} outside [3, 7]")

    def qat_config(self, bits_w: int, bits_a: int) -> QatConfig:
        return QatConfig(self.qat.epochs, self.qat.lr_factor, self.qat.observer_momentum, bits_w, bits_a)


def _build(cls, data, where: str):
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise ConfigError(f"section {where!r} must be a mapping")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {sorted(unknown)}")
    return cls(**data)


def config_from_dict(data: dict) -> ExperimentConfig:
    data = dict(data or {})
    sections = {"dataset": DatasetSpec, "train": TrainConfig, "qat": QatSection, "sweep": SweepSection}
    for key, cls in sections.items():
        if key in data:
            data[key] = _build(cls, data[key], key)
    return _build(ExperimentConfig, data, "config")


def load_config(path) -> ExperimentConfig:
    with open(path) as fh:
        return config_from_dict(yaml.safe_load(fh))


# -- data -------------------------------------------------------------------------

def _flatten(images):
    return images.reshape(images.shape[0], -1)


def load_dataset(dcfg: DatasetSpec, task: str) -> Dataset:
    if dcfg.source == "synthetic":
        return synthetic_dataset(dcfg.n_train, dcfg.n_val, dcfg.n_test, dcfg.split_seed)
    if dcfg.source == "csv":
        return load_csv_regression(dcfg.path, dcfg.fractions, dcfg.split_seed)
    images, onehot = load_idx_images(dcfg.images, dcfg.labels)
    rng = SeededRng(dcfg.split_seed)
    order = rng.permutation(images.shape[0])
    if dcfg.test_images:
        test_x, test_y = load_idx_images(dcfg.test_images, dcfg.test_labels)
        test_x, test_y = test_x[:dcfg.n_test], test_y[:dcfg.n_test]
        train_idx = order[:dcfg.n_train]
        val_idx = order[dcfg.n_train:dcfg.n_train + dcfg.n_val]
    else:
        train_idx = order[:dcfg.n_train]
        val_idx = order[dcfg.n_train:dcfg.n_train + dcfg.n_val]
        test_idx = order[dcfg.n_train + dcfg.n_val:dcfg.n_train + dcfg.n_val + dcfg.n_test]
        test_x, test_y = images[test_idx], onehot[test_idx]
    ds = Dataset(Split(_flatten(images[train_idx]), onehot[train_idx]),
                 Split(_flatten(images[val_idx]), onehot[val_idx]),
                 Split(_flatten(test_x), test_y))
    ds.extra["test_images"] = test_x
    return ds


def evaluation_sets(ds: Dataset, dcfg: DatasetSpec) -> list[tuple[str, np.ndarray, np.ndarray | None]]:
    """(split name, inputs, targets or None) for test, augmented and confusion sets."""
    sets = [("test", ds.test.x, ds.test.y)]
    if "test_clean" in ds.extra:
        # synthetic data: the same inputs scored against noise-free targets
        sets.append(("clean", ds.test.x, ds.extra["test_clean"]))
    imgs = ds.extra.get("test_images")
    for a in dcfg.augmentations:
        if imgs is None:
            raise ConfigError("augmentations need an image dataset")
        sets.append((f"test:{a.name}", _flatten(augment(imgs, a.kind, a.strength)), ds.test.y))
    conf = dcfg.confusion
    if conf:
        if "images" in conf:
            cx, _ = load_idx_images(conf["images"], conf["labels"])
            sets.append(("confusion", _flatten(cx), None))
        else:
            if imgs is None:
                raise ConfigError("an augmentation confusion set needs an image dataset")
            sets.append(("confusion", _flatten(augment(imgs, conf["kind"], conf["strength"])), None))
    return sets


# -- results ----------------------------------------------------------------------

@dataclass(frozen=True)
class ResultRow:
    method: str
    mode: str
    bits_w: int
    bits_a: int
    seed: int
    dataset: str
    split: str
    metric: str
    value: float


def format_value(v: float) -> str:
    return format(float(v), ".9g")


def emit_csv(rows, path) -> None:
    """Write rows with a fixed column order and 9 significant digits."""
    with open(path, "w", newline="") as fh:
        write_rows(rows, fh)


def write_rows(rows, fh) -> None:
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in rows:
        w.writerow([r.method, r.mode, r.bits_w, r.bits_a, r.seed, r.dataset, r.split, r.metric,
                    format_value(r.value)])
        fh.flush()


def read_csv(path) -> list[ResultRow]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != CSV_COLUMNS:
            raise ValueError(f"{path}: unexpected header {reader.fieldnames}")
        return [ResultRow(r["method"], r["mode"], int(r["bits_w"]), int(r["bits_a"]), int(r["seed"]),
                          r["dataset"], r["split"], r["metric"], float(r["value"])) for r in reader]


# -- evaluation -------------------------------------------------------------------

def evaluate(model, sets, cfg: ExperimentConfig, ds: Dataset, mode: str, rng: SeededRng):
    """Yield (split, metric, value) for every evaluation set."""
    for split, x, y in sets:
        summary = predictive(model, x, cfg.samples, rng, mode)
        if cfg.task == "regression":
            mean, var = summary.mean, summary.variance
            var = var + cfg.train.noise_std**2
            if ds.y_std is not None:
                mean = mean * ds.y_std + ds.y_mean
                var = var * ds.y_std**2
                y = y * ds.y_std + ds.y_mean
            report = metrics.regression_report(mean, var, y)
        else:
            report = metrics.classification_report(summary.mean, y)
        for name, value in report.items():
            yield split, name, value


def _sizes(cfg: ExperimentConfig, ds: Dataset) -> list[int]:
    return [ds.train.x.shape[1], *cfg.hidden, ds.train.y.shape[1]]


def train_for(cfg: ExperimentConfig, ds: Dataset, method: str, seed: int, logger: JsonlLog | None = None):
    return train_model(method, _sizes(cfg, ds), ds.train.x, ds.train.y, cfg.train, seed,
                       task=cfg.task, drop_p=cfg.drop_p, logger=logger)


def quantise_for(cfg: ExperimentConfig, ds: Dataset, model, seed: int, bits_w: int, bits_a: int,
                 logger: JsonlLog | None = None):
    rng = SeededRng(seed).child(bits_w, bits_a)
    return qat_finetune(model, ds.train.x, ds.train.y, cfg.qat_config(bits_w, bits_a), cfg.train, rng, logger)


def eval_rng(seed: int) -> SeededRng:
    # identical draws across modes and bit-widths for a given seed
    return SeededRng(seed).child(0xE7A1)


def run_sweep(cfg: ExperimentConfig, ds: Dataset | None = None, logger: JsonlLog | None = None
              ) -> Iterator[ResultRow]:
    """Train, quantise and evaluate every (method, seed, bit-width) cell, yielding rows as they finish."""
    ds = ds if ds is not None else load_dataset(cfg.dataset, cfg.task)
    sets = evaluation_sets(ds, cfg.dataset)
    name = cfg.dataset.label
    cells = cfg.sweep.cells()
    quant_modes = [m for m in cfg.modes if m != "float"]
    for method in cfg.methods:
        for seed in cfg.seeds:
            try:
                model = train_for(cfg, ds, method, seed, logger)
            except Exception as exc:  # recorded per row so the sweep keeps going
                log.error("training %s seed %d failed: %s", method, seed, exc)
                yield ResultRow(method, "float", FLOAT_BITS, FLOAT_BITS, seed, name, "train", "failed", math.nan)
                continue
            if "float" in cfg.modes:
                for split, metric, value in evaluate(model, sets, cfg, ds, "float", eval_rng(seed)):
                    yield ResultRow(method, "float", FLOAT_BITS, FLOAT_BITS, seed, name, split, metric, value)
            for bw, ba in cells:
                if not quant_modes:
                    break
                try:
                    qmodel = quantise_for(cfg, ds, model, seed, bw, ba, logger)
                    for mode in quant_modes:
                        for split, metric, value in evaluate(qmodel, sets, cfg, ds, mode, eval_rng(seed)):
                            yield ResultRow(method, mode, bw, ba, seed, name, split, metric, value)
                except Exception as exc:
                    log.error("%s seed %d W%d/A%d failed: %s", method, seed, bw, ba, exc)
                    yield ResultRow(method, "simulated", bw, ba, seed, name, "test", "failed", math.nan)


# -- figure tables ----------------------------------------------------------------

PLOT_COLUMNS = ("figure", "varied", "bits", "method", "mode", "split", "metric", "seed", "value")


def plot_tables(rows: list[ResultRow]) -> dict[str, list[tuple]]:
    """Long-format tables behind the bit-width and augmentation figures.

    ``activation``: weights fixed at the widest swept width, activations varied.
    ``weight``: activations fixed at the widest swept width, weights varied.
    ``augmentation``: augmented splits at the widest (W, A) cell plus float.
    Float rows are attached to every table with ``bits = 32``.
    """
    q = [r for r in rows if r.mode != "float" and r.metric != "failed"]
    fl = [r for r in rows if r.mode == "float" and r.metric != "failed"]
    tables: dict[str, list[tuple]] = {"activation": [], "weight": [], "augmentation": []}
    if q:
        top_w = max(r.bits_w for r in q)
        top_a = max(r.bits_a for r in q)
        for r in q:
            if r.split.startswith("test:"):
                if (r.bits_w, r.bits_a) == (top_w, top_a):
                    tables["augmentation"].append(("augmentation", "split", r.bits_a, r.method, r.mode, r.split,
                                                   r.metric, r.seed, r.value))
                continue
            if r.bits_w == top_w:
                tables["activation"].append(("activation", "bits_a", r.bits_a, r.method, r.mode, r.split,
                                             r.metric, r.seed, r.value))
            if r.bits_a == top_a:
                tables["weight"].append(("weight", "bits_w", r.bits_w, r.method, r.mode, r.split,
                                         r.metric, r.seed, r.value))
    for r in fl:
        if r.split.startswith("test:"):
            tables["augmentation"].append(("augmentation", "split", FLOAT_BITS, r.method, r.mode, r.split,
                                           r.metric, r.seed, r.value))
        else:
            for fig, varied in (("activation", "bits_a"), ("weight", "bits_w")):
                tables[fig].append((fig, varied, FLOAT_BITS, r.method, r.mode, r.split, r.metric, r.seed,
                                    r.value))
    return tables


def write_plot_tables(rows: list[ResultRow], out_dir) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for fig, table in plot_tables(rows).items():
        path = out_dir / f"{fig}.csv"
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(PLOT_COLUMNS)
            for row in table:
                w.writerow([*row[:-1], format_value(row[-1])])
        written.append(path)
    return written


def rows_to_text(rows) -> str:
    buf = io.StringIO()
    write_rows(rows, buf)
    return buf.getvalue()

