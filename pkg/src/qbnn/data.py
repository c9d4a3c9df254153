"""Dataset ingestion, the synthetic regression problem and image augmentations."""

from __future__ import annotations

import csv
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from qbnn.tensor import FLOAT, SeededRng

IDX_IMAGES = 0x00000803
IDX_LABELS = 0x00000801


class DataError(ValueError):
    pass


@dataclass
class Split:
    x: np.ndarray
    y: np.ndarray

    def __len__(self) -> int:
        return self.x.shape[0]


@dataclass
class Dataset:
    train: Split
    val: Split
    test: Split
    x_mean: np.ndarray | None = None
    x_std: np.ndarray | None = None
    y_mean: np.ndarray | None = None
    y_std: np.ndarray | None = None
    extra: dict = field(default_factory=dict)


def split_sizes(n: int, fractions) -> tuple[int, int, int]:
    f_train, f_val, _ = fractions
    n_train = int(round(f_train * n))
    n_val = int(round(f_val * n))
    return n_train, n_val, n - n_train - n_val


def _split_indices(n: int, fractions, seed: int):
    n_train, n_val, _ = split_sizes(n, fractions)
    order = SeededRng(seed).permutation(n)
    return order[:n_train], order[n_train:n_train + n_val], order[n_train + n_val:]


def _zscore(train, *others):
    mean = train.mean(axis=0)
    std = train.std(axis=0)
    std = np.where(std > 0, std, 1.0)
    return mean, std, [((a - mean) / std).astype(FLOAT) for a in (train, *others)]


def read_numeric_csv(path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    rows = []
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        for r, row in enumerate(reader, start=1):
            if not row or all(not c.strip() for c in row):
                continue
            vals = []
            for c, cell in enumerate(row, start=1):
                try:
                    vals.append(float(cell))
                except ValueError:
                    if r == 1 and not rows:
                        vals = None
                        break
                    raise DataError(f"{path}: non-numeric cell {cell!r} at row {r}, column {c}") from None
            if vals is None:
                continue  # header line
            if rows and len(vals) != len(rows[0]):
                raise DataError(f"{path}: row {r} has {len(vals)} columns, expected {len(rows[0])}")
            rows.append(vals)
    if not rows:
        raise DataError(f"{path}: no data rows")
    return np.asarray(rows, dtype=np.float64)


def load_csv_regression(path, fractions=(0.8, 0.1, 0.1), seed: int = 0) -> Dataset:
    """Numeric CSV with the target in the last column, z-scored on the training split."""
    data = read_numeric_csv(path)
    if data.shape[1] < 2:
        raise DataError(f"{path}: need at least one feature column and a target column")
    x, y = data[:, :-1], data[:, -1:]
    tr, va, te = _split_indices(len(data), fractions, seed)
    x_mean, x_std, (xtr, xva, xte) = _zscore(x[tr], x[va], x[te])
    y_mean, y_std, (ytr, yva, yte) = _zscore(y[tr], y[va], y[te])
    return Dataset(Split(xtr, ytr), Split(xva, yva), Split(xte, yte), x_mean, x_std, y_mean, y_std)


def synth_regression(rng: SeededRng, n: int, noise: bool = True):
    """``x ~ U(-2, 2)``, ``y = 2x + 8 + eps`` with ``eps ~ N(0, 1)``.

    Returns ``(x, y, y_clean)`` as (n, 1) float32 arrays.
    """
    if n < 1:
        raise ValueError("need at least one sample")
    g = rng.generator
    x = g.uniform(-2.0, 2.0, size=(n, 1))
    clean = 2.0 * x + 8.0
    eps = g.standard_normal((n, 1))
    y = clean + eps if noise else clean
    return x.astype(FLOAT), y.astype(FLOAT), clean.astype(FLOAT)


def synthetic_dataset(n_train: int, n_val: int, n_test: int, seed: int) -> Dataset:
    """Synthetic splits drawn independently; targets are kept in natural units."""
    rng = SeededRng(seed)
    parts = [synth_regression(r, n) for r, n in zip(rng.spawn(3), (n_train, n_val, n_test))]
    ds = Dataset(*(Split(x, y) for x, y, _ in parts))
    ds.extra["test_clean"] = parts[2][2]
    return ds


# -- IDX (MNIST) -----------------------------------------------------------------

def _read_idx(path, magic: int, ndim: int) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 4 + 4 * ndim:
        raise DataError(f"{path}: truncated IDX header")
    (got,) = struct.unpack(">I", raw[:4])
    if got != magic:
        raise DataError(f"{path}: bad IDX magic 0x{got:08x}, expected 0x{magic:08x}")
    dims = struct.unpack(f">{ndim}I", raw[4:4 + 4 * ndim])
    payload = raw[4 + 4 * ndim:]
    need = math.prod(dims)
    if len(payload) != need:
        raise DataError(f"{path}: payload has {len(payload)} bytes, header promises {need}")
    return np.frombuffer(payload, dtype=np.uint8).reshape(dims)


def load_idx_images(path_images, path_labels, num_classes: int = 10):
    """Images scaled to [0, 1] with shape (N, H, W), labels one-hot (N, K)."""
    images = _read_idx(path_images, IDX_IMAGES, 3)
    labels = _read_idx(path_labels, IDX_LABELS, 1)
    if images.shape[0] != labels.shape[0]:
        raise DataError(f"{images.shape[0]} images but {labels.shape[0]} labels")
    if labels.size and labels.max() >= num_classes:
        raise DataError(f"label {labels.max()} outside {num_classes} classes")
    onehot = np.zeros((labels.size, num_classes), dtype=FLOAT)
    onehot[np.arange(labels.size), labels] = 1.0
    return (images.astype(FLOAT) / 255.0), onehot


def write_idx_images(path, images) -> None:
    images = np.asarray(images, dtype=np.uint8)
    n, h, w = images.shape
    Path(path).write_bytes(struct.pack(">IIII", IDX_IMAGES, n, h, w) + images.tobytes())


def write_idx_labels(path, labels) -> None:
    labels = np.asarray(labels, dtype=np.uint8).reshape(-1)
    Path(path).write_bytes(struct.pack(">II", IDX_LABELS, labels.size) + labels.tobytes())


# -- augmentations ----------------------------------------------------------------

AUGMENTATIONS = ("brightness", "rotation", "hshift")


def _as_images(images):
    a = np.asarray(images)
    if a.ndim == 2:
        side = int(round(math.sqrt(a.shape[1])))
        if side * side != a.shape[1]:
            raise ValueError("flattened images must be square")
        return a.reshape(-1, side, side), True
    return a, False


def augment(images, kind: str, strength: float):
    """Brightness factor, rotation in degrees, or horizontal shift as a width fraction."""
    imgs, flat = _as_images(images)
    if kind == "brightness":
        if strength < 0:
            raise ValueError("brightness factor must be non-negative")
        out = np.clip(imgs * strength, 0.0, 1.0).astype(imgs.dtype)
    elif kind == "rotation":
        out = _rotate(imgs, strength)
    elif kind == "hshift":
        if not 0.0 <= strength <= 1.0:
            raise ValueError("shift must be a fraction of the width in [0, 1]")
        k = int(round(strength * imgs.shape[2]))
        out = np.zeros_like(imgs)
        if k < imgs.shape[2]:
            out[:, :, k:] = imgs[:, :, :imgs.shape[2] - k]
    else:
        raise ValueError(f"unknown augmentation {kind!r}; expected one of {AUGMENTATIONS}")
    return out.reshape(np.shape(images)) if flat else out


def _rotate(imgs, degrees: float):
    """Nearest-neighbour rotation about the image centre, zero fill.

    Positive angles turn the image counter-clockwise as displayed (row 0 on top).
    """
    _, h, w = imgs.shape
    th = -math.radians(degrees)
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    # inverse map: output pixel -> source pixel
    c, s = math.cos(th), math.sin(th)
    sx = c * (xx - cx) + s * (yy - cy) + cx
    sy = -s * (xx - cx) + c * (yy - cy) + cy
    sxi = np.floor(sx + 0.5).astype(np.int64)
    syi = np.floor(sy + 0.5).astype(np.int64)
    valid = (sxi >= 0) & (sxi < w) & (syi >= 0) & (syi < h)
    out = np.zeros_like(imgs)
    out[:, valid] = imgs[:, syi[valid], sxi[valid]]
    return out
