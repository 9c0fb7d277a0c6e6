"""Dataset loading, synthesis, and the on-disk sample cache.

Everything downstream works on float64 arrays: inputs are (n, d) row-major,
classification targets are int64 class ids, regression targets are (n, m)
float64. Loaded arrays are marked read-only so later stages cannot mutate
a cached dataset in place.
"""

from dataclasses import dataclass
import csv
import struct

import numpy as np

from . import _binio
from .errors import ConfigError, DataFormatError, ShapeError

_CACHE_MAGIC = b"OTDS"
_CACHE_VERSION = 1

_IDX_IMAGES_MAGIC = 0x00000803
_IDX_LABELS_MAGIC = 0x00000801


def _frozen(arr: np.ndarray) -> np.ndarray:
    out = np.ascontiguousarray(arr)
    out.flags.writeable = False
    return out


@dataclass(frozen=True)
class Dataset:
    """One split of labeled vectors plus task metadata."""

    x: np.ndarray
    y: np.ndarray
    task: str = "classification"  # "classification" | "regression"
    num_classes: int = 0
    name: str = "dataset"

    def __post_init__(self):
        if self.task not in ("classification", "regression"):
            raise ConfigError(f"unknown task {self.task!r}")
        if self.x.ndim != 2:
            raise ShapeError("inputs must be a 2-d (n, d) array")
        if len(self.x) == 0:
            raise DataFormatError("empty dataset")
        if len(self.x) != len(self.y):
            raise ShapeError("inputs/targets length mismatch")
        object.__setattr__(self, "x", _frozen(np.asarray(self.x, dtype=np.float64)))
        y = np.asarray(self.y)
        if self.task == "classification":
            y = y.astype(np.int64)
            if self.num_classes > 0 and (y.min() < 0 or y.max() >= self.num_classes):
                raise DataFormatError("class targets outside [0, num_classes)")
        else:
            y = y.astype(np.float64)
            if y.ndim == 1:
                y = y[:, None]
        object.__setattr__(self, "y", _frozen(y))

    def __len__(self):
        return len(self.x)

    @property
    def dim(self) -> int:
        return self.x.shape[1]


@dataclass(frozen=True)
class SyntheticSpec:
    """Gaussian blobs around class means drawn uniformly on the unit sphere."""

    dim: int = 32
    num_classes: int = 5
    class_std: float = 0.1
    train_count: int = 2000
    test_count: int = 500
    rng_seed: int = 0

    def __post_init__(self):
        if self.dim < 2:
            raise ConfigError("synthetic dim must be >= 2")
        if self.num_classes < 2:
            raise ConfigError("synthetic num_classes must be >= 2")
        if self.class_std < 0:
            raise ConfigError("class_std must be nonnegative")
        if min(self.train_count, self.test_count) < self.num_classes:
            raise ConfigError("counts must be >= num_classes")


def generate_synthetic(spec: SyntheticSpec) -> tuple[Dataset, Dataset]:
    """Sample the train and test splits; deterministic under spec.rng_seed.

    Class means are normalized standard-Gaussian draws (uniform on the
    sphere); each sample is its class mean plus class_std * standard normal.
    """
    rng = np.random.default_rng(spec.rng_seed)
    means = rng.standard_normal((spec.num_classes, spec.dim))
    means /= np.linalg.norm(means, axis=1, keepdims=True)
    name = f"synthetic-std{spec.class_std:g}"

    def sample(n):
        labels = np.arange(n, dtype=np.int64) % spec.num_classes
        x = means[labels] + spec.class_std * rng.standard_normal((n, spec.dim))
        perm = rng.permutation(n)
        return Dataset(x[perm], labels[perm], task="classification",
                       num_classes=spec.num_classes, name=name)

    return sample(spec.train_count), sample(spec.test_count)


# --- IDX image/label files (big-endian header, u8 payload) ---

def load_idx_images(path) -> np.ndarray:
    """Read an IDX u8 image tensor and return (n, rows*cols) float64 in [0, 1]."""
    with open(path, "rb") as f:
        header = _binio.read_exact(f, 16)
        magic, n, rows, cols = struct.unpack(">IIII", header)
        if magic != _IDX_IMAGES_MAGIC:
            raise DataFormatError(f"bad IDX image magic 0x{magic:08x}")
        raw = f.read()
    expected = n * rows * cols
    if len(raw) != expected:
        raise DataFormatError(f"IDX image payload has {len(raw)} bytes, expected {expected}")
    pixels = np.frombuffer(raw, dtype=np.uint8).astype(np.float64) / 255.0
    return pixels.reshape(n, rows * cols)


def load_idx_labels(path) -> np.ndarray:
    with open(path, "rb") as f:
        header = _binio.read_exact(f, 8)
        magic, n = struct.unpack(">II", header)
        if magic != _IDX_LABELS_MAGIC:
            raise DataFormatError(f"bad IDX label magic 0x{magic:08x}")
        raw = f.read()
    if len(raw) != n:
        raise DataFormatError(f"IDX label payload has {len(raw)} bytes, expected {n}")
    return np.frombuffer(raw, dtype=np.uint8).astype(np.int64)


def load_idx(images_path, labels_path, name: str = "idx") -> Dataset:
    x = load_idx_images(images_path)
    y = load_idx_labels(labels_path)
    if len(x) != len(y):
        raise DataFormatError(f"image/label count mismatch: {len(x)} vs {len(y)}")
    return Dataset(x, y, task="classification",
                   num_classes=int(y.max()) + 1 if len(y) else 0, name=name)


def write_idx_images(path, images: np.ndarray, rows: int, cols: int) -> None:
    """Inverse of load_idx_images; takes raw uint8 or floats in [0, 1]."""
    flat = images.reshape(len(images), -1)
    if flat.shape[1] != rows * cols:
        raise ShapeError("image size does not match rows*cols")
    if images.dtype == np.uint8:
        u8 = flat
    else:
        u8 = np.clip(np.rint(flat * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(struct.pack(">IIII", _IDX_IMAGES_MAGIC, len(images), rows, cols))
        f.write(u8.tobytes())


def write_idx_labels(path, labels: np.ndarray) -> None:
    with open(path, "wb") as f:
        f.write(struct.pack(">II", _IDX_LABELS_MAGIC, len(labels)))
        f.write(labels.astype(np.uint8).tobytes())


# --- CSV regression tables ---

def load_csv_regression(path, delimiter: str = ",", target_column: str = "target",
                        name: str = "csv") -> Dataset:
    """Numeric CSV with a header row: features are z-scored (variance floored
    at 1e-12 so constant columns map to zero), the target stays raw."""
    with open(path, newline="") as f:
        reader = csv.reader(f, delimiter=delimiter)
        header = next(reader, None)
        if header is None:
            raise DataFormatError("empty CSV")
        rows = list(reader)
    if not rows:
        raise DataFormatError("CSV has a header but no data rows")
    if target_column not in header:
        raise DataFormatError(f"target column {target_column!r} not in header")
    t_idx = header.index(target_column)
    try:
        table = np.array([[float(v) for v in row] for row in rows], dtype=np.float64)
    except ValueError as exc:
        raise DataFormatError(f"non-numeric CSV cell: {exc}") from None
    if table.ndim != 2 or table.shape[1] != len(header):
        raise DataFormatError("CSV row width does not match header")
    x = np.delete(table, t_idx, axis=1)
    y = table[:, t_idx:t_idx + 1]
    mu = x.mean(axis=0)
    sd = np.sqrt(np.maximum(x.var(axis=0), 1e-12))
    return Dataset((x - mu) / sd, y, task="regression", name=name)


# --- binary sample cache ---

def write_dataset(path, ds: Dataset) -> None:
    with open(path, "wb") as f:
        f.write(_CACHE_MAGIC)
        _binio.write_u8(f, _CACHE_VERSION)
        _binio.write_u8(f, 0 if ds.task == "classification" else 1)
        _binio.write_u32(f, ds.num_classes)
        _binio.write_u64(f, len(ds))
        _binio.write_u64(f, ds.dim)
        raw = ds.name.encode("utf-8")
        _binio.write_u32(f, len(raw))
        f.write(raw)
        _binio.write_array(f, ds.x)
        _binio.write_array(f, ds.y)


def read_dataset(path) -> Dataset:
    with open(path, "rb") as f:
        _binio.check_magic(f, _CACHE_MAGIC, "dataset cache")
        version = _binio.read_u8(f)
        if version != _CACHE_VERSION:
            raise DataFormatError(f"unsupported dataset cache version {version}")
        task = "classification" if _binio.read_u8(f) == 0 else "regression"
        num_classes = _binio.read_u32(f)
        n = _binio.read_u64(f)
        dim = _binio.read_u64(f)
        name = _binio.read_exact(f, _binio.read_u32(f)).decode("utf-8")
        x = _binio.read_array(f)
        y = _binio.read_array(f)
    if x.shape != (n, dim):
        raise DataFormatError("dataset cache header disagrees with payload shape")
    return Dataset(x, y, task=task, num_classes=num_classes, name=name)


# --- split helpers ---

def split_dataset(ds: Dataset, test_fraction: float, seed: int = 0) -> tuple[Dataset, Dataset]:
    """Random train/test split (for sources that arrive as one table)."""
    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(ds))
    n_test = max(1, int(round(test_fraction * len(ds))))
    if n_test >= len(ds):
        raise ConfigError("test_fraction leaves no training rows")
    test, train = perm[:n_test], perm[n_test:]
    make = lambda idx: Dataset(ds.x[idx], ds.y[idx], task=ds.task,
                               num_classes=ds.num_classes, name=ds.name)
    return make(train), make(test)


def stratified_subset(ds: Dataset, n_total: int, seed: int = 0) -> Dataset:
    """Class-balanced subsample (per-class counts equal to within 1)."""
    if ds.task != "classification":
        raise ConfigError("stratified subsetting needs class labels")
    rng = np.random.default_rng(seed)
    classes = np.unique(ds.y)
    per_class = n_total // len(classes)
    extra = n_total - per_class * len(classes)
    picked = []
    for k, cls in enumerate(classes):
        idx = np.flatnonzero(ds.y == cls)
        want = per_class + (1 if k < extra else 0)
        if want > len(idx):
            raise ConfigError(f"class {cls} has only {len(idx)} samples, need {want}")
        picked.append(rng.choice(idx, size=want, replace=False))
    order = rng.permutation(np.concatenate(picked))
    return Dataset(ds.x[order], ds.y[order], task=ds.task,
                   num_classes=ds.num_classes, name=ds.name)
