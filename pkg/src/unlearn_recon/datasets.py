"""Dataset loading, normalization, splitting and synthesis.

All randomness goes through :func:`rng_from_seed`, a Philox (counter-based)
generator, so that splits and synthetic draws are reproducible across
platforms.
"""

from __future__ import annotations

import csv
import gzip
import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Literal, Sequence

import numpy as np

Task = Literal["regression", "binary", "multiclass"]
TASKS = ("regression", "binary", "multiclass")

IDX_IMAGES_MAGIC = 0x00000803
IDX_IMAGES_RGB_MAGIC = 0x00000804
IDX_LABELS_MAGIC = 0x00000801

CACHE_MAGIC = b"URDS"
CACHE_VERSION = 1


class DatasetError(ValueError):
    """Raised for malformed inputs to any loader or transform."""


def rng_from_seed(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(int(seed) & 0xFFFFFFFFFFFFFFFF))


@dataclass(frozen=True)
class FeatureScaling:
    """Per-feature affine map ``x -> 2 (x - low) / (high - low) - 1``.

    ``low``/``high`` are expressed in the units of the original (raw) data, so
    :meth:`inverse` always maps back to raw values. Columns with
    ``high == low`` are constant and map to 0.
    """

    low: np.ndarray
    high: np.ndarray

    @property
    def constant(self) -> np.ndarray:
        return self.high == self.low

    def apply(self, raw: np.ndarray) -> np.ndarray:
        span = np.where(self.constant, 1.0, self.high - self.low)
        out = 2.0 * (raw - self.low) / span - 1.0
        return np.where(self.constant, 0.0, out)

    def inverse(self, scaled: np.ndarray) -> np.ndarray:
        span = self.high - self.low
        return self.low + (np.asarray(scaled) + 1.0) * 0.5 * span


@dataclass(frozen=True, eq=False)
class Dataset:
    """Feature matrix plus targets.

    Classification targets are integer class indices in ``0..k-1``; binary
    tasks use ``{0, 1}``. ``image_shape`` is ``(H, W, C)`` for image data and
    enables montage output. ``true_weights`` is only set by :func:`synthesize`.
    """

    features: np.ndarray
    targets: np.ndarray
    task: Task
    name: str = ""
    scaling: FeatureScaling | None = None
    image_shape: tuple[int, int, int] | None = None
    true_weights: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.task not in TASKS:
            raise DatasetError(f"unknown task {self.task!r}")
        X = np.array(self.features, dtype=np.float64, order="C")
        if X.ndim != 2:
            raise DatasetError("features must be a 2-D matrix")
        n, d = X.shape
        if n < 2 or d < 1:
            raise DatasetError(f"need n >= 2 and d >= 1, got {X.shape}")
        if self.task == "regression":
            y = np.array(self.targets, dtype=np.float64)
        else:
            raw = np.asarray(self.targets)
            y = raw.astype(np.int64)
            if not np.array_equal(y, raw) or y.min() < 0:
                raise DatasetError("classification targets must be class indices 0..k-1")
            if self.task == "binary" and y.max() > 1:
                raise DatasetError("binary targets must be 0 or 1")
        if y.shape != (n,):
            raise DatasetError(f"targets shape {y.shape} does not match n={n}")
        if self.image_shape is not None and math.prod(self.image_shape) != d:
            raise DatasetError(f"image shape {self.image_shape} does not match d={d}")
        X.flags.writeable = False
        y.flags.writeable = False
        object.__setattr__(self, "features", X)
        object.__setattr__(self, "targets", y)

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def d(self) -> int:
        return self.features.shape[1]

    @property
    def n_classes(self) -> int | None:
        if self.task == "regression":
            return None
        if self.task == "binary":
            return 2
        return int(self.targets.max()) + 1

    def subset(self, indices: Sequence[int] | np.ndarray, name: str | None = None) -> Dataset:
        idx = np.asarray(indices, dtype=np.int64)
        return replace(
            self,
            features=self.features[idx],
            targets=self.targets[idx],
            name=self.name if name is None else name,
        )

    def without(self, index: int) -> Dataset:
        if not 0 <= index < self.n:
            raise IndexError(f"index {index} out of range for n={self.n}")
        return self.subset(np.delete(np.arange(self.n), index))


@dataclass(frozen=True)
class SplitSpec:
    public_fraction: float = 0.5
    seed: int = 0


@dataclass(frozen=True)
class SyntheticSpec:
    n: int
    d: int
    task: Task = "regression"
    noise_std: float = 0.1
    seed: int = 0
    n_classes: int = 3  # multiclass only


# --------------------------------------------------------------------------
# CSV
# --------------------------------------------------------------------------


def load_csv(path: str | Path, target_column: str, task: Task = "regression") -> Dataset:
    """Read a numeric CSV with a header row.

    Every cell must parse as a finite float; anything else (``NA``, empty,
    category strings) raises :class:`DatasetError` naming the data row
    (1-based, header excluded) and column.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such CSV file: {path}")
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DatasetError(f"{path}: empty file, header row required") from None
        if target_column not in header:
            raise DatasetError(f"{path}: target column {target_column!r} not in header {header}")
        rows = []
        for r, row in enumerate(reader, start=1):
            if not row:
                continue
            if len(row) != len(header):
                raise DatasetError(f"{path}: row {r} has {len(row)} cells, expected {len(header)}")
            values = []
            for c, cell in enumerate(row):
                try:
                    v = float(cell)
                except ValueError:
                    v = math.nan
                if not math.isfinite(v):
                    raise DatasetError(
                        f"{path}: non-numeric cell {cell!r} at row {r}, column {header[c]!r}"
                    )
                values.append(v)
            rows.append(values)
    table = np.array(rows, dtype=np.float64).reshape(len(rows), len(header))
    t = header.index(target_column)
    return Dataset(
        features=np.delete(table, t, axis=1),
        targets=table[:, t],
        task=task,
        name=path.stem,
    )


def save_csv(dataset: Dataset, path: str | Path, target_column: str = "y",
             feature_names: Sequence[str] | None = None) -> None:
    """Write ``dataset`` so that :func:`load_csv` reproduces it bit-exactly."""
    names = list(feature_names) if feature_names else [f"x{j}" for j in range(dataset.d)]
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([*names, target_column])
        for x, y in zip(dataset.features, dataset.targets):
            w.writerow([repr(float(v)) for v in x] + [repr(float(y)) if dataset.task == "regression" else str(int(y))])


# --------------------------------------------------------------------------
# IDX (MNIST / Fashion-MNIST on-disk format)
# --------------------------------------------------------------------------


def _read_maybe_gzip(path: Path) -> bytes:
    raw = path.read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def load_idx(images_path: str | Path, labels_path: str | Path, name: str | None = None) -> Dataset:
    """Load an IDX image/label pair; pixels map to [-1, 1] via ``2 v / 255 - 1``."""
    images_path, labels_path = Path(images_path), Path(labels_path)
    img = _read_maybe_gzip(images_path)
    lab = _read_maybe_gzip(labels_path)

    magic = struct.unpack(">I", img[:4])[0]
    if magic == IDX_IMAGES_MAGIC:
        n, h, w = struct.unpack(">III", img[4:16])
        c, offset = 1, 16
    elif magic == IDX_IMAGES_RGB_MAGIC:
        n, h, w, c = struct.unpack(">IIII", img[4:20])
        offset = 20
    else:
        raise DatasetError(f"{images_path}: bad image magic 0x{magic:08x}")
    lmagic, ln = struct.unpack(">II", lab[:8])
    if lmagic != IDX_LABELS_MAGIC:
        raise DatasetError(f"{labels_path}: bad label magic 0x{lmagic:08x}")
    if ln != n:
        raise DatasetError(f"image count {n} does not match label count {ln}")
    d = h * w * c
    if len(img) < offset + n * d or len(lab) < 8 + n:
        raise DatasetError("IDX payload truncated")

    pixels = np.frombuffer(img, dtype=np.uint8, count=n * d, offset=offset).reshape(n, d)
    labels = np.frombuffer(lab, dtype=np.uint8, count=n, offset=8).astype(np.int64)
    scaling = FeatureScaling(low=np.zeros(d), high=np.full(d, 255.0))
    return Dataset(
        features=pixels * (2.0 / 255.0) - 1.0,
        targets=labels,
        task="multiclass" if labels.max() > 1 else "binary",
        name=name or images_path.name.split(".")[0],
        scaling=scaling,
        image_shape=(h, w, c),
    )


def write_idx(images: np.ndarray, labels: np.ndarray, images_path: str | Path,
              labels_path: str | Path) -> None:
    """Write uint8 images ``(n, H, W)`` or ``(n, H, W, C)`` and labels as IDX
    (gzip-compressed when the path ends in ``.gz``)."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    if images.ndim == 3:
        header = struct.pack(">IIII", IDX_IMAGES_MAGIC, *images.shape)
    elif images.ndim == 4:
        header = struct.pack(">IIIII", IDX_IMAGES_RGB_MAGIC, *images.shape)
    else:
        raise DatasetError("images must be (n, H, W) or (n, H, W, C)")
    _write_maybe_gzip(Path(images_path), header + images.tobytes())
    _write_maybe_gzip(Path(labels_path), struct.pack(">II", IDX_LABELS_MAGIC, len(labels)) + labels.tobytes())


def _write_maybe_gzip(path: Path, payload: bytes) -> None:
    # mtime=0 keeps gzip output byte-stable
    path.write_bytes(gzip.compress(payload, mtime=0) if path.suffix == ".gz" else payload)


# --------------------------------------------------------------------------
# Binary cache
# --------------------------------------------------------------------------
#
# Layout (little-endian):
#   4s   magic "URDS"
#   u32  version
#   u64  n, u64 d
#   u8   task (0 regression, 1 binary, 2 multiclass)
#   u32  name length L, then L bytes UTF-8
#   f64  features, n*d, row-major
#   f64  targets, n


def save_cache(dataset: Dataset, path: str | Path) -> None:
    name = dataset.name.encode("utf-8")
    header = struct.pack("<4sIQQBI", CACHE_MAGIC, CACHE_VERSION, dataset.n, dataset.d,
                         TASKS.index(dataset.task), len(name))
    payload = (
        header
        + name
        + dataset.features.astype("<f8").tobytes()
        + dataset.targets.astype("<f8").tobytes()
    )
    Path(path).write_bytes(payload)


def load_cache(path: str | Path) -> Dataset:
    raw = Path(path).read_bytes()
    size = struct.calcsize("<4sIQQBI")
    magic, version, n, d, task, name_len = struct.unpack("<4sIQQBI", raw[:size])
    if magic != CACHE_MAGIC or version != CACHE_VERSION:
        raise DatasetError(f"{path}: not a dataset cache file")
    pos = size + name_len
    name = raw[size:pos].decode("utf-8")
    X = np.frombuffer(raw, dtype="<f8", count=n * d, offset=pos).reshape(n, d)
    y = np.frombuffer(raw, dtype="<f8", count=n, offset=pos + 8 * n * d)
    return Dataset(features=X, targets=y, task=TASKS[task], name=name)


# --------------------------------------------------------------------------
# Transforms
# --------------------------------------------------------------------------


def normalize_to_range(dataset: Dataset) -> Dataset:
    """Min-max scale every feature onto [-1, 1]; constant columns become 0."""
    X = dataset.features
    if not np.all(np.isfinite(X)):
        raise DatasetError("cannot normalize non-finite features")
    lo, hi = X.min(axis=0), X.max(axis=0)
    local = FeatureScaling(lo, hi)
    scaled = np.clip(local.apply(X), -1.0, 1.0)
    if dataset.scaling is None:
        scaling = local
    else:
        # compose with the existing map so inverse() still reaches raw units
        scaling = FeatureScaling(dataset.scaling.inverse(lo), dataset.scaling.inverse(hi))
    return replace(dataset, features=scaled, scaling=scaling)


def split_private_public(dataset: Dataset, spec: SplitSpec) -> tuple[Dataset, Dataset]:
    """Seeded permutation split into ``(private, public)``."""
    if not 0.0 < spec.public_fraction < 1.0:
        raise DatasetError("public_fraction must lie in (0, 1)")
    n_pub = int(math.floor(dataset.n * spec.public_fraction))
    if n_pub < 1 or dataset.n - n_pub < 2:
        raise DatasetError(
            f"fraction {spec.public_fraction} on n={dataset.n} leaves an empty part"
        )
    perm = rng_from_seed(spec.seed).permutation(dataset.n)
    priv_idx = np.sort(perm[n_pub:])
    pub_idx = np.sort(perm[:n_pub])
    return (
        dataset.subset(priv_idx, name=f"{dataset.name}:private"),
        dataset.subset(pub_idx, name=f"{dataset.name}:public"),
    )


def split_indices(n: int, spec: SplitSpec) -> tuple[np.ndarray, np.ndarray]:
    """Index form of :func:`split_private_public` for bookkeeping."""
    n_pub = int(math.floor(n * spec.public_fraction))
    perm = rng_from_seed(spec.seed).permutation(n)
    return np.sort(perm[n_pub:]), np.sort(perm[:n_pub])


def synthesize(spec: SyntheticSpec) -> Dataset:
    """Gaussian features normalized to [-1, 1] with linear ground-truth targets."""
    if spec.n < 2:
        raise DatasetError("synthetic n must be >= 2")
    if spec.noise_std < 0:
        raise DatasetError("noise_std must be >= 0")
    rng = rng_from_seed(spec.seed)
    raw = rng.standard_normal((spec.n, spec.d))
    base = normalize_to_range(Dataset(raw, np.zeros(spec.n), "regression"))
    X = base.features
    if spec.task == "multiclass":
        if spec.n_classes < 2:
            raise DatasetError("multiclass synthesis needs n_classes >= 2")
        w = rng.standard_normal((spec.d, spec.n_classes))
        scores = X @ w + spec.noise_std * rng.standard_normal((spec.n, spec.n_classes))
        y = np.argmax(scores, axis=1)
    else:
        w = rng.standard_normal(spec.d)
        y = X @ w
        if spec.noise_std > 0:
            y = y + spec.noise_std * rng.standard_normal(spec.n)
        if spec.task == "binary":
            y = (y > 0).astype(np.int64)
    return Dataset(
        features=X,
        targets=y,
        task=spec.task,
        name=f"synthetic-{spec.task}-{spec.n}x{spec.d}",
        scaling=base.scaling,
        true_weights=w,
    )
