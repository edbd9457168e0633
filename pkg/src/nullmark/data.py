"""Dataset loading and watermark batch synthesis.

Inputs are float32, channel-last ``(N, H, W, C)``, scaled to [0, 1].
"""
from __future__ import annotations

import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .crypto import WatermarkSpec
from .errors import IngestionError
from .filter import apply, invert

CACHE_ENV = "NULLMARK_DATA_DIR"
DEFAULT_CACHE = Path.home() / ".cache" / "nullmark"

MNIST_FILES = {
    "train_x": "train-images-idx3-ubyte",
    "train_y": "train-labels-idx1-ubyte",
    "test_x": "t10k-images-idx3-ubyte",
    "test_y": "t10k-labels-idx1-ubyte",
}


@dataclass(frozen=True)
class Split:
    inputs: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        if len(self.inputs) != len(self.labels):
            raise ValueError("inputs and labels differ in length")

    def __len__(self):
        return len(self.labels)

    def subset(self, idx) -> "Split":
        return Split(self.inputs[idx], self.labels[idx])

    def sample(self, size: int | None, seed) -> "Split":
        """Uniform sample without replacement; the whole split if ``size`` is None or too large."""
        if size is None or size >= len(self):
            return self
        rng = np.random.default_rng(seed)
        return self.subset(np.sort(rng.choice(len(self), size=size, replace=False)))


@dataclass(frozen=True)
class Dataset:
    name: str
    train: Split
    test: Split
    num_classes: int

    @property
    def input_shape(self) -> tuple[int, int, int]:
        return tuple(self.train.inputs.shape[1:])


def data_dir(override: str | Path | None = None) -> Path:
    if override is not None:
        return Path(override)
    return Path(os.environ.get(CACHE_ENV, DEFAULT_CACHE))


def read_idx(path: str | Path) -> np.ndarray:
    """Decode a big-endian IDX file (optionally gzipped) to a numpy array."""
    import gzip

    path = Path(path)
    raw = path.read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    if len(raw) < 4 or raw[0] != 0 or raw[1] != 0:
        raise IngestionError(f"{path} is not an IDX file")
    dtypes = {0x08: ">u1", 0x09: ">i1", 0x0B: ">i2", 0x0C: ">i4", 0x0D: ">f4", 0x0E: ">f8"}
    if raw[2] not in dtypes:
        raise IngestionError(f"{path}: unknown IDX type code {raw[2]:#x}")
    ndim = raw[3]
    dims = np.frombuffer(raw, dtype=">u4", count=ndim, offset=4).astype(int)
    dt = np.dtype(dtypes[raw[2]])
    offset = 4 + 4 * ndim
    expected = int(np.prod(dims)) * dt.itemsize
    if len(raw) - offset != expected:
        raise IngestionError(f"{path}: expected {expected} payload bytes, found {len(raw) - offset}")
    return np.frombuffer(raw, dtype=dt, offset=offset).reshape(dims)


def _find(root: Path, stem: str) -> Path:
    for name in (stem, stem + ".gz"):
        for cand in (root / name, root / "mnist" / name):
            if cand.exists():
                return cand
    raise IngestionError(
        f"MNIST file {stem} not found under {root}. Place the four IDX files "
        f"({', '.join(MNIST_FILES.values())}) in that directory, or point "
        f"${CACHE_ENV} / --data-dir at a directory that has them."
    )


def load_mnist(root: Path) -> Dataset:
    arrays = {k: read_idx(_find(root, v)) for k, v in MNIST_FILES.items()}

    def images(a):
        return (a.astype(np.float32) / 255.0)[..., None]

    return Dataset(
        "mnist",
        Split(images(arrays["train_x"]), arrays["train_y"].astype(np.int64)),
        Split(images(arrays["test_x"]), arrays["test_y"].astype(np.int64)),
        10,
    )


def make_synthetic(
    seed: int = 0,
    num_classes: int = 10,
    n_train: int = 4000,
    n_test: int = 1000,
    size: int = 28,
    prototype_seed: int | None = None,
) -> Dataset:
    """Noisy, jittered class prototypes built from random strokes.

    Each class owns a prototype of three thick line segments. Samples shift
    the prototype by up to two pixels, rescale its intensity and add noise.
    ``prototype_seed`` fixes the prototypes separately from the sampling
    noise (defaults to ``seed``).
    """
    proto_rng = np.random.default_rng(prototype_seed if prototype_seed is not None else seed)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float32)
    protos = np.zeros((num_classes, size, size), np.float32)
    for k in range(num_classes):
        for _ in range(3):
            (y0, x0), (y1, x1) = proto_rng.uniform(5, size - 5, size=(2, 2))
            t = np.linspace(0, 1, 40)[:, None, None]
            py, px = y0 + t * (y1 - y0), x0 + t * (x1 - x0)
            d2 = ((yy - py) ** 2 + (xx - px) ** 2).min(axis=0)
            protos[k] = np.maximum(protos[k], np.exp(-d2 / 3.0))

    rng = np.random.default_rng([seed, 1])

    def draw(n):
        labels = np.arange(n) % num_classes
        rng.shuffle(labels)
        shifts = rng.integers(-2, 3, size=(n, 2))
        gain = rng.uniform(0.7, 1.0, size=n).astype(np.float32)
        x = np.empty((n, size, size), np.float32)
        for i in range(n):
            x[i] = np.roll(protos[labels[i]], tuple(shifts[i]), axis=(0, 1)) * gain[i]
        x += rng.normal(0, 0.15, size=x.shape).astype(np.float32)
        return Split(np.clip(x, 0, 1)[..., None], labels.astype(np.int64))

    train = draw(n_train)
    test = draw(n_test)
    return Dataset(f"synthetic{num_classes}" if num_classes != 10 else "synthetic", train, test, num_classes)


def load_dataset(name: str, limit: int | None = None, seed: int = 0, data_root=None, **kwargs) -> Dataset:
    """Load ``"mnist"`` from IDX files or generate ``"synthetic"``.

    ``limit`` keeps a seeded uniform subset of the training split.
    """
    if name == "mnist":
        ds = load_mnist(data_dir(data_root))
    elif name == "synthetic":
        ds = make_synthetic(seed=seed, **kwargs)
    elif name == "synthetic5":
        ds = make_synthetic(seed=seed, num_classes=5, **kwargs)
    else:
        raise ValueError(f"unknown dataset {name!r}")
    if limit is not None:
        ds = Dataset(ds.name, ds.train.sample(limit, seed), ds.test, ds.num_classes)
    return ds


def attacker_subset(train: Split, size: int = 5000, seed: int = 0) -> Split:
    return train.sample(size, [seed, 7])


@dataclass
class WatermarkBatch:
    """One training batch with a fraction replaced by watermark samples.

    ``*_idx`` hold positions in the source batch, so every filtered sample can
    be traced back to its original.
    """

    clean_x: np.ndarray
    clean_y: np.ndarray
    true_x: np.ndarray
    true_y: np.ndarray
    null_x: np.ndarray
    null_y: np.ndarray
    injection_ratio: float
    clean_idx: np.ndarray = field(default_factory=lambda: np.empty(0, int))
    true_idx: np.ndarray = field(default_factory=lambda: np.empty(0, int))
    null_idx: np.ndarray = field(default_factory=lambda: np.empty(0, int))

    def union(self) -> tuple[np.ndarray, np.ndarray]:
        x = np.concatenate([self.clean_x, self.true_x, self.null_x])
        y = np.concatenate([self.clean_y, self.true_y, self.null_y])
        return x, y


def num_injected(batch_size: int, ratio: float) -> int:
    if not 0 <= ratio < 1:
        raise ValueError(f"injection ratio must lie in [0, 1), got {ratio}")
    return math.ceil(round(ratio * batch_size, 9))


def make_wm_batch(x, y, specs, injection_ratio: float, seed=None) -> WatermarkBatch:
    """Replace ``ceil(ratio * B)`` random samples with watermark samples.

    ``specs`` is one WatermarkSpec or a list. The injected share is split
    equally across specs, then half true / half null within each spec
    (the extra sample of an odd count goes to the true side).
    """
    if isinstance(specs, WatermarkSpec):
        specs = [specs]
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    x = np.asarray(x)
    y = np.asarray(y)
    b = len(y)
    k = num_injected(b, injection_ratio) if specs else 0
    chosen = rng.permutation(b)[:k] if k else np.empty(0, int)
    clean_idx = np.setdiff1d(np.arange(b), chosen)

    tx, ty, nx, ny, tidx, nidx = [], [], [], [], [], []
    parts = np.array_split(chosen, len(specs)) if specs else []
    for spec, part in zip(specs, parts):
        n_true = (len(part) + 1) // 2
        t, nl = part[:n_true], part[n_true:]
        tx.append(apply(x[t], invert(spec.pattern), spec.extreme_value))
        ty.append(np.full(len(t), spec.target_label, dtype=y.dtype))
        nx.append(apply(x[nl], spec.pattern, spec.extreme_value))
        ny.append(y[nl])
        tidx.append(t)
        nidx.append(nl)

    def cat(parts, like):
        return np.concatenate(parts) if parts else like[:0]

    return WatermarkBatch(
        clean_x=x[clean_idx],
        clean_y=y[clean_idx],
        true_x=cat(tx, x),
        true_y=cat(ty, y),
        null_x=cat(nx, x),
        null_y=cat(ny, y),
        injection_ratio=injection_ratio,
        clean_idx=clean_idx,
        true_idx=cat(tidx, clean_idx),
        null_idx=cat(nidx, clean_idx),
    )
