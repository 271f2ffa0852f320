"""Dataset ingestion, synthetic OOD sets, normalization and batching.

Byte formats:

* IDX (MNIST / Fashion-MNIST): magic ``00 00 08 dims`` then ``dims`` big-endian
  uint32 sizes, then unsigned bytes in row-major order. Images use dims=3
  (0x00000803), labels dims=1 (0x00000801). ``.gz`` files are read transparently.
* CIFAR-10 binary: 3073-byte records, one label byte followed by the 1024-byte
  red, green and blue 32x32 planes.

File-backed datasets live under ``<data_root>/<name>/`` with the upstream
filenames (``train-images-idx3-ubyte`` etc., or ``cifar-10-batches-bin/*.bin``).
"""

from __future__ import annotations

import gzip
import os
import struct
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import FormatError, UsageError

IN_DISTRIBUTION = "in_distribution"
OUT_OF_DISTRIBUTION = "out_of_distribution"

CIFAR_RECORD = 3073

# Batch draws per dataset role; training code bumps this through take_batch().
BATCH_DRAWS: Counter = Counter()


# -- raw formats -----------------------------------------------------------


def _read_bytes(path) -> bytes:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such file: {path}")
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as fh:
        return fh.read()


def parse_idx(buf: bytes, expected_dims: Optional[int] = None) -> np.ndarray:
    if len(buf) < 4:
        raise FormatError(f"IDX header truncated: {buf[:4].hex(' ')}")
    magic = buf[:4]
    if magic[0] != 0 or magic[1] != 0 or magic[2] != 0x08 or (expected_dims is not None and magic[3] != expected_dims):
        want = f"00 00 08 {expected_dims:02x}" if expected_dims is not None else "00 00 08 xx"
        raise FormatError(f"bad IDX magic {magic.hex(' ')} (expected {want})")
    ndim = magic[3]
    head = 4 + 4 * ndim
    if len(buf) < head:
        raise FormatError(f"IDX dimension block truncated ({len(buf)} bytes, need {head})")
    dims = struct.unpack(f">{ndim}I", buf[4:head])
    count = int(np.prod(dims))
    if len(buf) - head < count:
        raise FormatError(f"IDX payload truncated: dims {dims} need {count} bytes, found {len(buf) - head}")
    return np.frombuffer(buf, dtype=np.uint8, count=count, offset=head).reshape(dims).copy()


def encode_idx(arr: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(arr, dtype=np.uint8)
    return bytes([0, 0, 8, arr.ndim]) + struct.pack(f">{arr.ndim}I", *arr.shape) + arr.tobytes()


def load_idx_images(path) -> np.ndarray:
    """N x H x W uint8 array from an IDX3 image file."""
    return parse_idx(_read_bytes(path), expected_dims=3)


def load_idx_labels(path) -> np.ndarray:
    return parse_idx(_read_bytes(path), expected_dims=1)


def parse_cifar10(buf: bytes) -> tuple[np.ndarray, np.ndarray]:
    if len(buf) % CIFAR_RECORD:
        raise FormatError(f"CIFAR-10 batch length {len(buf)} is not a multiple of {CIFAR_RECORD}")
    rec = np.frombuffer(buf, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = rec[:, 0].copy()
    if np.any(labels > 9):
        bad = int(np.flatnonzero(labels > 9)[0])
        raise FormatError(f"CIFAR-10 record {bad} has label byte {labels[bad]} > 9")
    return rec[:, 1:].reshape(-1, 3, 32, 32).copy(), labels


def load_cifar10_batch(path) -> tuple[np.ndarray, np.ndarray]:
    return parse_cifar10(_read_bytes(path))


# -- normalization ---------------------------------------------------------


@dataclass(frozen=True)
class Normalization:
    mean: tuple
    std: tuple

    @classmethod
    def fit(cls, raw: np.ndarray) -> "Normalization":
        """Per-channel statistics of pixel/255 over an N x C x H x W uint8 array."""
        x = raw.astype(np.float64) / 255.0
        mean = x.mean(axis=(0, 2, 3))
        std = x.std(axis=(0, 2, 3))
        return cls(tuple(float(m) for m in mean), tuple(float(s) if s > 0 else 1.0 for s in std))

    @classmethod
    def identity(cls, channels: int) -> "Normalization":
        return cls((0.0,) * channels, (1.0,) * channels)

    def _shaped(self, dtype):
        m = np.asarray(self.mean, dtype=dtype).reshape(1, -1, 1, 1)
        s = np.asarray(self.std, dtype=dtype).reshape(1, -1, 1, 1)
        return m, s

    def apply(self, unit: np.ndarray) -> np.ndarray:
        """(x - mean) / std for values already scaled to [0, 1]."""
        if unit.shape[1] != len(self.mean):
            raise UsageError(f"normalization has {len(self.mean)} channels, data has {unit.shape[1]}")
        m, s = self._shaped(np.float32)
        return ((unit.astype(np.float32) - m) / s).astype(np.float32)

    def invert(self, x: np.ndarray) -> np.ndarray:
        m, s = self._shaped(np.float32)
        return (x * s + m).astype(np.float32)

    def to_dict(self) -> dict:
        return {"mean": list(self.mean), "std": list(self.std)}


def normalize(raw: np.ndarray, norm: Normalization) -> np.ndarray:
    return norm.apply(raw.astype(np.float32) / 255.0)


def denormalize(x: np.ndarray, norm: Normalization) -> np.ndarray:
    """Back to [0, 255] pixel units."""
    return norm.invert(x) * 255.0


# -- datasets --------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class LabeledDataset:
    """Normalized images (N x C x H x W float32), optional labels and a role.

    Labels of an OOD set are never handed to training code; only
    :meth:`diagnostic_labels` exposes them.
    """

    images: np.ndarray
    _labels: Optional[np.ndarray]
    role: str
    name: str
    normalization: Normalization

    def __post_init__(self):
        if self.role not in (IN_DISTRIBUTION, OUT_OF_DISTRIBUTION):
            raise UsageError(f"unknown dataset role {self.role!r}")
        if self._labels is not None and len(self._labels) != len(self.images):
            raise UsageError(f"{self.name}: {len(self._labels)} labels for {len(self.images)} images")

    def __len__(self) -> int:
        return len(self.images)

    @property
    def labels(self) -> np.ndarray:
        if self.role == OUT_OF_DISTRIBUTION:
            raise UsageError(f"{self.name} is an OOD set; its labels are not available to training")
        if self._labels is None:
            raise UsageError(f"{self.name} has no labels")
        return self._labels

    def diagnostic_labels(self) -> Optional[np.ndarray]:
        return self._labels

    @property
    def sample_shape(self) -> tuple:
        return tuple(self.images.shape[1:])

    def subset(self, n: Optional[int]) -> "LabeledDataset":
        if n is None or n >= len(self):
            return self
        labels = None if self._labels is None else self._labels[:n]
        return LabeledDataset(self.images[:n], labels, self.role, self.name, self.normalization)


def make_dataset(raw: np.ndarray, labels, role: str, name: str, norm: Normalization) -> LabeledDataset:
    if raw.ndim == 3:
        raw = raw[:, None]
    lab = None if labels is None else np.asarray(labels, dtype=np.int64)
    return LabeledDataset(normalize(raw, norm), lab, role, name, norm)


def take_batch(ds: LabeledDataset, idx: np.ndarray) -> np.ndarray:
    """Images at ``idx``; every call is counted in BATCH_DRAWS under the dataset role."""
    BATCH_DRAWS[ds.role] += 1
    return ds.images[idx]


def synth_ood(kind: str, n: int, shape: Sequence[int], seed: int,
              norm: Optional[Normalization] = None) -> LabeledDataset:
    """Noise images in [0, 1] before normalization.

    ``uniform``: i.i.d. U[0, 1]. ``gaussian``: N(0.5, 0.25^2) clipped to [0, 1].
    """
    if n < 1:
        raise UsageError(f"synth_ood needs n >= 1, got {n}")
    shape = tuple(int(s) for s in shape)
    rng = np.random.default_rng(seed)
    if kind == "uniform":
        unit = rng.random((n,) + shape)
    elif kind == "gaussian":
        unit = np.clip(rng.normal(0.5, 0.25, size=(n,) + shape), 0.0, 1.0)
    else:
        raise UsageError(f"unknown synthetic OOD kind {kind!r}")
    norm = norm or Normalization.identity(shape[0])
    return LabeledDataset(norm.apply(unit.astype(np.float32)), None, OUT_OF_DISTRIBUTION, kind, norm)


# -- batching --------------------------------------------------------------


@dataclass(frozen=True)
class BatchPlan:
    batch_size: int
    seed: int = 0
    shuffle: bool = True
    epoch: int = 0


def epoch_permutation(n: int, seed: int, epoch: int) -> np.ndarray:
    """Seeded Fisher-Yates shuffle of range(n), keyed by (seed, epoch)."""
    rng = np.random.default_rng([seed, epoch])
    return rng.permutation(n)


def make_batches(ds, plan: BatchPlan) -> list[np.ndarray]:
    """Index arrays covering the dataset; the last partial batch is kept."""
    if plan.batch_size < 1:
        raise UsageError(f"batch_size must be >= 1, got {plan.batch_size}")
    n = ds if isinstance(ds, int) else len(ds)
    order = epoch_permutation(n, plan.seed, plan.epoch) if plan.shuffle else np.arange(n)
    return [order[i:i + plan.batch_size] for i in range(0, n, plan.batch_size)]


# -- named sources ---------------------------------------------------------

IDX_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}
FILE_DATASETS = ("mnist", "fashion_mnist", "cifar10")
BUNDLED_DATASETS = ("digits", "natural", "faces")
SYNTHETIC_DATASETS = ("uniform", "gaussian")
KNOWN_DATASETS = FILE_DATASETS + BUNDLED_DATASETS + SYNTHETIC_DATASETS

# fixed seed for the bundled stand-ins so their splits never depend on run seeds
_BUNDLE_SEED = 20200707


def resolve_data_root(data_root: Optional[str]) -> Path:
    root = data_root or os.environ.get("SLOD_DATA_ROOT") or "data"
    return Path(root)


def _find(root: Path, name: str, filename: str) -> Path:
    for base in (root / name, root):
        for cand in (base / filename, base / (filename + ".gz")):
            if cand.exists():
                return cand
    raise FileNotFoundError(f"{name}: expected {root / name / filename} (or .gz)")


def _load_cifar10(root: Path, split: str) -> tuple[np.ndarray, np.ndarray]:
    names = [f"data_batch_{i}.bin" for i in range(1, 6)] if split == "train" else ["test_batch.bin"]
    parts = []
    for fn in names:
        for base in (root / "cifar10" / "cifar-10-batches-bin", root / "cifar10", root / "cifar-10-batches-bin"):
            if (base / fn).exists():
                parts.append(load_cifar10_batch(base / fn))
                break
        else:
            raise FileNotFoundError(f"cifar10: expected {root / 'cifar10' / 'cifar-10-batches-bin' / fn}")
    return np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts])


def _resize(img: np.ndarray, side: int) -> np.ndarray:
    from scipy.ndimage import zoom

    return zoom(img.astype(np.float64), (side / img.shape[0], side / img.shape[1]), order=1)


def _to_uint8(unit: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(unit * 255.0), 0, 255).astype(np.uint8)


def _digits(split: str) -> tuple[np.ndarray, np.ndarray]:
    """sklearn's 8x8 handwritten digits, upsampled to 20x20 and centered in 28x28 like MNIST."""
    from sklearn.datasets import load_digits

    d = load_digits()
    imgs = np.stack([np.pad(_resize(im / 16.0, 20), 4) for im in d.images])
    order = np.random.default_rng(_BUNDLE_SEED).permutation(len(imgs))
    n_test = 500
    idx = order[n_test:] if split == "train" else order[:n_test]
    return _to_uint8(imgs[idx]), d.target[idx].astype(np.uint8)


_NATURAL_SOURCES = {
    "train": ("camera", "coins", "moon", "page", "text", "grass", "gravel", "brick", "clock"),
    "test": ("astronaut", "coffee", "chelsea", "rocket", "hubble_deep_field", "immunohistochemistry", "cell"),
}


def _natural(split: str, n: int = 2000) -> np.ndarray:
    """Random grayscale crops of skimage's bundled photos; train/test use disjoint photos."""
    import skimage.data
    from skimage.color import rgb2gray

    photos = []
    for name in _NATURAL_SOURCES[split]:
        im = getattr(skimage.data, name)()
        im = rgb2gray(im) if im.ndim == 3 else im / 255.0
        photos.append(np.asarray(im, dtype=np.float64))
    rng = np.random.default_rng([_BUNDLE_SEED, 0 if split == "train" else 1])
    out = np.empty((n, 28, 28))
    for i in range(n):
        im = photos[rng.integers(len(photos))]
        s = int(rng.integers(48, min(im.shape) // 2 + 1))
        r, c = rng.integers(0, im.shape[0] - s + 1), rng.integers(0, im.shape[1] - s + 1)
        out[i] = _resize(im[r:r + s, c:c + s], 28)
    return _to_uint8(out)


def _faces() -> np.ndarray:
    import skimage.data

    faces = np.load(Path(skimage.data.__file__).parent / "lfw_subset.npy")
    return _to_uint8(np.stack([_resize(f, 28) for f in faces]))


def load_raw(name: str, split: str, data_root: Optional[str] = None) -> tuple[np.ndarray, Optional[np.ndarray]]:
    """(uint8 images N x C x H x W, labels or None) for a named dataset split."""
    if split not in ("train", "test"):
        raise UsageError(f"split must be 'train' or 'test', got {split!r}")
    root = resolve_data_root(data_root)
    if name in ("mnist", "fashion_mnist"):
        img_fn, lab_fn = IDX_FILES[split]
        images = load_idx_images(_find(root, name, img_fn))
        labels = load_idx_labels(_find(root, name, lab_fn))
        if len(images) != len(labels):
            raise FormatError(f"{name}/{split}: {len(images)} images but {len(labels)} labels")
        return images[:, None], labels
    if name == "cifar10":
        return _load_cifar10(root, split)
    if name == "digits":
        images, labels = _digits(split)
        return images[:, None], labels
    if name == "natural":
        return _natural(split)[:, None], None
    if name == "faces":
        return _faces()[:, None], None
    raise UsageError(f"unknown dataset {name!r}; known: {', '.join(KNOWN_DATASETS)}")


def load_ood(name: str, split: str, norm: Normalization, sample_shape: tuple,
             data_root: Optional[str] = None, n: Optional[int] = None, seed: int = 0) -> LabeledDataset:
    """A named OOD set, normalized with the in-distribution statistics."""
    if name in SYNTHETIC_DATASETS:
        return synth_ood(name, n or 1000, sample_shape, seed=seed + (0 if split == "train" else 1), norm=norm)
    raw, labels = load_raw(name, split, data_root)
    if tuple(raw.shape[1:]) != tuple(sample_shape):
        raise UsageError(f"OOD set {name} has sample shape {raw.shape[1:]}, ID data has {sample_shape}")
    ds = make_dataset(raw, labels, OUT_OF_DISTRIBUTION, name, norm)
    return ds.subset(n)


def concat_ood(parts: Sequence[LabeledDataset]) -> LabeledDataset:
    if len(parts) == 1:
        return parts[0]
    return LabeledDataset(np.concatenate([p.images for p in parts]), None, OUT_OF_DISTRIBUTION,
                          "+".join(p.name for p in parts), parts[0].normalization)


@dataclass
class DataBundle:
    id_train: LabeledDataset
    id_test: LabeledDataset
    ood_tests: dict = field(default_factory=dict)
    oe_train: Optional[LabeledDataset] = None

    @property
    def num_classes(self) -> int:
        return int(max(self.id_train.labels.max(), self.id_test.labels.max())) + 1


def build_data(cfg: dict) -> DataBundle:
    """Assemble ID train/test, OOD test sets and OE outliers from a ``data`` config section."""
    root = cfg.get("data_root")
    seed = int(cfg.get("seed", 0))
    id_name = cfg["id_dataset"]
    raw_train, y_train = load_raw(id_name, "train", root)
    raw_test, y_test = load_raw(id_name, "test", root)
    if cfg.get("train_limit"):
        raw_train, y_train = raw_train[: cfg["train_limit"]], y_train[: cfg["train_limit"]]
    if cfg.get("test_limit"):
        raw_test, y_test = raw_test[: cfg["test_limit"]], y_test[: cfg["test_limit"]]
    norm = Normalization.fit(raw_train)
    id_train = make_dataset(raw_train, y_train, IN_DISTRIBUTION, id_name, norm)
    id_test = make_dataset(raw_test, y_test, IN_DISTRIBUTION, id_name, norm)
    shape = id_train.sample_shape
    n_ood = cfg.get("ood_limit") or len(id_test)
    ood_tests = {name: load_ood(name, "test", norm, shape, root, n_ood, seed) for name in cfg.get("ood_test", [])}
    oe_names = cfg.get("oe_outliers", [])
    oe_train = None
    if oe_names:
        n_oe = cfg.get("oe_limit") or len(id_train)
        oe_train = concat_ood([load_ood(name, "train", norm, shape, root, n_oe, seed) for name in oe_names])
    return DataBundle(id_train, id_test, ood_tests, oe_train)
