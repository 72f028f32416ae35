"""Dataset container, IDX / CIFAR-10 binary readers and writers, preprocessing."""
from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
CIFAR_RECORD = 1 + 3 * 32 * 32
CIFAR_RECORDS_PER_FILE = 10000
CIFAR_TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
CIFAR_TEST_FILE = "test_batch.bin"

CIFAR10_CLASSES = ("airplane", "automobile", "bird", "cat", "deer",
                   "dog", "frog", "horse", "ship", "truck")
FASHION_CLASSES = ("T-shirt/top", "Trouser", "Pullover", "Dress", "Coat",
                   "Sandal", "Shirt", "Sneaker", "Bag", "Ankle boot")
MNIST_CLASSES = tuple(str(i) for i in range(10))


class DataFormatError(ValueError):
    pass


@dataclass(frozen=True)
class Normalization:
    """How pixel values were transformed: ``none``, ``div255`` or ``standardized``."""

    mode: str = "none"
    mean: Optional[tuple[float, ...]] = None
    std: Optional[tuple[float, ...]] = None

    def to_dict(self) -> dict:
        return {"mode": self.mode, "mean": list(self.mean) if self.mean else None,
                "std": list(self.std) if self.std else None}

    @classmethod
    def from_dict(cls, d: Optional[dict]) -> "Normalization":
        if not d:
            return cls()
        return cls(d["mode"], tuple(d["mean"]) if d.get("mean") else None,
                   tuple(d["std"]) if d.get("std") else None)

    def valid_range(self) -> Optional[tuple[float, float]]:
        """Pixel range of a normalized image, used as the default FGSM clip."""
        return (0.0, 1.0) if self.mode == "div255" else None

    def to_raw(self, x: np.ndarray) -> np.ndarray:
        """Map normalized values of an (n,C,H,W) or (C,H,W) array back to 0..255."""
        if self.mode == "div255":
            return x * 255.0
        if self.mode == "standardized":
            shape = (-1, 1, 1)
            return x * np.asarray(self.std).reshape(shape) + np.asarray(self.mean).reshape(shape)
        return x


@dataclass
class Dataset:
    images: np.ndarray
    labels: np.ndarray
    num_classes: int
    normalization: Normalization = field(default_factory=Normalization)
    name: str = "dataset"

    def __post_init__(self):
        self.images = np.ascontiguousarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise ValueError(f"images must be (n,C,H,W), got {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise ValueError(f"{len(self.images)} images but {len(self.labels)} labels")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def sample_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def take(self, index) -> "Dataset":
        return replace(self, images=self.images[index], labels=self.labels[index])

    def split(self, fraction: float) -> tuple["Dataset", "Dataset"]:
        """Split off the last ``fraction`` of samples (no shuffling)."""
        if not 0.0 <= fraction < 1.0:
            raise ValueError("fraction must be in [0, 1)")
        cut = len(self) - int(round(len(self) * fraction))
        return self.take(slice(0, cut)), self.take(slice(cut, len(self)))


# --------------------------------------------------------------------------
# IDX

def _read_bytes(path) -> bytes:
    path = Path(path)
    raw = path.read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def _parse_idx(raw: bytes, magic: int, source: str) -> np.ndarray:
    if len(raw) < 4:
        raise DataFormatError(f"{source}: file too short for an IDX header")
    found = struct.unpack(">I", raw[:4])[0]
    if found != magic:
        raise DataFormatError(f"{source}: magic 0x{found:08x}, expected 0x{magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise DataFormatError(f"{source}: truncated header")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    expected = int(np.prod(dims, dtype=np.int64))
    if len(raw) - header != expected:
        raise DataFormatError(
            f"{source}: header promises {expected} payload bytes, found {len(raw) - header}")
    return np.frombuffer(raw, dtype=np.uint8, offset=header).reshape(dims)


def load_idx(images_path, labels_path, num_classes: int = 10, name: str = "mnist") -> Dataset:
    """Read an IDX image/label pair (gzip accepted) as raw 0..255 floats."""
    images = _parse_idx(_read_bytes(images_path), IDX_IMAGES_MAGIC, str(images_path))
    labels = _parse_idx(_read_bytes(labels_path), IDX_LABELS_MAGIC, str(labels_path))
    if len(images) != len(labels):
        raise DataFormatError(f"{images_path} has {len(images)} images but "
                              f"{labels_path} has {len(labels)} labels")
    return Dataset(images[:, None, :, :].astype(np.float32), labels.astype(np.int64),
                   num_classes, Normalization(), name)


def write_idx_images(path, images: np.ndarray) -> None:
    images = np.asarray(images, dtype=np.uint8)
    n, h, w = images.shape
    Path(path).write_bytes(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, h, w) + images.tobytes())


def write_idx_labels(path, labels: np.ndarray) -> None:
    labels = np.asarray(labels, dtype=np.uint8)
    Path(path).write_bytes(struct.pack(">II", IDX_LABELS_MAGIC, len(labels)) + labels.tobytes())


_IDX_NAMES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


def _find(directory: Path, stem: str) -> Optional[Path]:
    for cand in (stem, stem + ".gz", stem.replace("-idx", ".idx"), stem.replace("-idx", ".idx") + ".gz"):
        if (directory / cand).exists():
            return directory / cand
    return None


def load_mnist_dir(directory, split: str = "train", name: str = "mnist") -> Dataset:
    """Load the standard MNIST-family file names from ``directory``."""
    directory = Path(directory)
    stems = _IDX_NAMES[split]
    paths = [_find(directory, s) for s in stems]
    missing = [s for s, p in zip(stems, paths) if p is None]
    if missing:
        raise FileNotFoundError(f"{directory}: missing {', '.join(missing)}")
    return load_idx(paths[0], paths[1], 10, name)


# --------------------------------------------------------------------------
# CIFAR-10

def _cifar_dir(directory: Path) -> Path:
    nested = directory / "cifar-10-batches-bin"
    return nested if nested.is_dir() else directory


def parse_cifar_records(raw: bytes, source: str = "<bytes>") -> tuple[np.ndarray, np.ndarray]:
    if len(raw) % CIFAR_RECORD:
        raise DataFormatError(f"{source}: length {len(raw)} is not a multiple of {CIFAR_RECORD}")
    rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    return rec[:, 1:].reshape(-1, 3, 32, 32), rec[:, 0].astype(np.int64)


def load_cifar10_bin(directory, split: str = "train") -> Dataset:
    """Read the CIFAR-10 binary batches; channels stay in file order (R, G, B)."""
    root = _cifar_dir(Path(directory))
    needed = CIFAR_TRAIN_FILES + (CIFAR_TEST_FILE,)
    missing = [f for f in needed if not (root / f).is_file()]
    if missing:
        raise FileNotFoundError(f"{root}: missing CIFAR-10 files {', '.join(missing)}")
    files = CIFAR_TRAIN_FILES if split == "train" else (CIFAR_TEST_FILE,)
    images, labels = [], []
    for fname in files:
        raw = (root / fname).read_bytes()
        if len(raw) != CIFAR_RECORDS_PER_FILE * CIFAR_RECORD:
            raise DataFormatError(
                f"{root / fname}: expected {CIFAR_RECORDS_PER_FILE * CIFAR_RECORD} bytes, got {len(raw)}")
        x, y = parse_cifar_records(raw, str(root / fname))
        images.append(x)
        labels.append(y)
    x = np.concatenate(images).astype(np.float32)
    y = np.concatenate(labels)
    if y.max() >= 10:
        raise DataFormatError(f"{root}: label {y.max()} out of range")
    return Dataset(x, y, 10, Normalization(), "cifar10")


def write_cifar_records(path, images: np.ndarray, labels: Sequence[int]) -> None:
    images = np.asarray(images, dtype=np.uint8).reshape(-1, 3 * 32 * 32)
    labels = np.asarray(labels, dtype=np.uint8).reshape(-1, 1)
    Path(path).write_bytes(np.concatenate([labels, images], axis=1).tobytes())


# --------------------------------------------------------------------------
# preprocessing

def normalize(data: Dataset, mode: str, stats: Optional[tuple[Sequence[float], Sequence[float]]] = None) -> Dataset:
    """Scale raw 0..255 pixels by 1/255 (``div255``) or per-channel z-score (``standardize``).

    For ``standardize``, ``stats=(mean, std)`` applies given statistics
    (e.g. training statistics to a test split); otherwise they are computed
    from ``data``.
    """
    if data.normalization.mode != "none":
        raise ValueError(f"dataset is already normalized ({data.normalization.mode})")
    x = data.images
    if mode == "div255":
        if x.size and (x.min() < 0 or x.max() > 255):
            raise ValueError("div255 expects raw pixel values in [0, 255]")
        return replace(data, images=x / np.float32(255.0), normalization=Normalization("div255"))
    if mode in ("standardize", "standardized"):
        if stats is None:
            x64 = x.astype(np.float64)
            mean = x64.mean(axis=(0, 2, 3))
            std = x64.std(axis=(0, 2, 3))
        else:
            mean, std = (np.asarray(s, dtype=np.float64) for s in stats)
        if mean.shape != (x.shape[1],) or std.shape != (x.shape[1],):
            raise ValueError(f"stats must have one entry per channel ({x.shape[1]})")
        if np.any(std <= 0):
            bad = [int(i) for i in np.flatnonzero(std <= 0)]
            raise ValueError(f"channel(s) {bad} have zero standard deviation")
        out = ((x - mean[None, :, None, None]) / std[None, :, None, None]).astype(np.float32)
        norm = Normalization("standardized", tuple(float(m) for m in mean), tuple(float(s) for s in std))
        return replace(data, images=out, normalization=norm)
    raise ValueError(f"unknown normalization mode {mode!r}")


def apply_normalization(data: Dataset, norm: Normalization) -> Dataset:
    """Apply a recorded normalization (e.g. one stored with a model) to raw data."""
    if norm.mode == "none":
        return data
    if norm.mode == "div255":
        return normalize(data, "div255")
    return normalize(data, "standardize", (norm.mean, norm.std))


def one_hot(labels, num_classes: int) -> np.ndarray:
    """(n, K) float32 indicator matrix."""
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    bad = np.flatnonzero((labels < 0) | (labels >= num_classes))
    if bad.size:
        i = int(bad[0])
        raise ValueError(f"label at index {i} has value {labels[i]}, outside [0, {num_classes})")
    out = np.zeros((labels.size, num_classes), dtype=np.float32)
    out[np.arange(labels.size), labels] = 1.0
    return out


def synth_dataset(n: int, channels: int, height: int, width: int, num_classes: int,
                  separation: float, seed: int = 0, noise: float = 1.0,
                  blob_width: float = 1.5) -> Dataset:
    """Gaussian-bump class templates plus i.i.d. Gaussian pixel noise.

    Each class template has one bump per channel, centred on a circle of
    radius 0.3 * extent at an angle set by the class index.  The templates
    are orthonormalized and scaled to L2 norm ``separation * noise``, so
    ``separation`` is the template size in noise standard deviations (the
    distance between two templates is ``sqrt(2)`` times that).  Labels are
    balanced and the result is deterministic in ``seed``.
    """
    if n < num_classes:
        raise ValueError(f"need n >= K, got n={n}, K={num_classes}")
    if separation < 0:
        raise ValueError("separation must be non-negative")
    rng = np.random.default_rng(seed)
    phase = rng.uniform(0, 2 * np.pi, size=channels)
    angle = phase[None, :] + 2 * np.pi * np.arange(num_classes)[:, None] / num_classes
    cy = (height - 1) / 2 + 0.3 * height * np.sin(angle)
    cx = (width - 1) / 2 + 0.3 * width * np.cos(angle)
    yy, xx = np.mgrid[0:height, 0:width]
    bumps = np.exp(-((yy - cy[..., None, None]) ** 2 + (xx - cx[..., None, None]) ** 2)
                   / (2 * blob_width ** 2))
    flat = bumps.reshape(num_classes, -1).T
    if flat.shape[0] >= num_classes:
        q, _ = np.linalg.qr(flat)
        q *= np.sign((q * flat).sum(axis=0))
    else:
        q = flat / np.linalg.norm(flat, axis=0, keepdims=True)
    templates = (q.T * separation * noise).reshape(num_classes, channels, height, width)
    labels = rng.permutation(np.arange(n) % num_classes)
    images = templates[labels] + noise * rng.standard_normal((n, channels, height, width))
    return Dataset(images.astype(np.float32), labels, num_classes, Normalization(), "synth")
