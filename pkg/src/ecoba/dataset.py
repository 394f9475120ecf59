"""IDX loading, global-threshold binarization and seeded 85/15 splits.

Images are kept as numpy arrays of shape ``(N, H, W)``: grayscale images are
``float32`` intensities in ``[0, 1]`` (0 = black), binary images are ``uint8``
arrays holding only 0 and 1.
"""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801
GZIP_MAGIC = b"\x1f\x8b"

TRAIN_FRACTION = 0.85

# (file stem prefix, class count, label offset)
DATASETS = {
    "mnist": (("train", "t10k"), 10, 0),
    # EMNIST letters labels run 1..26
    "emnist-letters": (("emnist-letters-train", "emnist-letters-test"), 26, 1),
}


class IDXFormatError(ValueError):
    """Bad magic number or malformed IDX header."""


class IDXLengthError(IDXFormatError):
    """Stream shorter than its header promises."""


def _maybe_gunzip(data: bytes) -> bytes:
    if data[:2] == GZIP_MAGIC:
        return gzip.decompress(data)
    return data


def _header(data: bytes, magic: int, n_fields: int) -> tuple[int, ...]:
    size = 4 * (1 + n_fields)
    if len(data) >= 4:
        (found,) = struct.unpack(">I", data[:4])
        if found != magic:
            raise IDXFormatError(f"bad IDX magic 0x{found:08x}, expected 0x{magic:08x}")
    if len(data) < size:
        raise IDXLengthError(f"IDX header needs {size} bytes, got {len(data)}")
    return struct.unpack(f">{n_fields}I", data[4:size])


def parse_idx_images(data: bytes) -> np.ndarray:
    """Decode an IDX3 image stream into ``float32`` intensities ``v / 255``."""
    data = _maybe_gunzip(data)
    count, rows, cols = _header(data, IMAGE_MAGIC, 3)
    n = count * rows * cols
    payload = data[16:16 + n]
    if len(payload) < n:
        raise IDXLengthError(f"expected {n} pixel bytes, got {len(payload)}")
    raw = np.frombuffer(payload, dtype=np.uint8).reshape(count, rows, cols)
    return raw.astype(np.float32) / np.float32(255.0)


def parse_idx_labels(data: bytes) -> np.ndarray:
    data = _maybe_gunzip(data)
    (count,) = _header(data, LABEL_MAGIC, 1)
    payload = data[8:8 + count]
    if len(payload) < count:
        raise IDXLengthError(f"expected {count} label bytes, got {len(payload)}")
    return np.frombuffer(payload, dtype=np.uint8).astype(np.int64)


def binarize(images: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    """Global threshold: ``>= threshold`` becomes white (1), the rest black (0)."""
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must lie in (0, 1), got {threshold}")
    return (np.asarray(images) >= threshold).astype(np.uint8)


@dataclass(frozen=True)
class LabeledSample:
    index: int  # position in the pooled dataset, used as sample id
    image: np.ndarray
    label: int


@dataclass
class DatasetSplit:
    name: str
    train_x: np.ndarray
    train_y: np.ndarray
    test_x: np.ndarray
    test_y: np.ndarray
    # pooled-dataset indices, so train/test disjointness is checkable
    train_ids: np.ndarray
    test_ids: np.ndarray
    class_count: int
    seed: int

    @property
    def image_shape(self) -> tuple[int, int]:
        return tuple(self.train_x.shape[1:])

    def test_sample(self, i: int) -> LabeledSample:
        return LabeledSample(int(self.test_ids[i]), self.test_x[i], int(self.test_y[i]))


def _find(root: Path, name: str, stem: str) -> Path:
    for folder in (root / name, root):
        for suffix in ("", ".gz"):
            p = folder / (stem + suffix)
            if p.is_file():
                return p
    raise FileNotFoundError(f"{stem}[.gz] not found under {root} or {root / name}")


def load_pool(name: str, root) -> tuple[np.ndarray, np.ndarray]:
    """All examples of a dataset (native train then test), grayscale, MNIST orientation."""
    if name not in DATASETS:
        raise ValueError(f"unknown dataset {name!r}; expected one of {sorted(DATASETS)}")
    root = Path(root)
    prefixes, _, offset = DATASETS[name]
    xs, ys = [], []
    for prefix in prefixes:
        x = parse_idx_images(_find(root, name, f"{prefix}-images-idx3-ubyte").read_bytes())
        y = parse_idx_labels(_find(root, name, f"{prefix}-labels-idx1-ubyte").read_bytes())
        if len(x) != len(y):
            raise IDXFormatError(f"{name}/{prefix}: {len(x)} images but {len(y)} labels")
        xs.append(x)
        ys.append(y - offset)
    x = np.concatenate(xs)
    if name.startswith("emnist"):
        # EMNIST stores characters transposed relative to MNIST
        x = np.ascontiguousarray(x.transpose(0, 2, 1))
    return x, np.concatenate(ys)


def load_dataset(name: str, root, threshold: float = 0.5, seed: int = 0,
                 grayscale: bool = False) -> DatasetSplit:
    """Pool a dataset, shuffle it with ``seed`` and re-split 85/15.

    With ``grayscale=True`` the images are left unthresholded (float32); this
    is only used to train the grayscale classifier of the PGD demo.
    """
    x, y = load_pool(name, root)
    class_count = DATASETS[name][1]
    if y.size and (y.min() < 0 or y.max() >= class_count):
        raise IDXFormatError(f"{name}: labels outside [0, {class_count})")
    if not grayscale:
        x = binarize(x, threshold)
    order = np.random.default_rng(seed).permutation(len(x))
    n_train = int(round(TRAIN_FRACTION * len(x)))
    tr, te = order[:n_train], order[n_train:]
    return DatasetSplit(name, x[tr], y[tr], x[te], y[te], tr, te, class_count, seed)
