"""PGM (P5) and PNG dumps of binary or grayscale images."""

from pathlib import Path

import numpy as np
from PIL import Image


def to_u8(img: np.ndarray) -> np.ndarray:
    """Map ``[0, 1]`` intensities (binary or gray) to 0..255."""
    img = np.asarray(img)
    if img.dtype == np.uint8 and img.max(initial=0) <= 1:
        return img * np.uint8(255)
    return np.round(np.clip(img, 0, 1) * 255).astype(np.uint8)


def write_pgm(path, img) -> None:
    data = to_u8(img)
    h, w = data.shape
    Path(path).write_bytes(b"P5\n%d %d\n255\n" % (w, h) + data.tobytes())


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(maxsplit=4)
    if parts[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    if maxval != 255:
        raise ValueError(f"{path}: unsupported maxval {maxval}")
    return np.frombuffer(raw[-w * h:], dtype=np.uint8).reshape(h, w)


def write_png(path, img) -> None:
    Image.fromarray(to_u8(img), mode="L").save(path, format="PNG")


def write_image(stem, img) -> list[Path]:
    """Write ``stem.pgm`` and ``stem.png``."""
    stem = Path(stem)
    write_pgm(stem.with_suffix(".pgm"), img)
    write_png(stem.with_suffix(".png"), img)
    return [stem.with_suffix(".pgm"), stem.with_suffix(".png")]
