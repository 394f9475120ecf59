"""L-inf PGD against a grayscale classifier, and how binarization undoes it."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dataset import binarize
from .model import Model, loss_and_grad, predict


@dataclass
class PgdConfig:
    epsilon: float = 0.2
    alpha: float = 0.05
    steps: int = 20

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.epsilon == 0:
            return  # degenerate no-op attack, allowed
        if not 0 < self.alpha <= self.epsilon < 1:
            raise ValueError(f"need 0 < alpha <= epsilon < 1, got alpha={self.alpha} epsilon={self.epsilon}")


def pgd_attack(model: Model, x: np.ndarray, y, cfg: PgdConfig) -> np.ndarray:
    """Untargeted PGD from ``x`` (single image or batch), maximizing cross-entropy.

    Each step moves by ``alpha * sign(grad)``, projects onto the epsilon
    L-inf ball around ``x`` and clips to ``[0, 1]``.
    """
    x = np.asarray(x, dtype=np.float32)
    y = np.asarray(y)
    if cfg.epsilon == 0:
        return x.copy()
    lo = np.clip(x - cfg.epsilon, 0, 1)
    hi = np.clip(x + cfg.epsilon, 0, 1)
    adv = x.copy()
    for _ in range(cfg.steps):
        _, _, grad = loss_and_grad(model, adv, y)
        adv = np.clip(adv + np.float32(cfg.alpha) * np.sign(grad), lo, hi)
    return adv


@dataclass
class DefenseStats:
    attacked: int  # samples PGD was run on
    fooled: int  # PGD-successful on the grayscale model
    restored: int  # of those, classified correctly after binarization
    crossed: int  # fooled samples where some pixel changed side of the threshold
    restored_crossed: int

    @staticmethod
    def _rate(num, den):
        # nothing fooled means nothing left unrestored
        return num / den if den else 1.0

    @property
    def restoration_rate(self) -> float:
        return self._rate(self.restored, self.fooled)

    @property
    def restoration_rate_crossed(self) -> float:
        return self._rate(self.restored_crossed, self.crossed)

    @property
    def restoration_rate_uncrossed(self) -> float:
        return self._rate(self.restored - self.restored_crossed, self.fooled - self.crossed)


def binarization_defense_rate(m_gray: Model, m_binary: Model, images, labels, cfg: PgdConfig,
                              threshold: float = 0.5, limit: int | None = None,
                              batch: int = 256):
    """Attack ``images`` with PGD on ``m_gray``, then re-classify the binarized results.

    Samples are processed in order until ``limit`` PGD-successful ones are
    collected (all of them when ``limit`` is None). Returns the stats and the
    adversarial images of the counted successful samples together with their
    positions in ``images``.
    """
    images = np.asarray(images, dtype=np.float32)
    labels = np.asarray(labels)
    stats = DefenseStats(0, 0, 0, 0, 0)
    kept_idx, kept_adv = [], []
    for start in range(0, len(images), batch):
        if limit is not None and stats.fooled >= limit:
            break
        xb, yb = images[start:start + batch], labels[start:start + batch]
        adv = pgd_attack(m_gray, xb, yb, cfg)
        fooled = predict(m_gray, adv).argmax(axis=1) != yb
        bin_adv = binarize(adv, threshold)
        restored = predict(m_binary, bin_adv).argmax(axis=1) == yb
        crossed = (bin_adv != binarize(xb, threshold)).reshape(len(xb), -1).any(axis=1)
        for i in range(len(xb)):
            if limit is not None and stats.fooled >= limit:
                break
            stats.attacked += 1
            if not fooled[i]:
                continue
            stats.fooled += 1
            stats.restored += int(restored[i])
            stats.crossed += int(crossed[i])
            stats.restored_crossed += int(restored[i] and crossed[i])
            kept_idx.append(start + i)
            kept_adv.append(adv[i])
    adv_out = np.stack(kept_adv) if kept_adv else np.zeros((0,) + images.shape[1:], np.float32)
    return stats, np.array(kept_idx, dtype=np.int64), adv_out


def select_pgd_samples(m_gray: Model, m_binary: Model, images, labels, threshold: float = 0.5):
    """Indices of samples both classifiers get right on clean input."""
    images = np.asarray(images, dtype=np.float32)
    ok_gray = predict(m_gray, images).argmax(axis=1) == labels
    ok_bin = predict(m_binary, binarize(images, threshold)).argmax(axis=1) == labels
    return np.flatnonzero(ok_gray & ok_bin)
