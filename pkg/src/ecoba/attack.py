"""Combinatorial pixel-flip attacks on binary image classifiers.

The attacks only ever see a classifier as a callable mapping a batch of
binary images ``(N, H, W)`` to class probabilities ``(N, n)``. Every call
goes through a :class:`QueryCounter`, so traces report the exact number of
images the classifier was asked about.

A flip's *adversarial error* is the drop in ground-truth confidence it causes,
``eps_i = F(x)_y - F(x with pixel i flipped)_y``. Dictionaries keep only
``eps_i > 0`` and sort by descending error, ties by ascending pixel index.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

ADDITIVE = "additive"  # black -> white
EROSIVE = "erosive"  # white -> black
METHODS = ("ap", "ep", "ecoba")
MODES = ("static", "rescore")

# pixel value a polarity flips away from
SOURCE = {ADDITIVE: 0, EROSIVE: 1}

Classifier = Callable[[np.ndarray], np.ndarray]


class QueryCounter:
    """Meters a black-box classifier by number of images evaluated."""

    def __init__(self, classifier: Classifier):
        self._classifier = classifier
        self.queries = 0

    def __call__(self, images: np.ndarray) -> np.ndarray:
        images = np.asarray(images)
        if images.ndim == 2:
            images = images[None]
        self.queries += len(images)
        return np.asarray(self._classifier(images))


@dataclass(frozen=True)
class PerturbationEntry:
    pixel_index: int
    polarity: str
    epsilon: float


@dataclass
class PerturbationDictionary:
    entries: list[PerturbationEntry]
    baseline_conf: float
    polarity: str

    def __len__(self):
        return len(self.entries)

    @property
    def indices(self) -> np.ndarray:
        return np.array([e.pixel_index for e in self.entries], dtype=np.int64)


@dataclass
class MergedDictionary:
    pairs: list[tuple[PerturbationEntry, PerturbationEntry]]
    leftovers: list[PerturbationEntry]


@dataclass
class Step:
    k: int
    additive: tuple[int, ...]  # flat indices flipped 0 -> 1, in application order
    erosive: tuple[int, ...]  # flat indices flipped 1 -> 0
    probs: np.ndarray
    predicted: int
    queries: int  # cumulative at the end of this step
    single_sided: bool = False  # ECoBA only: one dictionary was exhausted

    @property
    def flipped(self) -> frozenset[int]:
        return frozenset(self.additive) | frozenset(self.erosive)

    @property
    def l0(self) -> int:
        return len(self.additive) + len(self.erosive)


@dataclass
class AttackTrace:
    original: np.ndarray
    ground_truth: int
    method: str
    mode: str = "static"
    steps: list[Step] = field(default_factory=list)
    queries: int = 0

    @property
    def success_step(self) -> int | None:
        for step in self.steps:
            if step.predicted != self.ground_truth:
                return step.k
        return None

    def step_at(self, k: int) -> Step:
        """State after ``k`` iterations; past an early stop the last state holds."""
        return self.steps[min(k, len(self.steps) - 1)]

    def image_at(self, k: int) -> np.ndarray:
        return apply_flips(self.original, self.step_at(k).flipped)

    def conf_true(self, k: int) -> float:
        return float(self.step_at(k).probs[self.ground_truth])


def apply_flips(x: np.ndarray, indices) -> np.ndarray:
    out = np.array(x, dtype=np.uint8, copy=True)
    flat = out.reshape(-1)
    idx = np.fromiter(indices, dtype=np.int64)
    flat[idx] = 1 - flat[idx]
    return out


def _check_binary(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x)
    if x.ndim != 2:
        raise ValueError(f"expected a single (H, W) image, got shape {x.shape}")
    if not np.isin(x, (0, 1)).all():
        raise ValueError("image is not binary")
    return x.astype(np.uint8)


def _flip_batch(x: np.ndarray, candidates: np.ndarray) -> np.ndarray:
    batch = np.repeat(x.reshape(1, -1), len(candidates), axis=0)
    rows = np.arange(len(candidates))
    batch[rows, candidates] = 1 - batch[rows, candidates]
    return batch.reshape((len(candidates),) + x.shape)


def _rank(candidates: np.ndarray, eps: np.ndarray, polarity: str, baseline: float):
    keep = eps > 0
    cand, e = candidates[keep], eps[keep]
    order = np.lexsort((cand, -e))
    entries = [PerturbationEntry(int(cand[i]), polarity, float(e[i])) for i in order]
    return PerturbationDictionary(entries, float(baseline), polarity)


def _score(oracle, x, y, polarity, candidates=None, baseline=None):
    if candidates is None:
        candidates = np.flatnonzero(x.reshape(-1) == SOURCE[polarity])
    if baseline is None:
        baseline = oracle(x[None])[0, y]
    if len(candidates) == 0:
        return PerturbationDictionary([], float(baseline), polarity)
    conf = oracle(_flip_batch(x, candidates))[:, y]
    return _rank(candidates, baseline - conf, polarity, baseline)


def score_flips(classifier: Classifier, x: np.ndarray, y: int, polarity: str) -> PerturbationDictionary:
    """Score every single-pixel flip of the given polarity against ``x``."""
    if polarity not in SOURCE:
        raise ValueError(f"unknown polarity {polarity!r}")
    oracle = classifier if isinstance(classifier, QueryCounter) else QueryCounter(classifier)
    return _score(oracle, _check_binary(x), int(y), polarity)


def merge(additive: PerturbationDictionary, erosive: PerturbationDictionary) -> MergedDictionary:
    """Row-wise stack: row j pairs the j-th best additive and erosive entries."""
    n = min(len(additive), len(erosive))
    pairs = list(zip(additive.entries[:n], erosive.entries[:n]))
    leftovers = additive.entries[n:] + erosive.entries[n:]
    return MergedDictionary(pairs, leftovers)


def _record(trace, oracle, x, k, add, ero, single_sided=False):
    probs = oracle(apply_flips(x, list(add) + list(ero))[None])[0]
    trace.steps.append(Step(k, tuple(add), tuple(ero), probs, int(np.argmax(probs)),
                            oracle.queries, single_sided))


def _static(oracle, x, y, k_max, method):
    trace = AttackTrace(x, y, method, "static")
    base_probs = oracle(x[None])[0]
    baseline = base_probs[y]
    trace.steps.append(Step(0, (), (), base_probs, int(np.argmax(base_probs)), oracle.queries))
    add_idx = ero_idx = np.zeros(0, dtype=np.int64)
    if method in ("ap", "ecoba"):
        add_idx = _score(oracle, x, y, ADDITIVE, baseline=baseline).indices
    if method in ("ep", "ecoba"):
        ero_idx = _score(oracle, x, y, EROSIVE, baseline=baseline).indices
    for k in range(1, k_max + 1):
        if k > len(add_idx) and k > len(ero_idx):
            break
        add, ero = add_idx[:k], ero_idx[:k]
        single = method == "ecoba" and (k > len(add_idx) or k > len(ero_idx))
        _record(trace, oracle, x, k, add.tolist(), ero.tolist(), single)
    trace.queries = oracle.queries
    return trace


def _rescore(oracle, x, y, k_max, method):
    """Greedy variant: re-score the untouched pixels against the current image each step."""
    trace = AttackTrace(x, y, method, "rescore")
    base_probs = oracle(x[None])[0]
    trace.steps.append(Step(0, (), (), base_probs, int(np.argmax(base_probs)), oracle.queries))
    flat = x.reshape(-1)
    polarities = {"ap": (ADDITIVE,), "ep": (EROSIVE,), "ecoba": (ADDITIVE, EROSIVE)}[method]
    chosen = {ADDITIVE: [], EROSIVE: []}
    current, conf = x, base_probs[y]
    for k in range(1, k_max + 1):
        picks = {}
        for pol in polarities:
            touched = np.zeros(flat.size, dtype=bool)
            touched[chosen[ADDITIVE] + chosen[EROSIVE]] = True
            cand = np.flatnonzero((flat == SOURCE[pol]) & ~touched)
            d = _score(oracle, current, y, pol, candidates=cand, baseline=conf)
            if d.entries:
                picks[pol] = d.entries[0].pixel_index
        if not picks:
            break
        for pol, idx in picks.items():
            chosen[pol].append(idx)
        single = method == "ecoba" and len(picks) == 1
        _record(trace, oracle, x, k, chosen[ADDITIVE], chosen[EROSIVE], single)
        current = apply_flips(x, chosen[ADDITIVE] + chosen[EROSIVE])
        conf = trace.steps[-1].probs[y]
    trace.queries = oracle.queries
    return trace


def run_attack(classifier: Classifier, x, y: int, k_max: int, method: str = "ecoba",
               mode: str = "static") -> AttackTrace:
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}; expected one of {METHODS}")
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")
    if k_max < 0:
        raise ValueError("k_max must be >= 0")
    oracle = QueryCounter(classifier)
    x = _check_binary(x)
    run = _static if mode == "static" else _rescore
    return run(oracle, x, int(y), int(k_max), method)


def attack_ap(classifier, x, y, k_max, mode="static") -> AttackTrace:
    """Additive perturbations only: flip the top-k scored background pixels to white."""
    return run_attack(classifier, x, y, k_max, "ap", mode)


def attack_ep(classifier, x, y, k_max, mode="static") -> AttackTrace:
    """Erosive perturbations only: flip the top-k scored character pixels to black."""
    return run_attack(classifier, x, y, k_max, "ep", mode)


def attack_ecoba(classifier, x, y, k_max, mode="static") -> AttackTrace:
    """Paired attack: at step k apply the top-k additive and the top-k erosive flips.

    While both dictionaries last the white-pixel count of the image is
    unchanged. When one runs out the attack continues with the other alone
    and marks those steps ``single_sided``.
    """
    return run_attack(classifier, x, y, k_max, "ecoba", mode)


def rescore_mode(classifier, x, y, k_max, method="ecoba") -> AttackTrace:
    return run_attack(classifier, x, y, k_max, method, "rescore")


def trace_rows(trace: AttackTrace, sample_id) -> list[str]:
    """``sample_id,method,k,l0,predicted,true,conf_true,queries`` lines (no header)."""
    return [f"{sample_id},{trace.method},{s.k},{s.l0},{s.predicted},{trace.ground_truth},"
            f"{float(s.probs[trace.ground_truth]):.6f},{s.queries}" for s in trace.steps]


TRACE_HEADER = "sample_id,method,k,l0,predicted,true,conf_true,queries"
