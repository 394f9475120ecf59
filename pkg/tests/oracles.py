"""Naive re-implementations of the attack scoring, one image per classifier call."""

import numpy as np

from ecoba.model import Dense, Flatten, Model, Softmax


def toy_model(h, w, n, rng):
    """Random dense-softmax classifier over ``h x w`` binary images."""
    m = Model([Flatten((1, h, w)), Dense(h * w, n), Softmax(n)], (1, h, w), "toy")
    m.layers[1].params["W"] = rng.normal(scale=2.0, size=(h * w, n))
    m.layers[1].params["b"] = rng.normal(size=n)
    return m


def confidence(model, img, y):
    return float(model(img[None].astype(np.uint8))[0][y])


def brute_dictionary(model, x, y, source_value):
    """[(pixel, eps)] for every pixel equal to ``source_value``, eps > 0, sorted."""
    base = confidence(model, x, y)
    rows = []
    for i in range(x.size):
        if x.flat[i] != source_value:
            continue
        flipped = x.copy()
        flipped.flat[i] = 1 - flipped.flat[i]
        eps = base - confidence(model, flipped, y)
        if eps > 0:
            rows.append((i, eps))
    return sorted(rows, key=lambda r: (-r[1], r[0]))


def greedy_oracle(model, x, y, k_max, sources):
    """Sequential greedy: each step flips, per source color, the untouched pixel
    whose flip lowers the true-class confidence of the current image the most."""
    current = x.copy()
    touched = set()
    history = []
    for _ in range(k_max):
        picks = []
        for src in sources:
            base = confidence(model, current, y)
            best = None
            for i in range(x.size):
                if i in touched or x.flat[i] != src:
                    continue
                trial = current.copy()
                trial.flat[i] = 1 - trial.flat[i]
                eps = base - confidence(model, trial, y)
                if eps > 0 and (best is None or eps > best[1]):
                    best = (i, eps)
            if best is not None:
                picks.append(best[0])
        if not picks:
            break
        for i in picks:
            touched.add(i)
            current.flat[i] = 1 - current.flat[i]
        history.append(sorted(touched))
    return history
