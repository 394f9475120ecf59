"""Central finite-difference oracle for layer and model gradients (float64).

Kept independent of the backprop code: it only calls ``forward``.
"""

import numpy as np

from ecoba.model import Conv2D, Dense, Flatten, MaxPool, ReLU, Softmax

STEP = 1e-3
REL_TOL = 1e-4
# denominator floor, so exact zeros on both sides compare equal
FLOOR = 1e-7


def numeric_grad(f, arr, h=STEP):
    """d f / d arr by central differences, perturbing ``arr`` in place."""
    g = np.zeros_like(arr)
    flat, gflat = arr.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        up = f()
        flat[i] = old - h
        down = f()
        flat[i] = old
        gflat[i] = (up - down) / (2 * h)
    return g


def max_rel_error(analytic, numeric) -> float:
    a, n = np.asarray(analytic, float), np.asarray(numeric, float)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), FLOOR)
    return float((np.abs(a - n) / denom).max(initial=0.0))


def random_layer(kind, rng):
    """A layer of ``kind`` with random small dims plus a matching random input."""
    n = int(rng.integers(1, 4))
    if kind == "dense":
        i, o = rng.integers(1, 12, size=2)
        layer = Dense(int(i), int(o))
        x = rng.normal(size=(n, int(i)))
    elif kind == "conv":
        c_in, c_out = (int(v) for v in rng.integers(1, 4, size=2))
        k = int(rng.choice([1, 3, 5]))
        pad = int(rng.integers(0, 3))
        h, w = (int(v) for v in rng.integers(k, k + 5, size=2))
        layer = Conv2D(c_in, c_out, k, pad)
        x = rng.normal(size=(n, c_in, h, w))
    elif kind == "maxpool":
        c = int(rng.integers(1, 4))
        h, w = (2 * int(v) for v in rng.integers(1, 4, size=2))
        layer = MaxPool(2)
        # distinct values 0.01 apart so a +-STEP nudge never changes the winner
        x = rng.permutation(n * c * h * w).reshape(n, c, h, w) * 0.01
    elif kind == "relu":
        layer = ReLU()
        x = rng.normal(size=(n, int(rng.integers(1, 20))))
        # keep every input at least 10 steps from the kink
        x = np.where(np.abs(x) < 10 * STEP, np.sign(x + 1e-12) * 0.05, x)
    elif kind == "flatten":
        shape = tuple(int(v) for v in rng.integers(1, 5, size=3))
        layer = Flatten(shape)
        x = rng.normal(size=(n,) + shape)
    elif kind == "softmax":
        m = int(rng.integers(2, 12))
        layer = Softmax(m)
        x = rng.normal(size=(n, m))
    else:
        raise ValueError(kind)
    for key, p in layer.params.items():
        layer.params[key] = rng.normal(size=p.shape)
    return layer, x


def check_layer(layer, x, rng):
    """Max relative error over input and parameter gradients of ``sum(r * layer(x))``."""
    out, cache = layer.forward(x, keep=True)
    r = rng.normal(size=out.shape)
    dx, grads = layer.backward(r, cache)

    def loss():
        return float((layer.forward(x)[0] * r).sum())

    errors = {"x": max_rel_error(dx, numeric_grad(loss, x))}
    for key, p in layer.params.items():
        errors[key] = max_rel_error(grads[key], numeric_grad(loss, p))
    return errors
