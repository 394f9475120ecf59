"""Feed-forward classifiers in plain numpy.

Activations are NCHW. Each layer exposes ``forward(x, keep)`` returning
``(out, cache)`` (cache is ``None`` unless ``keep``) and
``backward(dout, cache)`` returning ``(dx, grads)``; parameter-free layers
return an empty grads dict. ``predict`` never keeps caches, so a trained
:class:`Model` can be shared between threads.
"""

from __future__ import annotations

import io
import logging
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

log = logging.getLogger(__name__)

ARCHS = ("mlp2", "lenet", "cnn2")
PREDICT_CHUNK = 1024


class ShapeError(ValueError):
    pass


class Dense:
    kind = "dense"

    def __init__(self, n_in: int, n_out: int):
        self.n_in, self.n_out = n_in, n_out
        self.params = {"W": np.zeros((n_in, n_out), np.float32),
                       "b": np.zeros(n_out, np.float32)}

    def out_shape(self, shape):
        if shape != (self.n_in,):
            raise ShapeError(f"dense expects ({self.n_in},), got {shape}")
        return (self.n_out,)

    def init(self, rng):
        lim = np.sqrt(6.0 / self.n_in)
        self.params["W"][...] = rng.uniform(-lim, lim, (self.n_in, self.n_out))
        self.params["b"][...] = 0

    def forward(self, x, keep=False):
        out = x @ self.params["W"] + self.params["b"]
        return out, (x if keep else None)

    def backward(self, dout, x, need_dx=True):
        grads = {"W": x.T @ dout, "b": dout.sum(axis=0)}
        return (dout @ self.params["W"].T if need_dx else None), grads

    def dims(self):
        return (self.n_in, self.n_out)


class Conv2D:
    """Stride-1 convolution with square kernel and symmetric zero padding."""

    kind = "conv"

    def __init__(self, c_in: int, c_out: int, kernel: int = 5, pad: int = 0):
        self.c_in, self.c_out, self.k, self.pad = c_in, c_out, kernel, pad
        self.params = {"W": np.zeros((c_out, c_in, kernel, kernel), np.float32),
                       "b": np.zeros(c_out, np.float32)}

    def out_shape(self, shape):
        if len(shape) != 3 or shape[0] != self.c_in:
            raise ShapeError(f"conv expects ({self.c_in}, H, W), got {shape}")
        h = shape[1] + 2 * self.pad - self.k + 1
        w = shape[2] + 2 * self.pad - self.k + 1
        if h < 1 or w < 1:
            raise ShapeError(f"conv kernel {self.k} too large for {shape}")
        return (self.c_out, h, w)

    def init(self, rng):
        fan_in = self.c_in * self.k * self.k
        lim = np.sqrt(6.0 / fan_in)
        self.params["W"][...] = rng.uniform(-lim, lim, self.params["W"].shape)
        self.params["b"][...] = 0

    def _cols(self, x):
        p = self.pad
        if p:
            x = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
        win = sliding_window_view(x, (self.k, self.k), axis=(2, 3))  # N,C,Ho,Wo,k,k
        n, c, ho, wo = win.shape[:4]
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * self.k * self.k)
        return cols, (n, ho, wo)

    def forward(self, x, keep=False):
        cols, (n, ho, wo) = self._cols(x)
        wmat = self.params["W"].reshape(self.c_out, -1)
        out = (cols @ wmat.T + self.params["b"]).reshape(n, ho, wo, self.c_out)
        out = out.transpose(0, 3, 1, 2)
        return out, ((cols, x.shape) if keep else None)

    def backward(self, dout, cache, need_dx=True):
        cols, _ = cache
        n, _, ho, wo = dout.shape
        d2 = dout.transpose(0, 2, 3, 1).reshape(-1, self.c_out)
        grads = {"W": (d2.T @ cols).reshape(self.params["W"].shape), "b": d2.sum(axis=0)}
        if not need_dx:
            return None, grads
        # input gradient = full correlation of dout with the rotated kernels
        k, p = self.k, self.pad
        dd = np.pad(dout, ((0, 0), (0, 0), (k - 1, k - 1), (k - 1, k - 1)))
        win = sliding_window_view(dd, (k, k), axis=(2, 3))
        hp, wp = win.shape[2:4]
        dcols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * hp * wp, self.c_out * k * k)
        wrot = self.params["W"][:, :, ::-1, ::-1].transpose(1, 0, 2, 3).reshape(self.c_in, -1)
        dxp = (dcols @ wrot.T).reshape(n, hp, wp, self.c_in).transpose(0, 3, 1, 2)
        if p:
            dxp = dxp[:, :, p:-p, p:-p]
        return dxp, grads

    def dims(self):
        return (self.c_in, self.c_out, self.k, self.pad)


class MaxPool:
    kind = "maxpool"

    def __init__(self, size: int = 2):
        self.size = size
        self.params = {}

    def out_shape(self, shape):
        s = self.size
        if len(shape) != 3 or shape[1] % s or shape[2] % s:
            raise ShapeError(f"maxpool {s}x{s} needs (C, H, W) divisible by {s}, got {shape}")
        return (shape[0], shape[1] // s, shape[2] // s)

    def forward(self, x, keep=False):
        n, c, h, w = x.shape
        s = self.size
        win = x.reshape(n, c, h // s, s, w // s, s).transpose(0, 1, 2, 4, 3, 5)
        win = win.reshape(n, c, h // s, w // s, s * s)
        arg = win.argmax(axis=-1)[..., None]
        out = np.take_along_axis(win, arg, axis=-1)[..., 0]
        return out, ((arg, x.shape) if keep else None)

    def backward(self, dout, cache, need_dx=True):
        arg, (n, c, h, w) = cache
        s = self.size
        dwin = np.zeros((n, c, h // s, w // s, s * s), dout.dtype)
        np.put_along_axis(dwin, arg, dout[..., None], axis=-1)
        dx = dwin.reshape(n, c, h // s, w // s, s, s).transpose(0, 1, 2, 4, 3, 5)
        return dx.reshape(n, c, h, w), {}

    def dims(self):
        return (self.size,)


class ReLU:
    kind = "relu"

    def __init__(self):
        self.params = {}

    def out_shape(self, shape):
        return shape

    def forward(self, x, keep=False):
        return np.maximum(x, 0), ((x > 0) if keep else None)

    def backward(self, dout, mask, need_dx=True):
        return dout * mask, {}

    def dims(self):
        return ()


class Flatten:
    kind = "flatten"

    def __init__(self, shape: tuple[int, ...]):
        self.shape = tuple(shape)
        self.params = {}

    def out_shape(self, shape):
        if tuple(shape) != self.shape:
            raise ShapeError(f"flatten expects {self.shape}, got {shape}")
        return (int(np.prod(shape)),)

    def forward(self, x, keep=False):
        return x.reshape(len(x), -1), None

    def backward(self, dout, cache, need_dx=True):
        return dout.reshape((len(dout),) + self.shape), {}

    def dims(self):
        return self.shape


class Softmax:
    kind = "softmax"

    def __init__(self, n: int):
        self.n = n
        self.params = {}

    def out_shape(self, shape):
        if shape != (self.n,):
            raise ShapeError(f"softmax expects ({self.n},), got {shape}")
        return shape

    def forward(self, x, keep=False):
        z = np.exp(x - x.max(axis=1, keepdims=True))
        p = z / z.sum(axis=1, keepdims=True)
        return p, (p if keep else None)

    def backward(self, dout, p, need_dx=True):
        return p * (dout - (dout * p).sum(axis=1, keepdims=True)), {}

    def dims(self):
        return (self.n,)


class Model:
    """A chain of layers ending in softmax; ``model(images)`` returns class probabilities."""

    def __init__(self, layers, input_shape, arch_id: str = "custom"):
        self.layers = list(layers)
        self.input_shape = tuple(input_shape)
        self.arch_id = arch_id
        shape = self.input_shape
        for layer in self.layers:
            shape = layer.out_shape(shape)
        if not self.layers or self.layers[-1].kind != "softmax":
            raise ShapeError("model must end with a softmax layer")
        self.class_count = shape[0]

    @property
    def dtype(self):
        for layer in self.layers:
            if layer.params:
                return layer.params["W"].dtype
        return np.dtype(np.float32)

    def param_count(self) -> int:
        return sum(p.size for layer in self.layers for p in layer.params.values())

    def astype(self, dtype) -> "Model":
        """Copy with all parameters cast to ``dtype``."""
        clone = load_weights(io.BytesIO(to_bytes(self)))
        for dst, src in zip(clone.layers, self.layers):
            for key in src.params:
                dst.params[key] = src.params[key].astype(dtype)
        return clone

    def _prepare(self, x, dtype=None):
        """Cast and reshape to ``(N, C, H, W)``; flag single images."""
        x = np.asarray(x).astype(dtype or self.dtype, copy=False)
        c = self.input_shape[0]
        # single-channel models take (H, W) singles and (N, H, W) batches
        single = x.ndim == (2 if c == 1 else 3)
        if single:
            x = x[None]
        if c == 1 and x.shape[1:] == self.input_shape[1:]:
            x = x[:, None]
        if x.shape[1:] != self.input_shape:
            raise ShapeError(f"input shape {x.shape[1:]} does not match model {self.input_shape}")
        return x, single

    def forward(self, x, keep=False):
        caches = []
        for layer in self.layers:
            x, cache = layer.forward(x, keep)
            caches.append(cache)
        return x, caches

    def __call__(self, images):
        return predict(self, images)


def predict(model: Model, images) -> np.ndarray:
    """Class probabilities for one image ``(H, W)`` or a batch ``(N, H, W)``.

    Inference runs in float64 (float32 weights are promoted): in float32 a
    confident classifier returns a true-class probability of exactly 1.0,
    which hides every single-pixel confidence drop from the attacks.
    """
    x, single = model._prepare(images, np.float64)
    if len(x) <= PREDICT_CHUNK:
        probs = model.forward(x)[0]
    else:
        probs = np.concatenate([model.forward(x[i:i + PREDICT_CHUNK])[0]
                                for i in range(0, len(x), PREDICT_CHUNK)])
    return probs[0] if single else probs


def loss_and_grad(model: Model, images, labels):
    """Mean softmax cross-entropy, parameter gradients and the input gradient.

    Returns ``(loss, grads, dx)`` where ``grads`` mirrors ``[l.params for l in
    model.layers]`` and ``dx`` has the shape of ``images``.
    """
    return _loss_and_grad(model, images, labels)[:3]


def _loss_and_grad(model, images, labels, input_grad=True):
    images = np.asarray(images)
    labels = np.asarray(labels, dtype=np.int64)
    x, single = model._prepare(images)
    if len(x) == 0:
        raise ValueError("empty batch")
    if single:
        labels = labels.reshape(1)
    n = len(x)
    logits, caches = x, []
    for layer in model.layers[:-1]:
        logits, cache = layer.forward(logits, keep=True)
        caches.append(cache)
    shifted = logits - logits.max(axis=1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    rows = np.arange(n)
    loss = float(-logp[rows, labels].mean())
    d = np.exp(logp)
    d[rows, labels] -= 1
    d /= n
    grads = [{} for _ in model.layers]
    for i in range(len(model.layers) - 2, -1, -1):
        d, grads[i] = model.layers[i].backward(d, caches[i], need_dx=i > 0 or input_grad)
    if d is not None:
        d = d.reshape(images.shape)
    return loss, grads, d, logits


def build(arch_id: str, class_count: int = 10, seed: int = 0,
          input_shape=(1, 28, 28)) -> Model:
    c, h, w = input_shape
    if arch_id == "mlp2":
        layers = [Flatten(input_shape), Dense(c * h * w, 128), ReLU(),
                  Dense(128, 64), ReLU(), Dense(64, class_count), Softmax(class_count)]
    elif arch_id == "cnn2":
        fh, fw = ((h - 4) // 2 - 4) // 2, ((w - 4) // 2 - 4) // 2
        layers = [Conv2D(c, 16, 5), ReLU(), MaxPool(2),
                  Conv2D(16, 32, 5), ReLU(), MaxPool(2),
                  Flatten((32, fh, fw)), Dense(32 * fh * fw, class_count), Softmax(class_count)]
    elif arch_id == "lenet":
        fh, fw = (h // 2 - 4) // 2, (w // 2 - 4) // 2
        layers = [Conv2D(c, 6, 5, pad=2), ReLU(), MaxPool(2),
                  Conv2D(6, 16, 5), ReLU(), MaxPool(2),
                  Flatten((16, fh, fw)), Dense(16 * fh * fw, 120), ReLU(),
                  Dense(120, 84), ReLU(), Dense(84, class_count), Softmax(class_count)]
    else:
        raise ValueError(f"unknown architecture {arch_id!r}; expected one of {ARCHS}")
    model = Model(layers, input_shape, arch_id)
    rng = np.random.default_rng(seed)
    for layer in model.layers:
        if layer.params:
            layer.init(rng)
    return model


@dataclass
class TrainConfig:
    lr: float = 0.01
    momentum: float = 0.9
    batch_size: int = 64
    epochs: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if self.batch_size < 1:
            raise ValueError("batch size must be >= 1")


def accuracy(model: Model, images, labels) -> float:
    if len(images) == 0:
        return float("nan")
    return float((predict(model, images).argmax(axis=1) == np.asarray(labels)).mean())


def train(model: Model, split, cfg: TrainConfig, log_file=None) -> list[tuple[int, float, float]]:
    """Mini-batch SGD with momentum, in place. Returns ``(epoch, train_acc, loss)`` rows.

    ``train_acc`` and ``loss`` are running means over the epoch's batches.
    When ``log_file`` (a text stream) is given, rows are written as
    ``epoch,train_acc,loss`` lines.
    """
    x, y = split.train_x, split.train_y
    rng = np.random.default_rng(cfg.seed)
    velocity = [{k: np.zeros_like(v) for k, v in layer.params.items()} for layer in model.layers]
    lr, mom = model.dtype.type(cfg.lr), model.dtype.type(cfg.momentum)
    history = []
    if log_file is not None:
        log_file.write("epoch,train_acc,loss\n")
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(x))
        correct, loss_sum = 0, 0.0
        for start in range(0, len(x), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            xb, yb = x[idx], y[idx]
            loss, grads, _, logits = _loss_and_grad(model, xb, yb, input_grad=False)
            for layer, g, v in zip(model.layers, grads, velocity):
                for key in g:
                    v[key] *= mom
                    v[key] -= lr * g[key]
                    layer.params[key] += v[key]
            loss_sum += loss * len(idx)
            correct += int((logits.argmax(axis=1) == yb).sum())
        acc = correct / len(x)
        row = (epoch, acc, loss_sum / len(x))
        history.append(row)
        log.info("%s epoch %d acc %.4f loss %.4f", model.arch_id, *row)
        if log_file is not None:
            log_file.write(f"{epoch},{acc:.6f},{row[2]:.6f}\n")
            log_file.flush()
    return history


# ---------------------------------------------------------------- ECW1 format
#
# "ECW1" | u32 layer count | per layer: u8 kind tag, u32 dim count, u32 dims...,
# f32 params (W then b, row-major) | trailer: u32 C, H, W input shape,
# u8 length + ASCII arch id. All integers and floats little-endian.

MAGIC = b"ECW1"
TAGS = {"dense": 1, "conv": 2, "maxpool": 3, "relu": 4, "flatten": 5, "softmax": 6}
KINDS = {v: k for k, v in TAGS.items()}
MAX_LAYERS = 1024


class WeightFileError(ValueError):
    pass


def to_bytes(model: Model) -> bytes:
    out = bytearray(MAGIC)
    out += struct.pack("<I", len(model.layers))
    for layer in model.layers:
        dims = layer.dims()
        out += struct.pack("<BI", TAGS[layer.kind], len(dims))
        out += struct.pack(f"<{len(dims)}I", *dims)
        for key in ("W", "b"):
            if key in layer.params:
                out += layer.params[key].astype("<f4").tobytes()
    shape = tuple(model.input_shape)
    arch = model.arch_id.encode("ascii")
    out += struct.pack("<3IB", *shape, len(arch)) + arch
    return bytes(out)


def save_weights(model: Model, path) -> None:
    Path(path).write_bytes(to_bytes(model))


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise WeightFileError(f"truncated weight file at byte {self.pos} (need {n} more)")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def _make_layer(kind: str, dims):
    if kind == "dense":
        return Dense(*dims)
    if kind == "conv":
        c_in, c_out, k, pad = dims
        return Conv2D(c_in, c_out, k, pad)
    if kind == "maxpool":
        return MaxPool(*dims)
    if kind == "relu":
        return ReLU()
    if kind == "flatten":
        return Flatten(dims)
    return Softmax(*dims)


def load_weights(source) -> Model:
    """Read an ECW1 file from a path or binary stream."""
    data = source.read() if hasattr(source, "read") else Path(source).read_bytes()
    r = _Reader(data)
    if len(data) < 4 or r.take(4) != MAGIC:
        raise WeightFileError("bad magic: not an ECW1 weight file")
    (n_layers,) = r.unpack("<I")
    if n_layers > MAX_LAYERS:
        raise WeightFileError(f"implausible layer count {n_layers}")
    layers = []
    for _ in range(n_layers):
        tag, n_dims = r.unpack("<BI")
        if tag not in KINDS:
            raise WeightFileError(f"unknown layer tag {tag}")
        if n_dims > 8:
            raise WeightFileError(f"implausible dim count {n_dims}")
        dims = r.unpack(f"<{n_dims}I")
        kind = KINDS[tag]
        if kind in ("dense", "conv") and len(dims) in (2, 4):
            need = 4 * (int(np.prod(dims[:2], dtype=np.int64)) * (dims[2] ** 2 if kind == "conv" else 1)
                        + dims[1])
            if need > len(data) - r.pos:
                raise WeightFileError(f"{kind} dims {dims} need {need} bytes, file is truncated")
        try:
            layer = _make_layer(kind, dims)
        except (TypeError, ValueError) as exc:
            raise WeightFileError(f"bad dims {dims} for {kind}") from exc
        for key in ("W", "b"):
            if key in layer.params:
                p = layer.params[key]
                layer.params[key] = np.frombuffer(r.take(4 * p.size), "<f4").astype(np.float32).reshape(p.shape)
        layers.append(layer)
    c, h, w, n_arch = r.unpack("<3IB")
    arch = r.take(n_arch).decode("ascii", errors="replace")
    if r.pos != len(data):
        raise WeightFileError(f"{len(data) - r.pos} trailing bytes after weights")
    try:
        model = Model(layers, (c, h, w), arch)
    except ShapeError as exc:
        raise WeightFileError(f"layer dims do not compose: {exc}") from exc
    for layer in model.layers:
        for p in layer.params.values():
            if not np.isfinite(p).all():
                raise WeightFileError("non-finite weights")
    return model
