"""Small layer-stack network engine with hand-written reverse mode.

Every layer is a pair of pure functions (forward returning a cache, backward
consuming it), so a trained :class:`Model` can be shared read-only between
workers. Arithmetic runs in float64; parameters are kept on the float32 grid
so that the on-disk format (32-bit little-endian) round-trips bit-exactly.
"""
from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ClassIndexError, ConfigError, DatasetError, InputShapeError

LAYER_KINDS = ("dense", "conv2d", "relu", "flatten")


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    dims: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        for key, value in self.dims.items():
            if int(value) < 1:
                raise ValueError(f"{self.kind} dim {key}={value} must be positive")


def dense(in_features, out_features):
    return LayerSpec("dense", {"in_features": in_features, "out_features": out_features})


def conv2d(in_channels, out_channels, kernel_size, stride=1):
    return LayerSpec("conv2d", {"in_channels": in_channels, "out_channels": out_channels,
                                "kernel_size": kernel_size, "stride": stride})


def relu():
    return LayerSpec("relu")


def flatten():
    return LayerSpec("flatten")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 12
    batch_size: int = 64
    learning_rate: float = 0.05
    momentum: float = 0.9
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if self.learning_rate < 0 or not 0 <= self.momentum < 1:
            raise ConfigError("learning_rate must be >= 0 and momentum in [0, 1)")


def layer_output_shape(spec, in_shape):
    """Shape (without batch axis) produced by ``spec`` on ``in_shape``."""
    d = spec.dims
    if spec.kind == "dense":
        if tuple(in_shape) != (d["in_features"],):
            raise InputShapeError(f"dense expects ({d['in_features']},), got {tuple(in_shape)}")
        return (d["out_features"],)
    if spec.kind == "conv2d":
        if len(in_shape) != 3 or in_shape[0] != d["in_channels"]:
            raise InputShapeError(f"conv2d expects ({d['in_channels']}, H, W), got {tuple(in_shape)}")
        k, s = d["kernel_size"], d["stride"]
        _, h, w = in_shape
        if k > h or k > w:
            raise InputShapeError(f"kernel {k} does not fit inside {h}x{w}")
        return (d["out_channels"], (h - k) // s + 1, (w - k) // s + 1)
    if spec.kind == "flatten":
        return (int(np.prod(in_shape)),)
    return tuple(in_shape)


def param_shapes(spec):
    d = spec.dims
    if spec.kind == "dense":
        return {"weight": (d["out_features"], d["in_features"]), "bias": (d["out_features"],)}
    if spec.kind == "conv2d":
        k = d["kernel_size"]
        return {"weight": (d["out_channels"], d["in_channels"], k, k), "bias": (d["out_channels"],)}
    return {}


@dataclass
class Model:
    arch_id: str
    class_count: int
    input_shape: tuple
    layers: list
    params: list
    seed: int = 0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.input_shape = tuple(int(v) for v in self.input_shape)
        if self.class_count < 2:
            raise ValueError("class_count must be >= 2")
        if len(self.params) != len(self.layers):
            raise ValueError("one parameter dict per layer is required")
        shape = self.input_shape
        for spec, p in zip(self.layers, self.params):
            shape = layer_output_shape(spec, shape)
            expected = param_shapes(spec)
            if set(p) != set(expected):
                raise ValueError(f"{spec.kind} parameters {sorted(p)} != {sorted(expected)}")
            for name, shp in expected.items():
                if tuple(p[name].shape) != shp:
                    raise ValueError(f"{spec.kind}.{name} has shape {p[name].shape}, expected {shp}")
        if shape != (self.class_count,):
            raise InputShapeError(f"network output {shape} does not match class_count {self.class_count}")

    @property
    def input_dim(self):
        return int(np.prod(self.input_shape))

    def copy(self):
        return copy.deepcopy(self)


def _to_f32_grid(a):
    return np.asarray(a, dtype=np.float32).astype(np.float64)


# -- layer kernels -----------------------------------------------------------

def _im2col(x, k, s):
    # x: [n, C, H, W] -> [n, Ho, Wo, C*k*k]
    win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::s, ::s]
    n, c, ho, wo = win.shape[:4]
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n, ho, wo, c * k * k)


def _forward_layer(spec, p, x):
    if spec.kind == "dense":
        return x @ p["weight"].T + p["bias"], x
    if spec.kind == "conv2d":
        k, s = spec.dims["kernel_size"], spec.dims["stride"]
        cols = _im2col(x, k, s)
        w = p["weight"].reshape(p["weight"].shape[0], -1)
        y = cols @ w.T + p["bias"]
        return y.transpose(0, 3, 1, 2), (x.shape, cols)
    if spec.kind == "relu":
        mask = x > 0
        return x * mask, mask
    return x.reshape(x.shape[0], -1), x.shape


def _backward_layer(spec, p, cache, gy, want_params):
    grads = {}
    if spec.kind == "dense":
        x = cache
        if want_params:
            grads = {"weight": gy.T @ x, "bias": gy.sum(axis=0)}
        return gy @ p["weight"], grads
    if spec.kind == "conv2d":
        x_shape, cols = cache
        k, s = spec.dims["kernel_size"], spec.dims["stride"]
        out_c = p["weight"].shape[0]
        g = gy.transpose(0, 2, 3, 1)  # [n, Ho, Wo, out]
        if want_params:
            g2 = g.reshape(-1, out_c)
            grads = {"weight": (g2.T @ cols.reshape(-1, cols.shape[-1])).reshape(p["weight"].shape),
                     "bias": g2.sum(axis=0)}
        n, c, _, _ = x_shape
        ho, wo = g.shape[1:3]
        gcols = (g @ p["weight"].reshape(out_c, -1)).reshape(n, ho, wo, c, k, k)
        gx = np.zeros(x_shape)
        for i in range(k):
            for j in range(k):
                gx[:, :, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s] += \
                    gcols[..., i, j].transpose(0, 3, 1, 2)
        return gx, grads
    if spec.kind == "relu":
        return gy * cache, grads
    return gy.reshape(cache), grads


# -- public operations ---------------------------------------------------------

def _check_batch(model, batch):
    batch = np.asarray(batch, dtype=np.float64)
    if batch.shape[1:] != model.input_shape:
        raise InputShapeError(
            f"batch shape {batch.shape} does not match [n] + {list(model.input_shape)}")
    return batch


def _run(model, batch):
    caches = []
    h = batch
    for spec, p in zip(model.layers, model.params):
        h, cache = _forward_layer(spec, p, h)
        caches.append(cache)
    return h, caches


def _backprop(model, caches, g, want_params=False):
    grads = [None] * len(model.layers)
    for idx in range(len(model.layers) - 1, -1, -1):
        g, grads[idx] = _backward_layer(model.layers[idx], model.params[idx], caches[idx], g, want_params)
    return g, grads


def forward(model, batch):
    """Raw class scores (logits), shape [n, class_count]."""
    logits, _ = _run(model, _check_batch(model, batch))
    return logits


def predict(model, batch, chunk=4096):
    """Per-sample argmax of the logits; ties go to the lowest class index."""
    batch = _check_batch(model, batch)
    out = [np.argmax(forward(model, batch[i:i + chunk]), axis=1) for i in range(0, len(batch), chunk)]
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def input_gradient(model, x, j):
    """Gradient of class score ``j`` with respect to a single sample ``x``."""
    if not 0 <= j < model.class_count:
        raise ClassIndexError(f"class index {j} outside [0, {model.class_count})")
    x = np.asarray(x, dtype=np.float64)
    if x.shape != model.input_shape:
        raise InputShapeError(f"sample shape {x.shape} != {model.input_shape}")
    logits, caches = _run(model, x[None])
    seed = np.zeros_like(logits)
    seed[0, j] = 1.0
    gx, _ = _backprop(model, caches, seed)
    return gx[0]


def input_jacobian(model, batch):
    """Logits [n, c] and their input Jacobian [n, c, *input_shape]."""
    batch = _check_batch(model, batch)
    logits, caches = _run(model, batch)
    n, c = logits.shape
    jac = np.empty((n, c) + model.input_shape)
    for j in range(c):
        seed = np.zeros_like(logits)
        seed[:, j] = 1.0
        jac[:, j], _ = _backprop(model, caches, seed)
    return logits, jac


def softmax_cross_entropy(logits, labels):
    """Mean cross entropy and its gradient w.r.t. the logits (log-sum-exp form)."""
    z = logits - logits.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    n = len(labels)
    loss = float(np.mean(logsum - z[np.arange(n), labels]))
    probs = np.exp(z - logsum[:, None])
    probs[np.arange(n), labels] -= 1.0
    return loss, probs / n


def loss_and_grads(model, batch, labels):
    batch = _check_batch(model, batch)
    logits, caches = _run(model, batch)
    loss, g = softmax_cross_entropy(logits, np.asarray(labels))
    _, grads = _backprop(model, caches, g, want_params=True)
    return loss, grads


def init_params(layers, input_shape, rng):
    """Uniform Glorot init: U[-a, a], a = sqrt(6 / (fan_in + fan_out)); zero biases."""
    params = []
    shape = tuple(input_shape)
    for spec in layers:
        shapes = param_shapes(spec)
        p = {}
        if shapes:
            w_shape = shapes["weight"]
            receptive = int(np.prod(w_shape[2:])) if len(w_shape) > 2 else 1
            fan_in, fan_out = w_shape[1] * receptive, w_shape[0] * receptive
            a = math.sqrt(6.0 / (fan_in + fan_out))
            p["weight"] = _to_f32_grid(rng.uniform(-a, a, size=w_shape))
            p["bias"] = np.zeros(shapes["bias"])
        params.append(p)
        shape = layer_output_shape(spec, shape)
    return params


def architecture(arch_id, input_shape, class_count, hidden=64):
    """Layer list for one of the desk-scale archetypes ``mlp2``, ``cnn_s``, ``cnn_m``."""
    c, h, w = input_shape
    if arch_id == "mlp2":
        return [flatten(), dense(c * h * w, hidden), relu(), dense(hidden, class_count)]
    if arch_id == "cnn_s":
        layers = [conv2d(c, 8, 3, 2), relu(), conv2d(8, 16, 3, 2), relu(), flatten()]
    elif arch_id == "cnn_m":
        layers = [conv2d(c, 8, 3, 1), relu(), conv2d(8, 16, 3, 2), relu(),
                  conv2d(16, 16, 3, 2), relu(), flatten()]
    else:
        raise ValueError(f"unknown architecture {arch_id!r}")
    shape = tuple(input_shape)
    for spec in layers:
        shape = layer_output_shape(spec, shape)
    # hidden dense layer: the trigger has to interact with the glyph features
    # non-linearly for many-to-many label maps
    return layers + [dense(shape[0], hidden), relu(), dense(hidden, class_count)]


def build_model(arch_id, input_shape, class_count, seed=0, hidden=64):
    layers = architecture(arch_id, input_shape, class_count, hidden=hidden)
    params = init_params(layers, input_shape, np.random.default_rng(seed))
    return Model(arch_id, class_count, input_shape, layers, params, seed=seed)


def train(model, dataset, cfg, log=None):
    """Minibatch SGD with momentum and step decay (x0.5 every ceil(epochs/3) epochs).

    Returns a new model; the input model is left untouched. The per-epoch mean
    training loss is stored in ``meta["train_loss"]``.
    """
    images = np.asarray(dataset.images)
    labels = np.asarray(dataset.labels, dtype=np.int64)
    if len(labels) == 0:
        raise DatasetError("cannot train on an empty dataset")
    if labels.min() < 0 or labels.max() >= model.class_count:
        raise DatasetError(f"labels must lie in [0, {model.class_count})")
    _check_batch(model, images[:1])

    out = model.copy()
    rng = np.random.default_rng(cfg.seed)
    velocity = [{k: np.zeros_like(v) for k, v in p.items()} for p in out.params]
    step_every = math.ceil(cfg.epochs / 3)
    history = []
    for epoch in range(cfg.epochs):
        lr = cfg.learning_rate * 0.5 ** (epoch // step_every)
        order = rng.permutation(len(labels))
        total = 0.0
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            loss, grads = loss_and_grads(out, images[idx], labels[idx])
            total += loss * len(idx)
            for p, v, g in zip(out.params, velocity, grads):
                for name in p:
                    v[name] *= cfg.momentum
                    v[name] += g[name]
                    p[name] -= lr * v[name]
        history.append(total / len(labels))
        if log is not None:
            log(f"epoch {epoch + 1}/{cfg.epochs} loss {history[-1]:.4f}")
    for p in out.params:
        for name in p:
            p[name] = _to_f32_grid(p[name])
    out.meta = dict(out.meta, train_loss=history,
                    train_config={"epochs": cfg.epochs, "batch_size": cfg.batch_size,
                                  "learning_rate": cfg.learning_rate, "momentum": cfg.momentum,
                                  "seed": cfg.seed})
    return out


def accuracy(model, images, labels):
    return float(np.mean(predict(model, images) == np.asarray(labels)))
