"""A small deterministic feed-forward network with hand-written backprop.

Layers are dense, conv2d (im2col), relu, maxpool and flatten, followed by one
dense classifier head per task. A parametric layer holds either a plain
weight array or a :class:`LowRankWeight` that derives its weight from a frozen
base array and task-private factors; gradients flow to the factors through
the chain rule and the base array is never touched.

Weight layouts: dense ``(out, in)``, conv ``(d, d, out_channels, in_channels)``,
head ``(classes, features)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .perturb import TaskLayerParams, reconstruct_weights


class ShapeError(ValueError):
    pass


class DivergenceError(RuntimeError):
    def __init__(self, epoch: int, loss: float):
        self.epoch = epoch
        super().__init__(f"non-finite loss {loss!r} in epoch {epoch}")


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    in_dim: int = 0
    out_dim: int = 0
    kernel: int = 0
    stride: int = 1
    padding: int = 0

    @property
    def parametric(self) -> bool:
        return self.kind in ("dense", "conv2d")


def dense(in_dim: int, out_dim: int) -> LayerSpec:
    return LayerSpec("dense", in_dim, out_dim)


def conv2d(in_channels: int, out_channels: int, kernel: int, stride: int = 1, padding: int = 0) -> LayerSpec:
    if kernel < 1:
        raise ValueError("kernel size must be >= 1")
    return LayerSpec("conv2d", in_channels, out_channels, kernel, stride, padding)


def relu() -> LayerSpec:
    return LayerSpec("relu")


def maxpool(size: int = 2) -> LayerSpec:
    return LayerSpec("maxpool", kernel=size, stride=size)


def flatten() -> LayerSpec:
    return LayerSpec("flatten")


@dataclass
class Batch:
    inputs: np.ndarray
    labels: np.ndarray

    def __len__(self) -> int:
        return self.labels.shape[0]

    def subset(self, idx) -> "Batch":
        return Batch(self.inputs[idx], self.labels[idx])


@dataclass
class LowRankWeight:
    """Effective weight ``diag(r) base diag(s) + U diag(sigma) V^T``."""

    base: np.ndarray
    params: TaskLayerParams

    @property
    def shape(self):
        return self.base.shape

    def materialize(self) -> np.ndarray:
        return reconstruct_weights(self.base, self.params)


Weight = Union[np.ndarray, LowRankWeight]


@dataclass
class Head:
    weight: np.ndarray
    bias: np.ndarray

    def copy(self) -> "Head":
        return Head(self.weight.copy(), self.bias.copy())


@dataclass
class Network:
    layers: list[LayerSpec]
    input_shape: tuple[int, ...]
    weights: dict[int, Weight]
    biases: dict[int, np.ndarray]
    heads: dict[int, Head] = field(default_factory=dict)

    @property
    def feature_dim(self) -> int:
        return int(np.prod(output_shape(self.layers, self.input_shape)))

    def parametric_layers(self) -> list[int]:
        return [i for i, spec in enumerate(self.layers) if spec.parametric]

    def effective_weight(self, i: int) -> np.ndarray:
        w = self.weights[i]
        return w.materialize() if isinstance(w, LowRankWeight) else w

    def parameters(self, task: int) -> dict[str, np.ndarray]:
        """Trainable arrays (by reference) visible when ``task`` is active."""
        out = {}
        for i in self.parametric_layers():
            w = self.weights[i]
            if isinstance(w, LowRankWeight):
                p = w.params
                out[f"r{i}"] = p.r
                out[f"s{i}"] = p.s
                out[f"U{i}"] = p.low_rank.U
                out[f"sigma{i}"] = p.low_rank.sigma
                out[f"V{i}"] = p.low_rank.V
            else:
                out[f"w{i}"] = w
            out[f"b{i}"] = self.biases[i]
        head = self.heads[task]
        out[f"head{task}.w"] = head.weight
        out[f"head{task}.b"] = head.bias
        return out

    def copy(self) -> "Network":
        """Deep copy of trainable state; frozen base arrays stay shared."""
        weights = {}
        for i, w in self.weights.items():
            if isinstance(w, LowRankWeight):
                weights[i] = LowRankWeight(w.base, w.params.copy())
            else:
                weights[i] = w.copy()
        return Network(
            list(self.layers),
            tuple(self.input_shape),
            weights,
            {i: b.copy() for i, b in self.biases.items()},
            {t: h.copy() for t, h in self.heads.items()},
        )


@dataclass
class Gradients:
    arrays: dict[str, np.ndarray]
    layer_weights: dict[int, np.ndarray]
    layer_norms: dict[int, float]


def output_shape(layers: list[LayerSpec], input_shape) -> tuple[int, ...]:
    shape = tuple(input_shape)
    for i, spec in enumerate(layers):
        if spec.kind == "dense":
            if len(shape) != 1 or shape[0] != spec.in_dim:
                raise ShapeError(f"layer {i}: dense expects ({spec.in_dim},), got {shape}")
            shape = (spec.out_dim,)
        elif spec.kind == "conv2d":
            if len(shape) != 3 or shape[0] != spec.in_dim:
                raise ShapeError(f"layer {i}: conv2d expects {spec.in_dim} channels, got {shape}")
            h = (shape[1] + 2 * spec.padding - spec.kernel) // spec.stride + 1
            w = (shape[2] + 2 * spec.padding - spec.kernel) // spec.stride + 1
            if h < 1 or w < 1:
                raise ShapeError(f"layer {i}: kernel larger than input {shape}")
            shape = (spec.out_dim, h, w)
        elif spec.kind == "maxpool":
            if len(shape) != 3:
                raise ShapeError(f"layer {i}: maxpool expects (C, H, W), got {shape}")
            shape = (shape[0], shape[1] // spec.kernel, shape[2] // spec.kernel)
        elif spec.kind == "flatten":
            shape = (int(np.prod(shape)),)
        elif spec.kind != "relu":
            raise ShapeError(f"layer {i}: unknown kind {spec.kind!r}")
    if len(shape) != 1:
        raise ShapeError(f"network output must be flat before the head, got {shape}")
    return shape


def _glorot(rng, shape, fan_in, fan_out):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def init_network(layers: list[LayerSpec], input_shape, seed: int = 0) -> Network:
    """Fresh network without heads; see :func:`add_head`."""
    output_shape(layers, input_shape)
    rng = np.random.default_rng(seed)
    weights, biases = {}, {}
    for i, spec in enumerate(layers):
        if spec.kind == "dense":
            weights[i] = _glorot(rng, (spec.out_dim, spec.in_dim), spec.in_dim, spec.out_dim)
            biases[i] = np.zeros(spec.out_dim)
        elif spec.kind == "conv2d":
            d2 = spec.kernel * spec.kernel
            shape = (spec.kernel, spec.kernel, spec.out_dim, spec.in_dim)
            weights[i] = _glorot(rng, shape, spec.in_dim * d2, spec.out_dim * d2)
            biases[i] = np.zeros(spec.out_dim)
    return Network(list(layers), tuple(input_shape), weights, biases, {})


def add_head(net: Network, task: int, classes: int, seed: int = 0) -> Head:
    rng = np.random.default_rng(seed)
    f = net.feature_dim
    head = Head(_glorot(rng, (classes, f), f, classes), np.zeros(classes))
    net.heads[task] = head
    return head


# --- layer kernels -------------------------------------------------------

def _im2col(x, d, stride, padding):
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = sliding_window_view(x, (d, d), axis=(2, 3))[:, :, ::stride, ::stride]
    # (N, C, OH, OW, d, d) -> (N, OH, OW, C, d, d)
    return win.transpose(0, 2, 3, 1, 4, 5), x.shape


def _col2im(dcols, padded_shape, d, stride, padding):
    n, oh, ow = dcols.shape[:3]
    dx = np.zeros(padded_shape)
    g = dcols.transpose(0, 3, 1, 2, 4, 5)  # (N, C, OH, OW, d, d)
    for a in range(d):
        for b in range(d):
            dx[:, :, a:a + stride * oh:stride, b:b + stride * ow:stride] += g[..., a, b]
    if padding:
        dx = dx[:, :, padding:-padding, padding:-padding]
    return dx


def _conv_forward(x, W, b, spec):
    d, _, J, I = W.shape
    cols, padded = _im2col(x, d, spec.stride, spec.padding)
    n, oh, ow = cols.shape[:3]
    flat = cols.reshape(n * oh * ow, I * d * d)
    W2 = W.transpose(2, 3, 0, 1).reshape(J, I * d * d)
    out = (flat @ W2.T + b).reshape(n, oh, ow, J).transpose(0, 3, 1, 2)
    return out, (flat, padded, (n, oh, ow))


def _conv_backward(dout, W, cache, spec):
    flat, padded, (n, oh, ow) = cache
    d, _, J, I = W.shape
    g = dout.transpose(0, 2, 3, 1).reshape(n * oh * ow, J)
    W2 = W.transpose(2, 3, 0, 1).reshape(J, I * d * d)
    dW = (g.T @ flat).reshape(J, I, d, d).transpose(2, 3, 0, 1)
    db = g.sum(axis=0)
    dcols = (g @ W2).reshape(n, oh, ow, I, d, d)
    return _col2im(dcols, padded, d, spec.stride, spec.padding), dW, db


def _pool_forward(x, p):
    n, c, h, w = x.shape
    ho, wo = h // p, w // p
    x = x[:, :, :ho * p, :wo * p]
    blocks = x.reshape(n, c, ho, p, wo, p).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, p * p)
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]
    return out, (arg, (n, c, h, w))


def _pool_backward(dout, cache, p):
    arg, (n, c, h, w) = cache
    ho, wo = dout.shape[2:]
    blocks = np.zeros((n, c, ho, wo, p * p))
    np.put_along_axis(blocks, arg[..., None], dout[..., None], axis=-1)
    dx = np.zeros((n, c, h, w))
    dx[:, :, :ho * p, :wo * p] = (
        blocks.reshape(n, c, ho, wo, p, p).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho * p, wo * p)
    )
    return dx


# --- forward / backward --------------------------------------------------

def _run_forward(net: Network, task: int, inputs, keep_cache: bool):
    if task not in net.heads:
        raise KeyError(f"no head for task {task}")
    x = np.asarray(inputs, dtype=np.float64).reshape((-1,) + tuple(net.input_shape))
    caches, weights = [], {}
    for i, spec in enumerate(net.layers):
        if spec.kind == "dense":
            W = weights[i] = net.effective_weight(i)
            caches.append(x)
            x = x @ W.T + net.biases[i]
        elif spec.kind == "conv2d":
            W = weights[i] = net.effective_weight(i)
            x, cache = _conv_forward(x, W, net.biases[i], spec)
            caches.append(cache)
        elif spec.kind == "relu":
            caches.append(x > 0)
            x = np.maximum(x, 0.0)
        elif spec.kind == "maxpool":
            x, cache = _pool_forward(x, spec.kernel)
            caches.append(cache)
        elif spec.kind == "flatten":
            caches.append(x.shape)
            x = x.reshape(x.shape[0], -1)
        if not keep_cache:
            caches.clear()
    head = net.heads[task]
    if x.ndim != 2 or x.shape[1] != head.weight.shape[1]:
        raise ShapeError(f"head expects {head.weight.shape[1]} features, got {x.shape[1:]}")
    return x @ head.weight.T + head.bias, x, caches, weights


def forward(net: Network, task: int, inputs) -> np.ndarray:
    """Logits ``(N, classes)`` for the given task head."""
    if isinstance(inputs, Batch):
        inputs = inputs.inputs
    return _run_forward(net, task, inputs, keep_cache=False)[0]


def _log_softmax(logits):
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def loss(logits, labels) -> float:
    """Mean softmax cross-entropy."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels)
    logp = _log_softmax(logits)
    return float(-logp[np.arange(labels.shape[0]), labels].mean())


def low_rank_grads(G: np.ndarray, w: LowRankWeight, i: int) -> dict[str, np.ndarray]:
    """Chain rule from the effective-weight gradient ``G`` to the factors."""
    p, base = w.params, w.base
    if base.ndim == 2:
        GW = G * base
        gr = GW @ p.s
        gs = p.r @ GW
        gB = G
    else:
        gr = np.einsum("abji,abji,i->j", G, base, p.s)
        gs = np.einsum("abji,abji,j->i", G, base, p.r)
        gB = G.sum(axis=(0, 1))
    U, sig, V = p.low_rank.U, p.low_rank.sigma, p.low_rank.V
    return {
        f"r{i}": gr,
        f"s{i}": gs,
        f"U{i}": (gB @ V) * sig,
        f"sigma{i}": np.einsum("ji,jk,ik->k", gB, U, V),
        f"V{i}": (gB.T @ U) * sig,
    }


def backward(net: Network, task: int, b: Batch) -> tuple[float, Gradients]:
    """Mean loss over ``b`` and its gradient w.r.t. every trainable array."""
    logits, feats, caches, weights = _run_forward(net, task, b.inputs, keep_cache=True)
    labels = np.asarray(b.labels)
    n = labels.shape[0]
    logp = _log_softmax(logits)
    value = float(-logp[np.arange(n), labels].mean())
    dlogits = np.exp(logp)
    dlogits[np.arange(n), labels] -= 1.0
    dlogits /= n

    head = net.heads[task]
    arrays = {
        f"head{task}.w": dlogits.T @ feats,
        f"head{task}.b": dlogits.sum(axis=0),
    }
    layer_weights = {}
    dx = dlogits @ head.weight
    for i in range(len(net.layers) - 1, -1, -1):
        spec, cache = net.layers[i], caches[i]
        if spec.kind == "dense":
            W = weights[i]
            layer_weights[i] = dx.T @ cache
            arrays[f"b{i}"] = dx.sum(axis=0)
            dx = dx @ W
        elif spec.kind == "conv2d":
            dx, dW, db = _conv_backward(dx, weights[i], cache, spec)
            layer_weights[i] = dW
            arrays[f"b{i}"] = db
        elif spec.kind == "relu":
            dx = dx * cache
        elif spec.kind == "maxpool":
            dx = _pool_backward(dx, cache, spec.kernel)
        elif spec.kind == "flatten":
            dx = dx.reshape(cache)
    for i, G in layer_weights.items():
        w = net.weights[i]
        if isinstance(w, LowRankWeight):
            arrays.update(low_rank_grads(G, w, i))
        else:
            arrays[f"w{i}"] = G
    norms = {i: float(np.linalg.norm(G.ravel())) for i, G in layer_weights.items()}
    return value, Gradients(arrays, layer_weights, norms)


def mean_layer_gradients(net: Network, task: int, data: Batch, batch_size: int = 512) -> dict[int, np.ndarray]:
    """Gradient of the full-dataset mean loss w.r.t. each effective layer weight."""
    n = len(data)
    total: dict[int, np.ndarray] = {}
    for start in range(0, n, batch_size):
        part = data.subset(slice(start, start + batch_size))
        _, grads = backward(net, task, part)
        w = len(part) / n
        for i, G in grads.layer_weights.items():
            total[i] = total[i] + w * G if i in total else w * G
    return total


def predict(net: Network, task: int, inputs, batch_size: int = 1024) -> np.ndarray:
    inputs = np.asarray(inputs)
    out = [forward(net, task, inputs[s:s + batch_size]).argmax(axis=1)
           for s in range(0, inputs.shape[0], batch_size)]
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def accuracy(net: Network, task: int, b: Batch) -> float:
    if len(b) == 0:
        return 0.0
    return float(np.mean(predict(net, task, b.inputs) == b.labels))


Regularizer = Callable[[Network], tuple[float, dict[str, np.ndarray]]]


def train(
    net: Network,
    task: int,
    data: Batch,
    epochs: int,
    lr: float,
    batch_size: int,
    reg: Optional[Regularizer] = None,
    seed: int = 0,
    momentum: float = 0.0,
    on_epoch: Optional[Callable[[int, float], None]] = None,
) -> Network:
    """Minibatch SGD on ``net`` in place; returns ``net``.

    Shuffling uses its own generator seeded by ``seed`` so two calls with the
    same arguments produce identical weights.
    """
    if epochs < 0:
        raise ValueError("epochs must be >= 0")
    rng = np.random.default_rng(seed)
    params = net.parameters(task)
    velocity = {k: np.zeros_like(v) for k, v in params.items()} if momentum else None
    n = len(data)
    for epoch in range(epochs):
        order = rng.permutation(n)
        running, seen = 0.0, 0
        for start in range(0, n, batch_size):
            part = data.subset(order[start:start + batch_size])
            value, grads = backward(net, task, part)
            arrays = grads.arrays
            if reg is not None:
                reg_value, reg_grads = reg(net)
                value += reg_value
                arrays = dict(arrays)
                for k, g in reg_grads.items():
                    arrays[k] = arrays[k] + g
            if not np.isfinite(value):
                raise DivergenceError(epoch, value)
            running += value * len(part)
            seen += len(part)
            for k, p in params.items():
                g = arrays[k]
                if velocity is not None:
                    v = velocity[k]
                    v *= momentum
                    v += g
                    g = v
                p -= lr * g
        if on_epoch is not None:
            on_epoch(epoch, running / max(seen, 1))
    return net
