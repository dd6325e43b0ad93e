"""Network layers: linear, conv2d (im2col), batchnorm2d, RePU, maxpool2d, flatten.

Forward is implemented for every kind; backward for every kind the
supervised head can contain. conv2d has no backward on purpose: it is the
first layer of the network, trained by a local rule and then frozen, so a
gradient through it is a configuration mistake that should fail loudly.

Conventions: activations are (batch, channels, height, width) or
(batch, features); convolution is "valid" (no padding); all parameters are
float64. Batch statistics are biased (divide by N), and the running-stat
update is ``running = (1 - momentum) * running + momentum * batch``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import parallel
from .errors import (
    ConfigError,
    DimensionError,
    GeometryError,
    UnsupportedOperationError,
)
from .tensorcore import DTYPE, RngState, matmul

KINDS = ("linear", "conv2d", "batchnorm2d", "repu", "maxpool2d", "flatten")

# Per-sample work (patch copies, convolution blocks, elementwise layers)
# is decomposed over fixed-size image blocks. Boundaries depend only on
# the batch size and blocks write disjoint output slices, so results are
# bit-identical for any worker count.
_PATCH_SHARD_IMAGES = 64
_BLOCK_IMAGES = 32


def _map_batch_blocks(fn, n: int) -> list:
    """Run fn(start, stop) over fixed image blocks, in parallel when the
    batch spans several blocks; returns per-block results in order."""
    return parallel.map_shards(lambda r: fn(r[0], r[1]),
                               parallel.shard_ranges(n, _BLOCK_IMAGES))


def conv_output_extent(extent: int, kernel: int, stride: int) -> int:
    """Spatial output extent of a valid convolution/pool window sweep.

    Shared by extract_patches, conv2d, and maxpool2d so their geometries
    can never disagree.
    """
    if kernel > extent:
        raise GeometryError(
            f"kernel extent {kernel} exceeds input extent {extent}"
        )
    if stride < 1:
        raise GeometryError(f"stride must be >= 1, got {stride}")
    return (extent - kernel) // stride + 1


@dataclass
class LayerNode:
    """One network layer: kind, parameters, hyperparameters, freeze flag."""

    name: str
    kind: str
    params: dict[str, np.ndarray] = field(default_factory=dict)
    hyper: dict[str, Any] = field(default_factory=dict)
    frozen: bool = False

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown layer kind '{self.kind}' for '{self.name}'")


def linear(name: str, in_features: int, out_features: int, *,
           bias: bool = True, rng: RngState | None = None,
           scale: float = 1.0) -> LayerNode:
    """Dense layer; weight is (out, in). ``scale`` multiplies the init."""
    if rng is None:
        weight = np.zeros((out_features, in_features), dtype=DTYPE)
    else:
        weight = rng.normal((out_features, in_features)) * scale
    params = {"weight": weight}
    if bias:
        params["bias"] = np.zeros(out_features, dtype=DTYPE)
    return LayerNode(name, "linear", params, {})


def conv2d(name: str, in_channels: int, filters: int, kernel: tuple[int, int],
           stride: int = 1, *, rng: RngState | None = None) -> LayerNode:
    """Valid (unpadded) convolution; weight is (filters, c, kh, kw), no bias."""
    kh, kw = kernel
    if kh < 1 or kw < 1:
        raise ConfigError(f"conv kernel must be positive, got {kernel}")
    if stride < 1:
        raise ConfigError(f"conv stride must be >= 1, got {stride}")
    shape = (filters, in_channels, kh, kw)
    weight = rng.normal(shape) if rng is not None else np.zeros(shape, dtype=DTYPE)
    return LayerNode(name, "conv2d", {"weight": weight},
                     {"stride": stride, "kernel": (kh, kw)})


def batchnorm2d(name: str, channels: int, *, eps: float = 1e-5,
                momentum: float = 0.1) -> LayerNode:
    params = {
        "gamma": np.ones(channels, dtype=DTYPE),
        "beta": np.zeros(channels, dtype=DTYPE),
        "running_mean": np.zeros(channels, dtype=DTYPE),
        "running_var": np.ones(channels, dtype=DTYPE),
    }
    return LayerNode(name, "batchnorm2d", params,
                     {"eps": eps, "momentum": momentum})


def repu(name: str, power: float = 1) -> LayerNode:
    """Rectified power unit, max(0,x)**power; power 1 is ReLU."""
    if power < 1:
        raise ConfigError(f"repu power must be >= 1, got {power}")
    return LayerNode(name, "repu", {}, {"power": power})


def maxpool2d(name: str, kernel: tuple[int, int], stride: int) -> LayerNode:
    kh, kw = kernel
    if kh < 1 or kw < 1 or stride < 1:
        raise ConfigError(f"bad pooling geometry kernel={kernel} stride={stride}")
    return LayerNode(name, "maxpool2d", {}, {"kernel": (kh, kw), "stride": stride})


def flatten(name: str) -> LayerNode:
    return LayerNode(name, "flatten", {}, {})


def output_shape(layer: LayerNode, in_shape: tuple[int, ...]) -> tuple[int, ...]:
    """Per-sample output shape for a per-sample input shape."""
    kind = layer.kind
    if kind == "linear":
        out, inp = layer.params["weight"].shape
        feats = int(np.prod(in_shape))
        if feats != inp:
            raise DimensionError(
                f"layer '{layer.name}' expects {inp} input features, "
                f"got {in_shape} ({feats})"
            )
        return (out,)
    if kind == "conv2d":
        if len(in_shape) != 3:
            raise DimensionError(
                f"layer '{layer.name}' expects (c,h,w) input, got {in_shape}"
            )
        c, h, w = in_shape
        f, wc, kh, kw = layer.params["weight"].shape
        if wc != c:
            raise DimensionError(
                f"layer '{layer.name}' expects {wc} channels, got {c}"
            )
        s = layer.hyper["stride"]
        oh = conv_output_extent(h, kh, s)
        ow = conv_output_extent(w, kw, s)
        if (h - kh) % s or (w - kw) % s:
            raise GeometryError(
                f"layer '{layer.name}': input {h}x{w} is not exactly covered "
                f"by kernel {kh}x{kw} stride {s}"
            )
        return (f, oh, ow)
    if kind == "batchnorm2d":
        if len(in_shape) != 3 or in_shape[0] != len(layer.params["gamma"]):
            raise DimensionError(
                f"layer '{layer.name}' expects ({len(layer.params['gamma'])},h,w) "
                f"input, got {in_shape}"
            )
        return in_shape
    if kind == "repu":
        return in_shape
    if kind == "maxpool2d":
        if len(in_shape) != 3:
            raise DimensionError(
                f"layer '{layer.name}' expects (c,h,w) input, got {in_shape}"
            )
        c, h, w = in_shape
        kh, kw = layer.hyper["kernel"]
        s = layer.hyper["stride"]
        return (c, conv_output_extent(h, kh, s), conv_output_extent(w, kw, s))
    if kind == "flatten":
        return (int(np.prod(in_shape)),)
    raise ConfigError(f"unknown layer kind '{kind}'")


class Model:
    """Ordered layers with validated geometry and a class count."""

    def __init__(self, layers: list[LayerNode], input_shape: tuple[int, ...],
                 num_classes: int):
        names = [l.name for l in layers]
        if len(set(names)) != len(names):
            raise ConfigError(f"duplicate layer names in {names}")
        self.layers = list(layers)
        self.input_shape = tuple(input_shape)
        self.num_classes = num_classes
        self.shapes = [self.input_shape]
        for layer in self.layers:
            self.shapes.append(output_shape(layer, self.shapes[-1]))

    def index(self, name: str) -> int:
        for i, layer in enumerate(self.layers):
            if layer.name == name:
                return i
        raise ConfigError(f"no layer named '{name}'")

    def layer(self, name: str) -> LayerNode:
        return self.layers[self.index(name)]

    def param_items(self):
        """(qualified name, tensor) pairs in layer order."""
        for layer in self.layers:
            for pname, tensor in layer.params.items():
                yield f"{layer.name}.{pname}", tensor

    def snapshot(self) -> dict[str, np.ndarray]:
        return {name: tensor.copy() for name, tensor in self.param_items()}

    def restore(self, snap: dict[str, np.ndarray]) -> None:
        for name, tensor in self.param_items():
            np.copyto(tensor, snap[name])


def extract_patches(images: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    """All kernel-sized windows as rows: (b * positions, c * kh * kw).

    Rows are ordered batch-major, then raster-scan over window positions;
    each row flattens its window in (channel, row, column) order, matching
    a (filters, c, kh, kw) weight tensor reshaped to (filters, -1).
    """
    images = np.asarray(images)
    if images.ndim != 4:
        raise DimensionError(f"expected (b,c,h,w) images, got {images.shape}")
    b, c, h, w = images.shape
    oh = conv_output_extent(h, kh, stride)
    ow = conv_output_extent(w, kw, stride)

    def block(rng_pair):
        start, stop = rng_pair
        win = sliding_window_view(images[start:stop], (kh, kw), axis=(2, 3))
        win = win[:, :, ::stride, ::stride]
        # (n,c,oh,ow,kh,kw) -> (n,oh,ow,c,kh,kw) -> rows
        return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(
            (stop - start) * oh * ow, c * kh * kw
        )

    ranges = parallel.shard_ranges(b, _PATCH_SHARD_IMAGES)
    if len(ranges) <= 1:
        return block((0, b))
    return np.concatenate(parallel.map_shards(block, ranges), axis=0)


def _forward_linear(layer, x, mode):
    w = layer.params["weight"]
    flat = x.reshape(x.shape[0], -1)
    if flat.shape[1] != w.shape[1]:
        raise DimensionError(
            f"layer '{layer.name}': input {x.shape} does not match weight "
            f"{w.shape}"
        )
    out = matmul(flat, w.T)
    if "bias" in layer.params:
        out = out + layer.params["bias"]
    cache = {"input": flat, "input_shape": x.shape} if mode == "train" else None
    return out, cache


def _forward_conv2d(layer, x, mode):
    w = layer.params["weight"]
    f, c, kh, kw = w.shape
    if x.ndim != 4 or x.shape[1] != c:
        raise DimensionError(
            f"layer '{layer.name}': input {x.shape} does not match weight "
            f"{w.shape}"
        )
    stride = layer.hyper["stride"]
    b, _, h, ww = x.shape
    oh = conv_output_extent(h, kh, stride)
    ow = conv_output_extent(ww, kw, stride)
    w2_t = np.ascontiguousarray(w.reshape(f, -1).T)
    out = np.empty((b, f, oh, ow), dtype=DTYPE)

    # im2col GEMM per image block; the patch copy, product, and layout
    # transpose all happen inside the block task
    def block(start, stop):
        cols = extract_patches(x[start:stop], kh, kw, stride)
        prod = (cols @ w2_t).reshape(stop - start, oh, ow, f)
        out[start:stop] = prod.transpose(0, 3, 1, 2)

    _map_batch_blocks(block, b)
    return out, None


def _forward_batchnorm2d(layer, x, mode):
    gamma = layer.params["gamma"]
    if x.ndim != 4 or x.shape[1] != len(gamma):
        raise DimensionError(
            f"layer '{layer.name}': input {x.shape} does not match "
            f"{len(gamma)} channels"
        )
    beta = layer.params["beta"]
    eps = layer.hyper["eps"]
    if mode == "train":
        m = x.shape[0] * x.shape[2] * x.shape[3]
        # per-block partial sums combined in block order (full-batch stats
        # regardless of sharding)
        partials = _map_batch_blocks(
            lambda s, e: (np.einsum("bchw->c", x[s:e]),
                          np.einsum("bchw,bchw->c", x[s:e], x[s:e])),
            x.shape[0])
        mean = sum(p[0] for p in partials) / m
        # biased variance as E[x^2] - mean^2, clipped against cancellation
        var = sum(p[1] for p in partials) / m - mean * mean
        np.maximum(var, 0.0, out=var)
        inv_std = 1.0 / np.sqrt(var + eps)
        momentum = layer.hyper["momentum"]
        rm = layer.params["running_mean"]
        rv = layer.params["running_var"]
        rm *= 1.0 - momentum
        rm += momentum * mean
        rv *= 1.0 - momentum
        rv += momentum * var
        xhat = np.empty_like(x)
        out = np.empty_like(x)
        mean_b = mean[None, :, None, None]
        inv_b = inv_std[None, :, None, None]
        gamma_b = gamma[None, :, None, None]
        beta_b = beta[None, :, None, None]

        def normalize(s, e):
            block = xhat[s:e]
            np.subtract(x[s:e], mean_b, out=block)
            block *= inv_b
            np.multiply(block, gamma_b, out=out[s:e])
            out[s:e] += beta_b

        _map_batch_blocks(normalize, x.shape[0])
        return out, {"xhat": xhat, "inv_std": inv_std}
    scale = gamma / np.sqrt(layer.params["running_var"] + eps)
    shift = beta - layer.params["running_mean"] * scale
    scale_b = scale[None, :, None, None]
    shift_b = shift[None, :, None, None]
    out = np.empty_like(x)

    def affine(s, e):
        np.multiply(x[s:e], scale_b, out=out[s:e])
        out[s:e] += shift_b

    _map_batch_blocks(affine, x.shape[0])
    return out, None


def _forward_repu(layer, x, mode):
    n = layer.hyper["power"]
    out = np.empty_like(x)

    def rectify(s, e):
        np.maximum(x[s:e], 0.0, out=out[s:e])
        if n != 1:
            np.power(out[s:e], n, out=out[s:e])

    _map_batch_blocks(rectify, x.shape[0])
    cache = {"input": x} if mode == "train" else None
    return out, cache


def _window_slice(x, dy, dx, oh, ow, stride):
    """Strided view of one in-window offset across all window positions."""
    return x[:, :, dy:dy + (oh - 1) * stride + 1:stride,
             dx:dx + (ow - 1) * stride + 1:stride]


def _forward_maxpool2d(layer, x, mode):
    if x.ndim != 4:
        raise DimensionError(f"layer '{layer.name}': expected 4-D input, "
                             f"got {x.shape}")
    kh, kw = layer.hyper["kernel"]
    stride = layer.hyper["stride"]
    h, w = x.shape[2], x.shape[3]
    oh = conv_output_extent(h, kh, stride)
    ow = conv_output_extent(w, kw, stride)
    b, c = x.shape[0], x.shape[1]
    out = np.empty((b, c, oh, ow), dtype=x.dtype)
    arg = np.zeros((b, c, oh, ow), dtype=np.int64) if mode == "train" else None

    # running max over the kh*kw in-window offsets; strict > keeps the
    # first (raster-order) maximum, matching argmax's tie rule
    def pool(s, e):
        xb = x[s:e]
        ob = out[s:e]
        ob[:] = _window_slice(xb, 0, 0, oh, ow, stride)
        ab = arg[s:e] if arg is not None else None
        for idx in range(1, kh * kw):
            cand = _window_slice(xb, idx // kw, idx % kw, oh, ow, stride)
            better = cand > ob
            np.copyto(ob, cand, where=better)
            if ab is not None:
                ab[better] = idx

    _map_batch_blocks(pool, b)
    cache = None
    if mode == "train":
        cache = {"argmax": arg, "input_shape": x.shape}
    return out, cache


def _forward_flatten(layer, x, mode):
    out = x.reshape(x.shape[0], -1)
    cache = {"input_shape": x.shape} if mode == "train" else None
    return out, cache


_FORWARD = {
    "linear": _forward_linear,
    "conv2d": _forward_conv2d,
    "batchnorm2d": _forward_batchnorm2d,
    "repu": _forward_repu,
    "maxpool2d": _forward_maxpool2d,
    "flatten": _forward_flatten,
}


def forward(layer: LayerNode, x: np.ndarray, mode: str = "eval"):
    """Run one layer; returns (output, cache). Caches exist in train mode only."""
    if mode not in ("train", "eval"):
        raise ConfigError(f"mode must be 'train' or 'eval', got {mode!r}")
    return _FORWARD[layer.kind](layer, np.asarray(x), mode)


def _backward_linear(layer, cache, grad_out):
    x = cache["input"]
    w = layer.params["weight"]
    grads = {"weight": matmul(grad_out.T, x)}
    if "bias" in layer.params:
        grads["bias"] = grad_out.sum(axis=0)
    return matmul(grad_out, w).reshape(cache["input_shape"]), grads


def _backward_batchnorm2d(layer, cache, grad_out):
    xhat = cache["xhat"]
    inv_std = cache["inv_std"]
    gamma = layer.params["gamma"]
    b = grad_out.shape[0]
    m = b * grad_out.shape[2] * grad_out.shape[3]
    partials = _map_batch_blocks(
        lambda s, e: (np.einsum("bchw,bchw->c", grad_out[s:e], xhat[s:e]),
                      np.einsum("bchw->c", grad_out[s:e])),
        b)
    dgamma = sum(p[0] for p in partials)
    dbeta = sum(p[1] for p in partials)
    # full chain rule through the batch mean and variance; with
    # dxhat = gamma * grad_out, the needed reductions reduce to
    # sum(dxhat) = gamma * dbeta and sum(dxhat * xhat) = gamma * dgamma
    dx = np.empty_like(grad_out)
    mean_term = (dbeta / m)[None, :, None, None]
    var_term = (dgamma / m)[None, :, None, None]
    scale_term = (gamma * inv_std)[None, :, None, None]

    def backprop(s, e):
        block = dx[s:e]
        np.subtract(grad_out[s:e], mean_term, out=block)
        block -= xhat[s:e] * var_term
        block *= scale_term

    _map_batch_blocks(backprop, b)
    return dx, {"gamma": dgamma, "beta": dbeta}


def _backward_repu(layer, cache, grad_out):
    x = cache["input"]
    n = layer.hyper["power"]
    dx = np.empty_like(grad_out)

    def backprop(s, e):
        if n == 1:
            np.multiply(grad_out[s:e], x[s:e] > 0, out=dx[s:e])
        else:
            slope = np.where(x[s:e] > 0,
                             n * np.maximum(x[s:e], 0.0) ** (n - 1), 0.0)
            np.multiply(grad_out[s:e], slope, out=dx[s:e])

    _map_batch_blocks(backprop, x.shape[0])
    return dx, {}


def _backward_maxpool2d(layer, cache, grad_out):
    kh, kw = layer.hyper["kernel"]
    stride = layer.hyper["stride"]
    arg = cache["argmax"]
    oh, ow = arg.shape[2], arg.shape[3]
    grad_in = np.zeros(cache["input_shape"], dtype=grad_out.dtype)

    # route each window's gradient to its argmax offset; for a fixed offset
    # all windows touch distinct input cells, and overlapping windows with
    # different offsets accumulate through +=
    def scatter(s, e):
        gb = grad_in[s:e]
        for idx in range(kh * kw):
            target = _window_slice(gb, idx // kw, idx % kw, oh, ow, stride)
            target += np.where(arg[s:e] == idx, grad_out[s:e], 0.0)

    _map_batch_blocks(scatter, grad_out.shape[0])
    return grad_in, {}


def _backward_flatten(layer, cache, grad_out):
    return grad_out.reshape(cache["input_shape"]), {}


def _backward_conv2d(layer, cache, grad_out):
    raise UnsupportedOperationError(
        f"layer '{layer.name}': conv2d has no backward pass; convolutions "
        f"are trained by a local rule and must stay outside the supervised "
        f"head"
    )


_BACKWARD = {
    "linear": _backward_linear,
    "conv2d": _backward_conv2d,
    "batchnorm2d": _backward_batchnorm2d,
    "repu": _backward_repu,
    "maxpool2d": _backward_maxpool2d,
    "flatten": _backward_flatten,
}


def backward(layer: LayerNode, cache, grad_out: np.ndarray):
    """Gradients from a train-mode cache: returns (grad_in, param_grads)."""
    if layer.kind != "conv2d" and cache is None:
        raise ConfigError(
            f"layer '{layer.name}': backward requires a train-mode forward cache"
        )
    return _BACKWARD[layer.kind](layer, cache, np.asarray(grad_out))
