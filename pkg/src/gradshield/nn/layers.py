"""Layer kinds with explicit forward and backward passes.

Each kind is a stateless object; parameters, buffers and configuration are
passed in. ``forward`` returns ``(output, cache)`` and ``backward`` consumes
the cache to return ``(grad_input, param_grads)``. All arrays are float64 and
carry a leading batch axis.
"""

from __future__ import annotations

import math

import numpy as np

from .. import _kernels
from ..errors import ShapeError


class LayerKind:
    name = ""
    params: tuple[str, ...] = ()
    buffers: tuple[str, ...] = ()

    def validate(self, cfg: dict) -> None:
        pass

    def output_shape(self, cfg: dict, in_shape: tuple[int, ...]) -> tuple[int, ...]:
        return in_shape

    def param_shapes(self, cfg: dict, in_shape: tuple[int, ...]) -> dict[str, tuple[int, ...]]:
        return {}

    def buffer_shapes(self, cfg: dict, in_shape: tuple[int, ...]) -> dict[str, tuple[int, ...]]:
        return {}

    def init(self, cfg, in_shape, rng) -> tuple[dict, dict]:
        return {}, {}

    def forward(self, cfg, params, buffers, x, train):
        raise NotImplementedError

    def backward(self, cfg, params, cache, grad_out):
        raise NotImplementedError


def _uniform(rng, bound, shape):
    return rng.uniform(-bound, bound, size=shape)


class Linear(LayerKind):
    name = "Linear"
    params = ("weight", "bias")

    def validate(self, cfg):
        if cfg["in_features"] < 1 or cfg["out_features"] < 1:
            raise ValueError("Linear needs positive in_features/out_features")

    def output_shape(self, cfg, in_shape):
        if in_shape != (cfg["in_features"],):
            raise ShapeError(f"expected input ({cfg['in_features']},), got {in_shape}")
        return (cfg["out_features"],)

    def param_shapes(self, cfg, in_shape):
        return {"weight": (cfg["out_features"], cfg["in_features"]), "bias": (cfg["out_features"],)}

    def init(self, cfg, in_shape, rng):
        bound = 1.0 / math.sqrt(cfg["in_features"])
        return {
            "weight": _uniform(rng, bound, (cfg["out_features"], cfg["in_features"])),
            "bias": _uniform(rng, bound, (cfg["out_features"],)),
        }, {}

    def forward(self, cfg, params, buffers, x, train):
        return x @ params["weight"].T + params["bias"], x

    def backward(self, cfg, params, x, grad_out):
        grads = {"weight": grad_out.T @ x, "bias": grad_out.sum(axis=0)}
        return grad_out @ params["weight"], grads


class Conv2d(LayerKind):
    name = "Conv2d"
    params = ("weight", "bias")

    @staticmethod
    def _geometry(cfg):
        k = cfg["kernel_size"]
        stride = cfg.get("stride", 1)
        padding = cfg.get("padding")
        if padding is None:
            padding = k // 2
        return k, stride, padding

    def validate(self, cfg):
        k, stride, padding = self._geometry(cfg)
        if k < 1 or stride < 1 or padding < 0:
            raise ValueError("Conv2d needs kernel_size >= 1, stride >= 1, padding >= 0")

    def output_shape(self, cfg, in_shape):
        if len(in_shape) != 3 or in_shape[0] != cfg["in_channels"]:
            raise ShapeError(f"expected input ({cfg['in_channels']}, H, W), got {in_shape}")
        k, stride, padding = self._geometry(cfg)
        ho = (in_shape[1] + 2 * padding - k) // stride + 1
        wo = (in_shape[2] + 2 * padding - k) // stride + 1
        if ho < 1 or wo < 1:
            raise ShapeError(f"input {in_shape} too small for kernel {k}")
        return (cfg["out_channels"], ho, wo)

    def param_shapes(self, cfg, in_shape):
        k = cfg["kernel_size"]
        return {
            "weight": (cfg["out_channels"], cfg["in_channels"], k, k),
            "bias": (cfg["out_channels"],),
        }

    def init(self, cfg, in_shape, rng):
        shapes = self.param_shapes(cfg, in_shape)
        fan_in = cfg["in_channels"] * cfg["kernel_size"] ** 2
        bound = 1.0 / math.sqrt(fan_in)
        return {k: _uniform(rng, bound, s) for k, s in shapes.items()}, {}

    def forward(self, cfg, params, buffers, x, train):
        _, stride, padding = self._geometry(cfg)
        y = _kernels.conv2d_forward(x, params["weight"], params["bias"], stride, padding)
        return y, x

    def backward(self, cfg, params, x, grad_out):
        _, stride, padding = self._geometry(cfg)
        gx, gw, gb = _kernels.conv2d_backward(x, params["weight"], grad_out, stride, padding)
        return gx, {"weight": gw, "bias": gb}


class ReLU(LayerKind):
    name = "ReLU"

    def forward(self, cfg, params, buffers, x, train):
        mask = x > 0
        return np.where(mask, x, 0.0), mask

    def backward(self, cfg, params, mask, grad_out):
        return np.where(mask, grad_out, 0.0), {}


class Flatten(LayerKind):
    name = "Flatten"

    def output_shape(self, cfg, in_shape):
        return (int(np.prod(in_shape)),)

    def forward(self, cfg, params, buffers, x, train):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, cfg, params, shape, grad_out):
        return grad_out.reshape(shape), {}


class Unflatten(LayerKind):
    """Inverse of Flatten; used by the inserted-layer attack variants."""

    name = "Unflatten"

    def output_shape(self, cfg, in_shape):
        shape = tuple(cfg["shape"])
        if int(np.prod(shape)) != int(np.prod(in_shape)):
            raise ShapeError(f"cannot reshape {in_shape} to {shape}")
        return shape

    def forward(self, cfg, params, buffers, x, train):
        return x.reshape((x.shape[0], *cfg["shape"])), x.shape

    def backward(self, cfg, params, shape, grad_out):
        return grad_out.reshape(shape), {}


class Softmax(LayerKind):
    """Softmax over the last axis."""

    name = "Softmax"

    def forward(self, cfg, params, buffers, x, train):
        y = softmax(x)
        return y, y

    def backward(self, cfg, params, y, grad_out):
        return y * (grad_out - (grad_out * y).sum(axis=-1, keepdims=True)), {}


def softmax(x):
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _normalize(x, axes, eps):
    mean = x.mean(axis=axes, keepdims=True)
    var = ((x - mean) ** 2).mean(axis=axes, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    return (x - mean) * inv_std, mean, var, inv_std


def _normalize_backward(grad_xhat, xhat, inv_std, axes):
    """Gradient through ``xhat = (x - mean(x)) / sqrt(var(x) + eps)`` over ``axes``."""
    n = np.prod([xhat.shape[a] for a in axes])
    sum_g = grad_xhat.sum(axis=axes, keepdims=True)
    sum_gx = (grad_xhat * xhat).sum(axis=axes, keepdims=True)
    return inv_std / n * (n * grad_xhat - sum_g - xhat * sum_gx)


def _channel_view(v, ndim):
    # per-channel vector -> broadcastable against [B, C, ...]
    return v.reshape((1, -1) + (1,) * (ndim - 2))


class BatchNorm2d(LayerKind):
    """Batch normalization over the batch and spatial axes, per channel.

    Accepts ``[B, C, H, W]`` or ``[B, C]`` inputs. In train mode the batch
    statistics are used (biased variance) and the running statistics are
    refreshed with ``momentum``; eval mode uses the running statistics.
    """

    name = "BatchNorm2d"
    params = ("gamma", "beta")
    buffers = ("running_mean", "running_var")

    def validate(self, cfg):
        if cfg.get("eps", 1e-5) <= 0:
            raise ValueError("BatchNorm2d eps must be > 0")

    def output_shape(self, cfg, in_shape):
        if len(in_shape) not in (1, 3) or in_shape[0] != cfg["num_features"]:
            raise ShapeError(f"expected {cfg['num_features']} channels, got input {in_shape}")
        return in_shape

    def param_shapes(self, cfg, in_shape):
        c = cfg["num_features"]
        return {"gamma": (c,), "beta": (c,)}

    def buffer_shapes(self, cfg, in_shape):
        c = cfg["num_features"]
        return {"running_mean": (c,), "running_var": (c,)}

    def init(self, cfg, in_shape, rng):
        c = cfg["num_features"]
        return (
            {"gamma": np.ones(c), "beta": np.zeros(c)},
            {"running_mean": np.zeros(c), "running_var": np.ones(c)},
        )

    def forward(self, cfg, params, buffers, x, train):
        eps = cfg.get("eps", 1e-5)
        axes = (0,) + tuple(range(2, x.ndim))
        gamma = _channel_view(params["gamma"], x.ndim)
        beta = _channel_view(params["beta"], x.ndim)
        if train:
            xhat, mean, var, inv_std = _normalize(x, axes, eps)
            m = cfg.get("momentum", 0.1)
            n = x.size // x.shape[1]
            unbiased = var.reshape(-1) * (n / max(n - 1, 1))
            new_buffers = {
                "running_mean": (1 - m) * buffers["running_mean"] + m * mean.reshape(-1),
                "running_var": (1 - m) * buffers["running_var"] + m * unbiased,
            }
        else:
            mean = _channel_view(buffers["running_mean"], x.ndim)
            inv_std = 1.0 / np.sqrt(_channel_view(buffers["running_var"], x.ndim) + eps)
            xhat = (x - mean) * inv_std
            new_buffers = None
        y = gamma * xhat + beta
        return y, {"xhat": xhat, "inv_std": inv_std, "axes": axes, "train": train, "buffers": new_buffers}

    def backward(self, cfg, params, cache, grad_out):
        xhat, axes = cache["xhat"], cache["axes"]
        grads = {"gamma": (grad_out * xhat).sum(axis=axes), "beta": grad_out.sum(axis=axes)}
        grad_xhat = grad_out * _channel_view(params["gamma"], grad_out.ndim)
        if cache["train"]:
            gx = _normalize_backward(grad_xhat, xhat, cache["inv_std"], axes)
        else:
            gx = grad_xhat * cache["inv_std"]
        return gx, grads


class LayerNorm(LayerKind):
    """Per-sample normalization over the trailing ``normalized_shape`` axes."""

    name = "LayerNorm"
    params = ("gamma", "beta")

    def validate(self, cfg):
        if cfg.get("eps", 1e-5) <= 0:
            raise ValueError("LayerNorm eps must be > 0")

    def output_shape(self, cfg, in_shape):
        ns = tuple(cfg["normalized_shape"])
        if in_shape[len(in_shape) - len(ns):] != ns:
            raise ShapeError(f"trailing shape of {in_shape} does not match {ns}")
        return in_shape

    def param_shapes(self, cfg, in_shape):
        ns = tuple(cfg["normalized_shape"])
        return {"gamma": ns, "beta": ns}

    def init(self, cfg, in_shape, rng):
        ns = tuple(cfg["normalized_shape"])
        return {"gamma": np.ones(ns), "beta": np.zeros(ns)}, {}

    def forward(self, cfg, params, buffers, x, train):
        k = len(cfg["normalized_shape"])
        axes = tuple(range(x.ndim - k, x.ndim))
        xhat, _, _, inv_std = _normalize(x, axes, cfg.get("eps", 1e-5))
        return params["gamma"] * xhat + params["beta"], {"xhat": xhat, "inv_std": inv_std, "axes": axes}

    def backward(self, cfg, params, cache, grad_out):
        xhat, axes = cache["xhat"], cache["axes"]
        lead = tuple(range(grad_out.ndim - len(axes)))
        grads = {"gamma": (grad_out * xhat).sum(axis=lead), "beta": grad_out.sum(axis=lead)}
        gx = _normalize_backward(grad_out * params["gamma"], xhat, cache["inv_std"], axes)
        return gx, grads


class GroupNorm(LayerKind):
    """Per-sample normalization over channel groups, per-channel affine."""

    name = "GroupNorm"
    params = ("gamma", "beta")

    def validate(self, cfg):
        if cfg["num_channels"] % cfg["num_groups"] != 0:
            raise ValueError("GroupNorm group count must divide the channel count")
        if cfg.get("eps", 1e-5) <= 0:
            raise ValueError("GroupNorm eps must be > 0")

    def output_shape(self, cfg, in_shape):
        if in_shape[0] != cfg["num_channels"]:
            raise ShapeError(f"expected {cfg['num_channels']} channels, got input {in_shape}")
        return in_shape

    def param_shapes(self, cfg, in_shape):
        c = cfg["num_channels"]
        return {"gamma": (c,), "beta": (c,)}

    def init(self, cfg, in_shape, rng):
        c = cfg["num_channels"]
        return {"gamma": np.ones(c), "beta": np.zeros(c)}, {}

    def forward(self, cfg, params, buffers, x, train):
        b, c = x.shape[:2]
        g = cfg["num_groups"]
        xg = x.reshape(b, g, -1)
        xhat, _, _, inv_std = _normalize(xg, (2,), cfg.get("eps", 1e-5))
        xhat = xhat.reshape(x.shape)
        y = _channel_view(params["gamma"], x.ndim) * xhat + _channel_view(params["beta"], x.ndim)
        return y, {"xhat": xhat, "inv_std": inv_std}

    def backward(self, cfg, params, cache, grad_out):
        xhat = cache["xhat"]
        b = grad_out.shape[0]
        axes = (0,) + tuple(range(2, grad_out.ndim))
        grads = {"gamma": (grad_out * xhat).sum(axis=axes), "beta": grad_out.sum(axis=axes)}
        grad_xhat = grad_out * _channel_view(params["gamma"], grad_out.ndim)
        g = cfg["num_groups"]
        gx = _normalize_backward(grad_xhat.reshape(b, g, -1), xhat.reshape(b, g, -1), cache["inv_std"], (2,))
        return gx.reshape(grad_out.shape), grads


class Attention(LayerKind):
    """Single-head scaled dot-product self-attention on ``[B, T, d_model]``.

    Row-vector convention: ``Q = x @ W_Q + b_Q`` (likewise K, V).
    """

    name = "Attention"
    params = ("W_Q", "b_Q", "W_K", "b_K", "W_V", "b_V")

    def output_shape(self, cfg, in_shape):
        if len(in_shape) != 2 or in_shape[1] != cfg["d_model"]:
            raise ShapeError(f"expected input (tokens, {cfg['d_model']}), got {in_shape}")
        return in_shape

    def param_shapes(self, cfg, in_shape):
        d = cfg["d_model"]
        shapes = {}
        for p in "QKV":
            shapes[f"W_{p}"] = (d, d)
            shapes[f"b_{p}"] = (d,)
        return shapes

    def init(self, cfg, in_shape, rng):
        bound = 1.0 / math.sqrt(cfg["d_model"])
        return {k: _uniform(rng, bound, s) for k, s in self.param_shapes(cfg, in_shape).items()}, {}

    def forward(self, cfg, params, buffers, x, train):
        scale = 1.0 / math.sqrt(cfg["d_model"])
        q = x @ params["W_Q"] + params["b_Q"]
        k = x @ params["W_K"] + params["b_K"]
        v = x @ params["W_V"] + params["b_V"]
        a = softmax(q @ k.swapaxes(-1, -2) * scale)
        return a @ v, (x, q, k, v, a, scale)

    def backward(self, cfg, params, cache, grad_out):
        x, q, k, v, a, scale = cache
        grad_v = a.swapaxes(-1, -2) @ grad_out
        grad_a = grad_out @ v.swapaxes(-1, -2)
        grad_s = a * (grad_a - (grad_a * a).sum(axis=-1, keepdims=True)) * scale
        grad_q = grad_s @ k
        grad_k = grad_s.swapaxes(-1, -2) @ q
        xt = x.swapaxes(-1, -2)
        grads = {}
        gx = np.zeros_like(x)
        for p, g in (("Q", grad_q), ("K", grad_k), ("V", grad_v)):
            grads[f"W_{p}"] = (xt @ g).sum(axis=0)
            grads[f"b_{p}"] = g.sum(axis=(0, 1))
            gx += g @ params[f"W_{p}"].T
        return gx, grads


KINDS: dict[str, LayerKind] = {
    k.name: k
    for k in (Linear(), Conv2d(), ReLU(), Flatten(), Unflatten(), Softmax(), BatchNorm2d(), LayerNorm(), GroupNorm(), Attention())
}
NORM_KINDS = ("BatchNorm2d", "LayerNorm", "GroupNorm")
