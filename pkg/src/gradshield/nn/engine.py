"""Forward/backward passes, cross-entropy, per-sample gradients and SGD."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import KeyMismatchError, ShapeError, TraceMismatchError
from .layers import KINDS, NORM_KINDS
from .model import LayerSpec, Model

TRAIN, EVAL = "train", "eval"


@dataclass
class ActivationTrace:
    mode: str
    signature: tuple
    inputs: list[np.ndarray]
    caches: list
    outputs: list[np.ndarray]
    normalized: dict[str, np.ndarray] = field(default_factory=dict)
    new_buffers: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def logits(self) -> np.ndarray:
        return self.outputs[-1]


@dataclass
class BatchGradients:
    grads: dict[str, np.ndarray]
    loss: float
    buffers: dict[str, np.ndarray] = field(default_factory=dict)

    def __getitem__(self, key):
        return self.grads[key]

    def keys(self):
        return self.grads.keys()


@dataclass
class PerSampleGrads:
    grads: dict[str, np.ndarray]
    losses: np.ndarray

    def __getitem__(self, key):
        return self.grads[key]

    @property
    def batch_size(self) -> int:
        return len(self.losses)

    def mean(self) -> dict[str, np.ndarray]:
        return {k: v.mean(axis=0) for k, v in self.grads.items()}


def _signature(model: Model) -> tuple:
    return tuple((l.kind, l.name) for l in model.layers) + tuple(
        (k, model.params[k].shape) for k in sorted(model.params)
    )


def forward(model: Model, inputs, mode: str = TRAIN) -> tuple[np.ndarray, ActivationTrace]:
    """Run the model on a batch. Returns ``(logits, trace)``."""
    if mode not in (TRAIN, EVAL):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    x = np.asarray(inputs, dtype=np.float64)
    if x.ndim < 1 or x.shape[0] < 1:
        raise ShapeError("batch must contain at least one sample")
    if tuple(x.shape[1:]) != model.input_shape:
        first = model.layers[0].name if model.layers else None
        raise ShapeError(f"input sample shape {tuple(x.shape[1:])} != declared {model.input_shape}", layer=first)
    train = mode == TRAIN
    trace = ActivationTrace(mode, _signature(model), [], [], [])
    for spec in model.layers:
        impl = spec.impl
        trace.inputs.append(x)
        y, cache = impl.forward(spec.config, model.layer_params(spec), model.layer_buffers(spec), x, train)
        if spec.kind in NORM_KINDS:
            trace.normalized[spec.name] = y
            if spec.kind == "BatchNorm2d" and cache["buffers"] is not None:
                trace.new_buffers.update({spec.param_key(k): v for k, v in cache["buffers"].items()})
        trace.caches.append(cache)
        trace.outputs.append(y)
        x = y
    return x, trace


def cross_entropy(logits, labels) -> tuple[float, np.ndarray, np.ndarray]:
    """Mean softmax cross-entropy.

    Returns ``(mean_loss, per_sample_losses, dlogits_unscaled)`` where the
    last item is ``softmax - one_hot`` (the gradient of each sample's own loss).
    """
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"logits {logits.shape} and labels {labels.shape} are incompatible")
    if labels.min() < 0 or labels.max() >= logits.shape[1]:
        raise ValueError("label out of range")
    z = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    idx = np.arange(len(labels))
    losses = lse - z[idx, labels]
    probs = np.exp(z - lse[:, None])
    probs[idx, labels] -= 1.0
    return float(losses.mean()), losses, probs


def _check_trace(model: Model, trace: ActivationTrace):
    if trace.signature != _signature(model):
        raise TraceMismatchError("trace was produced by a different model")


def backward_from_logits(model: Model, trace: ActivationTrace, grad_logits) -> dict[str, np.ndarray]:
    """Backpropagate an arbitrary upstream gradient on the logits."""
    _check_trace(model, trace)
    g = np.asarray(grad_logits, dtype=np.float64)
    grads: dict[str, np.ndarray] = {}
    for spec, cache in zip(reversed(model.layers), reversed(trace.caches)):
        g, pgrads = spec.impl.backward(spec.config, model.layer_params(spec), cache, g)
        for pname, val in pgrads.items():
            grads[spec.param_key(pname)] = val
    return {k: grads[k] for k in model.params}


def backward(model: Model, trace: ActivationTrace, labels) -> BatchGradients:
    """Gradients of the mean cross-entropy w.r.t. every parameter."""
    if trace.mode != TRAIN:
        raise TraceMismatchError("backward needs a train-mode trace")
    _check_trace(model, trace)
    loss, _, dlogits = cross_entropy(trace.logits, labels)
    grads = backward_from_logits(model, trace, dlogits / len(dlogits))
    return BatchGradients(grads, loss, dict(trace.new_buffers))


def loss_and_grads(model: Model, inputs, labels) -> BatchGradients:
    _, trace = forward(model, inputs, TRAIN)
    return backward(model, trace, labels)


def per_sample_gradients(model: Model, inputs, labels) -> PerSampleGrads:
    """Gradient of each sample's own loss, with a leading batch axis.

    For models with batch normalization the batch statistics of the full batch
    are shared by every sample, and the gradient of sample ``i`` is taken
    through them, so it includes the indirect effect of every other sample.
    """
    _, trace = forward(model, inputs, TRAIN)
    _, losses, dlogits = cross_entropy(trace.logits, labels)
    b = len(losses)
    out = {k: np.empty((b,) + v.shape) for k, v in model.params.items()}
    upstream = np.zeros_like(dlogits)
    for i in range(b):
        upstream[i] = dlogits[i]
        for k, v in backward_from_logits(model, trace, upstream).items():
            out[k][i] = v
        upstream[i] = 0.0
    return PerSampleGrads(out, losses)


def sgd_step(model: Model, grads, lr: float) -> Model:
    """``theta <- theta - lr * g``; running statistics are taken from ``grads``."""
    if lr < 0:
        raise ValueError("lr must be non-negative")
    g = grads.grads if isinstance(grads, BatchGradients) else dict(grads)
    if set(g) != set(model.params):
        missing = sorted(set(model.params) - set(g))
        extra = sorted(set(g) - set(model.params))
        raise KeyMismatchError(f"gradient keys do not match parameters (missing={missing}, extra={extra})")
    params = {k: model.params[k] - lr * g[k] for k in model.params}
    buffers = grads.buffers if isinstance(grads, BatchGradients) else {}
    return model.replace(params=params, buffers=buffers)


def attention_forward(x, attn: dict[str, np.ndarray]) -> np.ndarray:
    """Single-head self-attention on one sequence ``x`` of shape ``[tokens, d_model]``."""
    x = np.asarray(x, dtype=np.float64)
    d = attn["W_Q"].shape[0]
    if x.ndim != 2 or x.shape[1] != d:
        raise ShapeError(f"input {x.shape} does not match d_model={d}", layer="attention")
    y, _ = KINDS["Attention"].forward({"d_model": d}, attn, {}, x[None], True)
    return y[0]


def predict(model: Model, inputs, mode: str = EVAL) -> np.ndarray:
    logits, _ = forward(model, inputs, mode)
    return logits.argmax(axis=1)


def evaluate(model: Model, inputs, labels, mode: str = EVAL) -> tuple[float, float]:
    """``(mean loss, accuracy)``."""
    logits, _ = forward(model, inputs, mode)
    loss, _, _ = cross_entropy(logits, labels)
    return loss, float((logits.argmax(axis=1) == np.asarray(labels)).mean())


def has_batchnorm(model: Model) -> bool:
    return any(l.kind == "BatchNorm2d" for l in model.layers)


__all__ = [
    "ActivationTrace",
    "BatchGradients",
    "PerSampleGrads",
    "LayerSpec",
    "forward",
    "backward",
    "backward_from_logits",
    "cross_entropy",
    "loss_and_grads",
    "per_sample_gradients",
    "sgd_step",
    "attention_forward",
    "predict",
    "evaluate",
]
