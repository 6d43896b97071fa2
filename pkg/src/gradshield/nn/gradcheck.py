"""Central finite-difference oracle for parameter gradients.

Deliberately independent of the backward pass: it only calls ``forward`` and
``cross_entropy``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..rng import make_rng
from .engine import backward, cross_entropy, forward
from .model import Model

# Gradient coordinates smaller than this are compared on an absolute scale:
# with h=1e-6 the round-off of a central difference is ~1e-10.
SCALE_FLOOR = 1e-5


def numeric_grads(model: Model, inputs, labels, h: float = 1e-6) -> dict[str, np.ndarray]:
    out = {}
    for key, value in model.params.items():
        g = np.empty_like(value)
        flat = value.reshape(-1)
        for idx in range(flat.size):
            orig = flat[idx]
            losses = []
            for sign in (1.0, -1.0):
                pert = flat.copy()
                pert[idx] = orig + sign * h
                m = model.replace(params={key: pert.reshape(value.shape)})
                logits, _ = forward(m, inputs, "train")
                losses.append(cross_entropy(logits, labels)[0])
            g.reshape(-1)[idx] = (losses[0] - losses[1]) / (2 * h)
        out[key] = g
    return out


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = SCALE_FLOOR) -> np.ndarray:
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / scale


@dataclass
class GradCheckResult:
    name: str
    max_rel_error: float
    worst_key: str
    n_coords: int

    def passed(self, tol: float = 1e-4) -> bool:
        return self.max_rel_error < tol


def check_model(name: str, model: Model, inputs, labels, h: float = 1e-6) -> GradCheckResult:
    _, trace = forward(model, inputs, "train")
    analytic = backward(model, trace, labels).grads
    numeric = numeric_grads(model, inputs, labels, h)
    worst, worst_key, n = 0.0, "", 0
    for key in model.params:
        err = relative_error(analytic[key], numeric[key])
        n += err.size
        if err.size and err.max() > worst:
            worst, worst_key = float(err.max()), key
    return GradCheckResult(name, worst, worst_key, n)


def layer_kind_suite(seed: int):
    """One small model per layer kind; yields ``(name, model, inputs, labels)``."""
    rng = make_rng(seed, "gradcheck")
    b = 3

    def labels(classes):
        return rng.integers(0, classes, size=b)

    mlp = Model.build(
        [("Linear", {"in_features": 5, "out_features": 4}), ("ReLU", {}), ("Linear", {"in_features": 4, "out_features": 3})],
        (5,), seed,
    )
    yield "Linear+ReLU", mlp, rng.normal(size=(b, 5)), labels(3)

    conv = Model.build(
        [
            ("Conv2d", {"in_channels": 2, "out_channels": 3, "kernel_size": 3}),
            ("ReLU", {}),
            ("Conv2d", {"in_channels": 3, "out_channels": 2, "kernel_size": 3, "stride": 2, "padding": 0}),
            ("Flatten", {}),
            ("Linear", {"in_features": 2 * 2 * 2, "out_features": 3}),
        ],
        (2, 5, 5), seed,
    )
    yield "Conv2d+Flatten", conv, rng.normal(size=(b, 2, 5, 5)), labels(3)

    for norm, cfg in (
        ("BatchNorm2d", {"num_features": 2, "eps": 1e-5}),
        ("LayerNorm", {"normalized_shape": [2, 3, 3], "eps": 1e-5}),
        ("GroupNorm", {"num_groups": 2, "num_channels": 2, "eps": 1e-5}),
    ):
        m = Model.build(
            [
                ("Conv2d", {"in_channels": 1, "out_channels": 2, "kernel_size": 3}),
                (norm, cfg),
                ("Flatten", {}),
                ("Linear", {"in_features": 18, "out_features": 3}),
            ],
            (1, 3, 3), seed,
        )
        m = _perturb_affine(m, rng)
        yield norm, m, rng.normal(size=(b, 1, 3, 3)), labels(3)

    att = Model.build(
        [
            ("Attention", {"d_model": 4}),
            ("Softmax", {}),
            ("Flatten", {}),
            ("Linear", {"in_features": 12, "out_features": 3}),
        ],
        (3, 4), seed,
    )
    yield "Attention+Softmax", att, rng.normal(size=(b, 3, 4)), labels(3)

    unflat = Model.build(
        [("Flatten", {}), ("Linear", {"in_features": 4, "out_features": 4}), ("Unflatten", {"shape": [1, 2, 2]}),
         ("Conv2d", {"in_channels": 1, "out_channels": 1, "kernel_size": 1}), ("Flatten", {}),
         ("Linear", {"in_features": 4, "out_features": 2})],
        (1, 2, 2), seed,
    )
    yield "Unflatten", unflat, rng.normal(size=(b, 1, 2, 2)), labels(2)


def _perturb_affine(model: Model, rng) -> Model:
    # move gamma/beta off their (1, 0) init so their gradients are generic
    params = {}
    for k, v in model.params.items():
        if k.endswith(".gamma"):
            params[k] = 1.0 + 0.3 * rng.normal(size=v.shape)
        elif k.endswith(".beta"):
            params[k] = 0.3 * rng.normal(size=v.shape)
    return model.replace(params=params)


def run_suite(seeds=range(5), h: float = 1e-6) -> list[GradCheckResult]:
    results = []
    for seed in seeds:
        for name, model, x, y in layer_kind_suite(seed):
            results.append(check_model(f"{name}[seed={seed}]", model, x, y, h))
    return results
