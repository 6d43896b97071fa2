"""Small reference architectures used throughout the experiments."""

from __future__ import annotations

from .model import Model


def _norm_layer(norm: str | None, channels: int, spatial: tuple[int, int], groups: int = 2):
    if norm is None or norm == "none":
        return []
    if norm == "batch":
        return [("BatchNorm2d", {"num_features": channels, "eps": 1e-5})]
    if norm == "layer":
        return [("LayerNorm", {"normalized_shape": [channels, *spatial], "eps": 1e-5})]
    if norm == "group":
        return [("GroupNorm", {"num_groups": groups, "num_channels": channels, "eps": 1e-5})]
    raise ValueError(f"unknown norm {norm!r}")


def toy_cnn(
    input_shape=(3, 8, 8),
    channels: int = 4,
    classes: int = 10,
    norm: str | None = "batch",
    depth: int = 2,
    seed: int = 0,
    hidden: int | None = None,
) -> Model:
    """``depth`` x (Conv3x3 -> Norm -> ReLU), then Flatten -> [Linear -> ReLU ->] Linear."""
    c, h, w = input_shape
    defs = []
    in_ch = c
    for _ in range(depth):
        defs.append(("Conv2d", {"in_channels": in_ch, "out_channels": channels, "kernel_size": 3}))
        defs += _norm_layer(norm, channels, (h, w))
        defs.append(("ReLU", {}))
        in_ch = channels
    features = channels * h * w
    defs.append(("Flatten", {}))
    if hidden:
        defs += [("Linear", {"in_features": features, "out_features": hidden}), ("ReLU", {})]
        features = hidden
    defs.append(("Linear", {"in_features": features, "out_features": classes}))
    return Model.build(defs, input_shape, seed)


def toy_mlp(in_dim: int, hidden: int = 16, classes: int = 2, seed: int = 0, flatten_from=None) -> Model:
    """``[Flatten ->] Linear -> ReLU -> Linear``; ``hidden=0`` gives a linear model."""
    defs = []
    input_shape = (in_dim,)
    if flatten_from is not None:
        defs.append(("Flatten", {}))
        input_shape = tuple(flatten_from)
    if hidden:
        defs += [
            ("Linear", {"in_features": in_dim, "out_features": hidden}),
            ("ReLU", {}),
            ("Linear", {"in_features": hidden, "out_features": classes}),
        ]
    else:
        defs.append(("Linear", {"in_features": in_dim, "out_features": classes}))
    return Model.build(defs, input_shape, seed)


def toy_transformer(tokens: int = 4, d_model: int = 8, classes: int = 4, blocks: int = 2, seed: int = 0) -> Model:
    """``blocks`` x (Attention -> LayerNorm), then Flatten -> Linear."""
    defs = []
    for _ in range(blocks):
        defs.append(("Attention", {"d_model": d_model}))
        defs.append(("LayerNorm", {"normalized_shape": [d_model], "eps": 1e-5}))
    defs += [("Flatten", {}), ("Linear", {"in_features": tokens * d_model, "out_features": classes})]
    return Model.build(defs, (tokens, d_model), seed)


def substitute_norm(model: Model, norm: str, groups: int = 2) -> Model:
    """Swap every BatchNorm2d for LayerNorm or GroupNorm; other tensors are kept.

    The new layer's affine parameters are taken from the BatchNorm's per-channel
    gamma/beta (broadcast over the spatial axes for LayerNorm).
    """
    import numpy as np

    shapes = model.shapes()
    defs, carry = [], {}
    for i, spec in enumerate(model.layers):
        if spec.kind != "BatchNorm2d":
            defs.append((spec.kind, spec.config))
            continue
        in_shape = shapes[i]
        c = in_shape[0]
        gamma, beta = model.layer_params(spec)["gamma"], model.layer_params(spec)["beta"]
        if norm == "layer":
            defs.append(("LayerNorm", {"normalized_shape": list(in_shape), "eps": spec.config.get("eps", 1e-5)}))
            bshape = (c,) + (1,) * (len(in_shape) - 1)
            carry[len(defs) - 1] = {
                "gamma": np.broadcast_to(gamma.reshape(bshape), in_shape),
                "beta": np.broadcast_to(beta.reshape(bshape), in_shape),
            }
        elif norm == "group":
            defs.append(("GroupNorm", {"num_groups": groups, "num_channels": c, "eps": spec.config.get("eps", 1e-5)}))
            carry[len(defs) - 1] = {"gamma": gamma, "beta": beta}
        else:
            raise ValueError(f"unknown norm {norm!r}")
    skeleton = Model.build(defs, model.input_shape, seed=0)
    params = {}
    for new, old in zip(skeleton.layers, model.layers):
        if new.kind == old.kind:
            for p in new.impl.params:
                params[new.param_key(p)] = model.params[old.param_key(p)]
    for idx, vals in carry.items():
        spec = skeleton.layers[idx]
        params.update({spec.param_key(k): v for k, v in vals.items()})
    return skeleton.replace(params=params)
