from __future__ import annotations

from dataclasses import dataclass, field
from types import MappingProxyType

import numpy as np

from ..errors import ShapeError
from ..rng import make_rng
from .layers import KINDS


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    name: str
    config: dict = field(default_factory=dict)

    @property
    def impl(self):
        return KINDS[self.kind]

    def param_key(self, pname: str) -> str:
        return f"{self.name}.{pname}"


def _frozen(a) -> np.ndarray:
    arr = np.array(a, dtype=np.float64, copy=True)
    arr.setflags(write=False)
    return arr


def _auto_names(kinds):
    counters: dict[str, int] = {}
    names = []
    for kind in kinds:
        idx = counters.get(kind, 0)
        counters[kind] = idx + 1
        names.append(f"{kind.lower()}.{idx}")
    return names


@dataclass(frozen=True, eq=False)
class Model:
    """An ordered stack of layers plus a registry of named tensors.

    Instances are immutable: the arrays are read-only copies and every
    transformation returns a new ``Model``. Parameter keys look like
    ``"linear.0.weight"``; running statistics live in ``buffers``.
    """

    layers: tuple[LayerSpec, ...]
    input_shape: tuple[int, ...]
    params: MappingProxyType
    buffers: MappingProxyType

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))
        object.__setattr__(self, "params", MappingProxyType({k: _frozen(v) for k, v in self.params.items()}))
        object.__setattr__(self, "buffers", MappingProxyType({k: _frozen(v) for k, v in self.buffers.items()}))
        self._check()

    @classmethod
    def build(cls, layer_defs, input_shape, seed: int = 0) -> "Model":
        """Create a freshly initialised model from ``[(kind, config), ...]``."""
        layer_defs = [(k, dict(c)) for k, c in layer_defs]
        names = _auto_names(k for k, _ in layer_defs)
        layers = tuple(LayerSpec(k, n, c) for (k, c), n in zip(layer_defs, names))
        params, buffers = {}, {}
        shape = tuple(input_shape)
        for i, spec in enumerate(layers):
            if spec.kind not in KINDS:
                raise ValueError(f"unknown layer kind {spec.kind!r}")
            spec.impl.validate(spec.config)
            p, b = spec.impl.init(spec.config, shape, make_rng(seed, "init", i))
            params.update({spec.param_key(k): v for k, v in p.items()})
            buffers.update({spec.param_key(k): v for k, v in b.items()})
            shape = spec.impl.output_shape(spec.config, shape)
        return cls(layers, tuple(input_shape), params, buffers)

    def _check(self):
        names = [l.name for l in self.layers]
        if len(set(names)) != len(names):
            raise ValueError("layer names must be unique")
        shape = self.input_shape
        for spec in self.layers:
            if spec.kind not in KINDS:
                raise ValueError(f"unknown layer kind {spec.kind!r}")
            impl = spec.impl
            try:
                impl.validate(spec.config)
                expected = {**impl.param_shapes(spec.config, shape), **impl.buffer_shapes(spec.config, shape)}
                out = impl.output_shape(spec.config, shape)
            except ShapeError as e:
                raise ShapeError(str(e).split(": ", 1)[-1], layer=spec.name) from None
            for pname, pshape in expected.items():
                key = spec.param_key(pname)
                store = self.params if pname in impl.params else self.buffers
                if key not in store:
                    raise ShapeError(f"missing tensor {key}", layer=spec.name)
                if store[key].shape != tuple(pshape):
                    raise ShapeError(f"{key} has shape {store[key].shape}, expected {tuple(pshape)}", layer=spec.name)
            shape = out
        known = {l.param_key(p) for l in self.layers for p in l.impl.params + l.impl.buffers}
        extra = (set(self.params) | set(self.buffers)) - known
        if extra:
            raise ValueError(f"tensors not owned by any layer: {sorted(extra)}")

    # -- derived views ---------------------------------------------------

    def shapes(self) -> list[tuple[int, ...]]:
        """Per-sample input shape of every layer, followed by the output shape."""
        out = [self.input_shape]
        for spec in self.layers:
            out.append(spec.impl.output_shape(spec.config, out[-1]))
        return out

    @property
    def output_shape(self) -> tuple[int, ...]:
        return self.shapes()[-1]

    def layer(self, name: str) -> LayerSpec:
        for spec in self.layers:
            if spec.name == name:
                return spec
        raise KeyError(name)

    def layers_of(self, kind: str) -> list[LayerSpec]:
        return [l for l in self.layers if l.kind == kind]

    def layer_params(self, spec: LayerSpec) -> dict[str, np.ndarray]:
        return {p: self.params[spec.param_key(p)] for p in spec.impl.params}

    def layer_buffers(self, spec: LayerSpec) -> dict[str, np.ndarray]:
        return {p: self.buffers[spec.param_key(p)] for p in spec.impl.buffers}

    def tensor_keys(self) -> list[str]:
        """All tensor keys in manifest order (per layer: parameters, then buffers)."""
        keys = []
        for spec in self.layers:
            keys += [spec.param_key(p) for p in spec.impl.params + spec.impl.buffers]
        return keys

    def tensor(self, key: str) -> np.ndarray:
        return self.params[key] if key in self.params else self.buffers[key]

    def manifest(self) -> dict:
        return {
            "input_shape": list(self.input_shape),
            "layers": [{"kind": l.kind, "name": l.name, "config": l.config} for l in self.layers],
            "tensors": [[k, list(self.tensor(k).shape)] for k in self.tensor_keys()],
        }

    def num_params(self) -> int:
        return int(sum(v.size for v in self.params.values()))

    # -- functional updates ---------------------------------------------

    def replace(self, *, layers=None, params=None, buffers=None, input_shape=None) -> "Model":
        """New model with some tensors (merged by key) or the layer list swapped."""
        new_params = dict(self.params) if layers is None else {}
        new_buffers = dict(self.buffers) if layers is None else {}
        new_params.update(params or {})
        new_buffers.update(buffers or {})
        return Model(
            self.layers if layers is None else layers,
            self.input_shape if input_shape is None else input_shape,
            new_params,
            new_buffers,
        )

    def equals(self, other: "Model") -> bool:
        """Bitwise equality of structure and all tensors."""
        if self.manifest() != other.manifest():
            return False
        return all(np.array_equal(self.tensor(k), other.tensor(k)) for k in self.tensor_keys())


def relabel(layer_defs) -> tuple[LayerSpec, ...]:
    """Assign canonical per-kind names to ``[(kind, config), ...]``."""
    names = _auto_names(k for k, _ in layer_defs)
    return tuple(LayerSpec(k, n, dict(c)) for (k, c), n in zip(layer_defs, names))
