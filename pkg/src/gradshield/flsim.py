"""FedSGD / FedAvg round mechanics and the client-side architecture check."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .datagen import Dataset
from .errors import FormatError, KeyMismatchError
from .nn import Model, forward, backward, sgd_step
from .nn.checkpoint import read_manifest
from .rng import make_rng

GRADIENT = "gradient"
PARAMETER_DELTA = "parameter_delta"


@dataclass
class ClientState:
    id: int
    dataset: Dataset
    round: int = 0
    history: object = None  # detect.StatHistory, owned by this client's detector
    expected_manifest: dict | None = None

    def __post_init__(self):
        if len(self.dataset) == 0:
            raise ValueError("client dataset must be non-empty")


@dataclass
class RoundUpdate:
    kind: str
    payload: dict[str, np.ndarray]
    sample_count: int
    loss: float = float("nan")
    buffers: dict[str, np.ndarray] = field(default_factory=dict)
    steps: int = 1

    def norm(self) -> float:
        return float(np.sqrt(sum(float((v ** 2).sum()) for v in self.payload.values())))


def sample_batch(n: int, batch_size: int, seed: int, *keys) -> np.ndarray:
    """Sorted indices of a uniform batch without replacement."""
    if not 1 <= batch_size <= n:
        raise ValueError(f"batch_size must be in [1, {n}], got {batch_size}")
    if batch_size == n:
        return np.arange(n)
    return np.sort(make_rng(seed, "batch", *keys).choice(n, size=batch_size, replace=False))


def fedsgd_client_step(model: Model, client: ClientState, batch_size: int, seed: int) -> RoundUpdate:
    """One batch-mean gradient on a sampled batch of the client's data."""
    idx = sample_batch(len(client.dataset), batch_size, seed, client.id, client.round)
    x, y = client.dataset.inputs[idx], client.dataset.labels[idx]
    _, trace = forward(model, x, "train")
    g = backward(model, trace, y)
    return RoundUpdate(GRADIENT, g.grads, len(idx), g.loss, g.buffers)


def epoch_order(n: int, seed: int, client_id: int, round_index: int, epoch: int) -> np.ndarray:
    """Fisher-Yates permutation for one (client, round, epoch)."""
    return make_rng(seed, "shuffle", client_id, round_index, epoch).permutation(n)


def local_train(model: Model, data: Dataset, epochs: int, batch_size: int, lr: float, seed: int,
                client_id: int = 0, round_index: int = 0) -> tuple[Model, int, float]:
    """Plain mini-batch SGD. Returns ``(model, steps, mean loss of the first epoch)``."""
    if epochs < 1:
        raise ValueError("epochs must be >= 1")
    n = len(data)
    if not 1 <= batch_size <= n:
        raise ValueError(f"batch_size must be in [1, {n}], got {batch_size}")
    steps, first_losses = 0, []
    for epoch in range(epochs):
        order = epoch_order(n, seed, client_id, round_index, epoch)
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            _, trace = forward(model, data.inputs[idx], "train")
            g = backward(model, trace, data.labels[idx])
            if epoch == 0:
                first_losses.append(g.loss)
            model = sgd_step(model, g, lr)
            steps += 1
    return model, steps, float(np.mean(first_losses))


def fedavg_local_train(model: Model, client: ClientState, epochs: int, batch_size: int, lr: float,
                       seed: int) -> RoundUpdate:
    """``epochs`` shuffled passes of SGD; the update is final minus received parameters."""
    final, steps, loss = local_train(model, client.dataset, epochs, batch_size, lr, seed, client.id, client.round)
    delta = {k: final.params[k] - model.params[k] for k in model.params}
    return RoundUpdate(PARAMETER_DELTA, delta, len(client.dataset), loss, dict(final.buffers), steps)


def aggregate(updates: list[RoundUpdate], base: Model, lr_server: float = 0.1) -> Model:
    """Server step.

    Gradients: ``theta - lr_server * mean(g)``. Deltas: ``theta + sum_k n_k d_k / sum_k n_k``.
    Running statistics carried by the updates are averaged with the same weights.
    """
    if not updates:
        raise ValueError("no updates to aggregate")
    kinds = {u.kind for u in updates}
    if len(kinds) != 1:
        raise ValueError(f"cannot aggregate mixed update kinds {sorted(kinds)}")
    for u in updates:
        if set(u.payload) != set(base.params):
            raise KeyMismatchError("update keys do not match the base model parameters")
    kind = kinds.pop()
    if kind == GRADIENT:
        weights = np.full(len(updates), 1.0 / len(updates))
    else:
        counts = np.array([u.sample_count for u in updates], dtype=np.float64)
        weights = counts / counts.sum()

    def combine(arrays):
        total = weights[0] * arrays[0]
        for w, a in zip(weights[1:], arrays[1:]):
            total = total + w * a
        return total

    params = {}
    for key in base.params:
        avg = combine([u.payload[key] for u in updates])
        params[key] = base.params[key] - lr_server * avg if kind == GRADIENT else base.params[key] + avg
    buffers = {}
    if all(u.buffers for u in updates):
        for key in base.buffers:
            buffers[key] = combine([u.buffers[key] for u in updates])
    return base.replace(params=params, buffers=buffers)


@dataclass(frozen=True)
class ArchitectureCheck:
    accepted: bool
    reason: str | None = None
    details: tuple[str, ...] = ()

    def to_dict(self) -> dict:
        return {"accepted": self.accepted, "reason": self.reason, "details": list(self.details)}


def _tensor_shapes(manifest: dict) -> dict[str, tuple[int, ...]]:
    return {k: tuple(s) for k, s in manifest["tensors"]}


def verify_architecture(expected, received) -> ArchitectureCheck:
    """Strict load check: key sets and shapes must match exactly.

    ``expected`` is a Model or its manifest; ``received`` is a Model, a
    manifest dict, checkpoint bytes or a checkpoint path.
    """
    exp = expected.manifest() if isinstance(expected, Model) else expected
    if isinstance(received, Model):
        got = received.manifest()
    elif isinstance(received, dict):
        got = received
    else:
        try:
            got, _ = read_manifest(received)
        except (FormatError, OSError) as e:
            return ArchitectureCheck(False, "parse", (str(e),))
    es, gs = _tensor_shapes(exp), _tensor_shapes(got)
    extra = sorted(set(gs) - set(es))
    if extra:
        return ArchitectureCheck(False, "extra key", tuple(extra))
    missing = sorted(set(es) - set(gs))
    if missing:
        return ArchitectureCheck(False, "missing key", tuple(missing))
    changed = tuple(f"{k}: expected {list(es[k])}, got {list(gs[k])}" for k in es if es[k] != gs[k])
    if changed:
        return ArchitectureCheck(False, "shape", changed)
    return ArchitectureCheck(True)
