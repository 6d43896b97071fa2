"""Client-side detection: D-SNR, parameter inspectors and warm-up Z-score profiling."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .flsim import ClientState, sample_batch, verify_architecture
from .nn import Model, forward, backward, sgd_step
from .nn.engine import PerSampleGrads

SIGMA_FLOOR = 1e-12
DEFAULT_THRESHOLD = 1e4
KERNEL_RATIO_LIMIT = 10.0
EPS = 1e-12


# -- D-SNR -------------------------------------------------------------------


def d_snr_from_norms(norms) -> float:
    """``max ||g_i|| / (sum ||g_i|| - max ||g_i||)`` with ``0`` denominators mapped to +inf."""
    norms = np.asarray(norms, dtype=np.float64)
    if norms.ndim != 1 or len(norms) == 0:
        raise ValueError("need a non-empty vector of per-sample norms")
    if len(norms) == 1:
        return math.inf
    top = norms.max()
    if top == 0.0:
        # every sample contributes nothing: treat as perfectly balanced
        return 1.0 / (len(norms) - 1)
    # summing the others directly avoids cancellation against a huge maximum
    rest = np.delete(norms, int(norms.argmax())).sum()
    if rest <= 0.0:
        return math.inf
    with np.errstate(over="ignore"):
        return float(top / rest)  # saturates to inf for subnormal denominators


def dsnr_keys(keys) -> list[str]:
    """Weight tensors of fully connected and convolutional layers."""
    return [k for k in keys if k.endswith(".weight") and k.split(".")[0] in ("linear", "conv2d")]


def d_snr(psg, keys=None) -> tuple[dict[str, float], float]:
    """Per-layer D-SNR and the maximum over layers."""
    grads = psg.grads if isinstance(psg, PerSampleGrads) else psg
    keys = dsnr_keys(grads) if keys is None else list(keys)
    if not keys:
        raise ValueError("no FC or convolutional weights to score")
    per_layer = {}
    for k in keys:
        g = grads[k]
        per_layer[k] = d_snr_from_norms(np.sqrt((g.reshape(len(g), -1) ** 2).sum(axis=1)))
    return per_layer, max(per_layer.values())


# -- parameter inspectors --------------------------------------------------------


def kernel_ratio(weight) -> np.ndarray:
    """Per output filter: largest |entry| over the sum of all other |entries|."""
    w = np.abs(np.asarray(weight, dtype=np.float64))
    if w.ndim != 4:
        raise ValueError(f"expected a 4-D kernel, got shape {w.shape}")
    flat = w.reshape(w.shape[0], -1)
    top = flat.max(axis=1)
    rest = flat.sum(axis=1) - top
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(rest > 0, top / np.where(rest > 0, rest, 1.0), math.inf)


@dataclass(frozen=True)
class ImprintSignature:
    row_constancy: float
    bias_monotone_fraction: float
    flagged: bool

    def to_dict(self) -> dict:
        return {"row_constancy": self.row_constancy, "bias_monotone_fraction": self.bias_monotone_fraction,
                "flagged": self.flagged}


def imprint_signature(weight, bias, constancy_tol: float = 1e-6, monotone_tol: float = 0.95) -> ImprintSignature:
    """Detect identical bins and a decreasing bias ladder in an FC layer.

    ``row_constancy`` averages ``std / (|mean| + eps)`` of every input feature's
    weights across the output units, so it is 0 when all units share one
    weight vector. An all-zero column counts as constant.
    """
    w = np.asarray(weight, dtype=np.float64)
    b = np.asarray(bias, dtype=np.float64)
    if w.ndim != 2 or b.ndim != 1:
        raise ValueError("imprint_signature expects a 2-D weight and a 1-D bias")
    # std of offsets from the first row is exactly 0 for identical rows
    spread = (w - w[:1]).std(axis=0)
    constancy = float(np.mean(spread / (np.abs(w.mean(axis=0)) + EPS)))
    monotone = float(np.mean(np.diff(b) < 0)) if len(b) > 1 else 0.0
    return ImprintSignature(constancy, monotone, constancy < constancy_tol or monotone > monotone_tol)


@dataclass(frozen=True)
class AttentionSignature:
    q_norm: float
    k_identity_residual: float
    flagged: bool

    def to_dict(self) -> dict:
        return {"q_norm": self.q_norm, "k_identity_residual": self.k_identity_residual, "flagged": self.flagged}


def attention_signature(attn: dict) -> AttentionSignature:
    """Zeroed query weights together with an identity key map."""
    wq = np.asarray(attn["W_Q"], dtype=np.float64)
    wk = np.asarray(attn["W_K"], dtype=np.float64)
    q = float(np.linalg.norm(wq))
    k = float(np.linalg.norm(wk - np.eye(wk.shape[0])))
    return AttentionSignature(q, k, q < 1e-8 and k < 1e-6)


# -- statistics ----------------------------------------------------------------------


@dataclass(frozen=True)
class Target:
    label: str  # role, e.g. "linear[0]" or "batchnorm[2]"
    layer: str  # layer name inside the model
    quantities: tuple[str, ...]


def select_target_layers(model: Model) -> list[Target]:
    """First/last FC, first conv, up to three BN layers, first/last attention."""
    targets = []
    fcs = model.layers_of("Linear")
    if fcs:
        targets.append(Target("linear[0]", fcs[0].name, ("weight", "bias")))
        if len(fcs) > 1:
            targets.append(Target("linear[-1]", fcs[-1].name, ("weight", "bias")))
    convs = model.layers_of("Conv2d")
    if convs:
        targets.append(Target("conv[0]", convs[0].name, ("weight", "bias")))
    for i, bn in enumerate(model.layers_of("BatchNorm2d")[:3]):
        targets.append(Target(f"batchnorm[{i}]", bn.name, ("activation",)))
    attn = model.layers_of("Attention")
    if attn:
        targets.append(Target("attention[0]", attn[0].name, ("weight", "bias")))
        if len(attn) > 1:
            targets.append(Target("attention[-1]", attn[-1].name, ("weight", "bias")))
    return targets


def tensor_stats(a) -> dict[str, float]:
    """Mean, population standard deviation and maximum absolute value."""
    a = np.asarray(a, dtype=np.float64).ravel()
    return {"mean": float(a.mean()), "std": float(a.std()), "maxabs": float(np.abs(a).max())}


def _quantity(model: Model, target: Target, quantity: str, trace) -> np.ndarray:
    spec = model.layer(target.layer)
    if quantity == "activation":
        if trace is None or target.layer not in trace.normalized:
            raise ValueError(f"no normalized activations recorded for {target.layer}")
        return trace.normalized[target.layer]
    if spec.kind == "Attention":
        names = ("W_Q", "W_K", "W_V") if quantity == "weight" else ("b_Q", "b_K", "b_V")
        return np.concatenate([model.params[spec.param_key(n)].ravel() for n in names])
    return model.params[spec.param_key(quantity)]


def snapshot_stats(model: Model, trace, targets=None) -> dict[str, float]:
    """``{"<role>.<quantity>.<stat>": value}`` for every target."""
    targets = select_target_layers(model) if targets is None else targets
    snap = {}
    for t in targets:
        for q in t.quantities:
            for stat, v in tensor_stats(_quantity(model, t, q, trace)).items():
                snap[f"{t.label}.{q}.{stat}"] = v
    return snap


@dataclass
class StatHistory:
    """Append-only ``metric -> [(round, iteration, value), ...]``."""

    series: dict[str, list[tuple[int, int, float]]] = field(default_factory=dict)

    def append(self, round_index: int, iteration: int, snapshot: dict[str, float]) -> None:
        for key, value in snapshot.items():
            entries = self.series.setdefault(key, [])
            if entries and entries[-1][:2] >= (round_index, iteration):
                raise ValueError(f"history for {key} must stay time-ordered")
            entries.append((round_index, iteration, float(value)))

    def values(self, key: str) -> np.ndarray:
        return np.array([v for _, _, v in self.series[key]])

    def __contains__(self, key) -> bool:
        return key in self.series

    def __len__(self) -> int:
        return max((len(v) for v in self.series.values()), default=0)

    def copy(self) -> "StatHistory":
        return StatHistory({k: list(v) for k, v in self.series.items()})


class ZScores(dict):
    """Metric -> Z, plus the metrics whose history was too short to score."""

    def __init__(self, *args, insufficient=(), **kw):
        super().__init__(*args, **kw)
        self.insufficient = list(insufficient)


def z_scores(current: dict[str, float], history: StatHistory) -> ZScores:
    """``(x - mu) / max(sigma, 1e-12)`` over each metric's full history (population sigma)."""
    out, short = {}, []
    for key, x in current.items():
        if key not in history:
            raise KeyError(f"metric {key!r} has no history")
        vals = history.values(key)
        if len(vals) < 2:
            out[key] = 0.0
            short.append(key)
            continue
        sigma = max(float(vals.std()), SIGMA_FLOOR)
        out[key] = (x - float(vals.mean())) / sigma
    return ZScores(out, insufficient=short)


# -- warm-up detector -----------------------------------------------------------------


@dataclass(frozen=True)
class WarmupConfig:
    steps: int = 5
    subset: int = 128
    lr: float = 0.1
    threshold: float = DEFAULT_THRESHOLD

    def __post_init__(self):
        if self.steps < 1 or self.subset < 1:
            raise ConfigError("warm-up needs steps >= 1 and subset >= 1")
        if not self.lr > 0 or not self.threshold > 0:
            raise ConfigError("warm-up lr and threshold must be positive")


@dataclass
class DetectionVerdict:
    malicious: bool
    triggers: list[dict]
    findings: dict
    z_table: list[tuple[int, int, str, float, float]]  # (round, iter, metric, value, z)
    max_abs_z: float = 0.0

    @property
    def flag(self) -> str:
        return "malicious" if self.malicious else "benign"

    def to_dict(self) -> dict:
        return {
            "flag": self.flag,
            "max_abs_z": self.max_abs_z,
            "triggers": self.triggers,
            "findings": self.findings,
            "z": [{"round": r, "iter": i, "metric": k, "value": v, "z": z} for r, i, k, v, z in self.z_table],
        }


def inspect_model(model: Model, expected=None) -> tuple[dict, list[dict]]:
    """Run every parameter inspector; returns ``(findings, triggers)``."""
    findings: dict = {}
    triggers: list[dict] = []
    if expected is not None:
        check = verify_architecture(expected, model)
        findings["architecture"] = check.to_dict()
        if not check.accepted:
            triggers.append({"source": "architecture", "reason": check.reason, "details": list(check.details)})
    for spec in model.layers_of("Conv2d"):
        ratios = kernel_ratio(model.params[spec.param_key("weight")])
        top = float(ratios.max())
        findings.setdefault("kernel_ratio", {})[spec.name] = top
        if top > KERNEL_RATIO_LIMIT:
            triggers.append({"source": "kernel_ratio", "layer": spec.name, "value": top})
    fcs = model.layers_of("Linear")
    if fcs and fcs[0].config["out_features"] >= 8:
        fc = fcs[0]
        sig = imprint_signature(model.params[fc.param_key("weight")], model.params[fc.param_key("bias")])
        findings["imprint_signature"] = {fc.name: sig.to_dict()}
        if sig.flagged:
            triggers.append({"source": "imprint_signature", "layer": fc.name, **sig.to_dict()})
    for spec in model.layers_of("Attention"):
        sig = attention_signature(model.layer_params(spec))
        findings.setdefault("attention_signature", {})[spec.name] = sig.to_dict()
        if sig.flagged:
            triggers.append({"source": "attention_signature", "layer": spec.name, **sig.to_dict()})
    return findings, triggers


def warmup_subset(n: int, size: int, seed: int, client_id: int, round_index: int) -> np.ndarray:
    if size > n:
        raise ConfigError(f"warm-up subset {size} exceeds local dataset size {n}")
    return sample_batch(n, size, seed, "warmup", client_id, round_index)


def warmup_detect(model: Model, client: ClientState, config: WarmupConfig = WarmupConfig(),
                  history: StatHistory | None = None, seed: int = 0) -> DetectionVerdict:
    """Inspect the received model, then profile ``config.steps`` SGD steps on a fixed subset.

    Each snapshot is scored against the history accumulated so far (prior
    rounds plus earlier steps of this warm-up). The new entries are committed
    to ``history`` only when the round is judged benign.
    """
    if history is None:
        if client.history is None:
            client.history = StatHistory()
        history = client.history
    findings, triggers = inspect_model(model, client.expected_manifest)
    idx = warmup_subset(len(client.dataset), config.subset, seed, client.id, client.round)
    x, y = client.dataset.inputs[idx], client.dataset.labels[idx]
    targets = select_target_layers(model)
    working = history.copy()
    cold = len(history) == 0
    table = []
    max_z = 0.0
    for it in range(1, config.steps + 1):
        _, trace = forward(model, x, "train")
        model = sgd_step(model, backward(model, trace, y), config.lr)
        snap = snapshot_stats(model, trace, targets)
        known = {k: v for k, v in snap.items() if k in working}
        z = z_scores(known, working) if not (cold and it == 1) else ZScores()
        for key in sorted(snap):
            zk = z.get(key, 0.0)
            table.append((client.round, it, key, snap[key], zk))
            if not math.isfinite(snap[key]) or abs(zk) > config.threshold:
                triggers.append({"source": "zscore", "metric": key, "value": snap[key], "z": zk, "iteration": it})
            if math.isfinite(zk):
                max_z = max(max_z, abs(zk))
        working.append(client.round, it, snap)
    malicious = bool(triggers)
    if not malicious:
        history.series = working.series
    return DetectionVerdict(malicious, triggers, findings, table, max_z)
