"""Malicious-server model manipulations and their analytic reconstructions."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import ClassVar

import numpy as np

from .errors import ReconstructionError
from .flsim import GRADIENT, ClientState, RoundUpdate, fedavg_local_train, fedsgd_client_step
from .nn import Model, per_sample_gradients
from .nn.model import relabel
from .rng import make_rng

BIAS_FLOOR = 1e-9

# Rational approximation of the inverse normal CDF (P. J. Acklam), relative
# error ~1.15e-9 before refinement.
_A = (-3.969683028665376e01, 2.209460984245205e02, -2.759285104469687e02,
      1.383577518672690e02, -3.066479806614716e01, 2.506628277459239e00)
_B = (-5.447609879822406e01, 1.615858368580409e02, -1.556989798598866e02,
      6.680131188771972e01, -1.328068155288572e01)
_C = (-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e00,
      -2.549732539343734e00, 4.374664141464968e00, 2.938163982698783e00)
_D = (7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e00, 3.754408661907416e00)
_P_LOW = 0.02425


def normal_cdf(x: float) -> float:
    return 0.5 * math.erfc(-x / math.sqrt(2.0))


def probit(p: float) -> float:
    """Inverse of the standard normal CDF on (0, 1)."""
    if not 0.0 < p < 1.0:
        raise ValueError(f"probit needs 0 < p < 1, got {p}")
    if p < _P_LOW:
        q = math.sqrt(-2.0 * math.log(p))
        x = (((((_C[0] * q + _C[1]) * q + _C[2]) * q + _C[3]) * q + _C[4]) * q + _C[5]) / \
            ((((_D[0] * q + _D[1]) * q + _D[2]) * q + _D[3]) * q + 1.0)
    elif p <= 1.0 - _P_LOW:
        q = p - 0.5
        r = q * q
        x = (((((_A[0] * r + _A[1]) * r + _A[2]) * r + _A[3]) * r + _A[4]) * r + _A[5]) * q / \
            (((((_B[0] * r + _B[1]) * r + _B[2]) * r + _B[3]) * r + _B[4]) * r + 1.0)
    else:
        q = math.sqrt(-2.0 * math.log1p(-p))
        x = -(((((_C[0] * q + _C[1]) * q + _C[2]) * q + _C[3]) * q + _C[4]) * q + _C[5]) / \
            ((((_D[0] * q + _D[1]) * q + _D[2]) * q + _D[3]) * q + 1.0)
    # one Newton step against the erfc-based CDF
    pdf = math.exp(-0.5 * x * x) / math.sqrt(2.0 * math.pi)
    if pdf > 0.0:
        x -= (normal_cdf(x) - p) / pdf
    return x


def dct2_basis(m: int, frequency: int) -> np.ndarray:
    """Orthonormal DCT-II basis vector of length ``m``."""
    if not 0 <= frequency < m:
        raise ValueError(f"frequency must lie in [0, {m})")
    n = np.arange(m)
    scale = math.sqrt(1.0 / m) if frequency == 0 else math.sqrt(2.0 / m)
    return scale * np.cos(math.pi * (2 * n + 1) * frequency / (2 * m))


def imprint_biases(k: int) -> np.ndarray:
    """``-probit(i / (k + 1))`` for ``i = 1..k``: strictly decreasing."""
    if k < 2:
        raise ValueError("imprint needs k >= 2 bins")
    return np.array([-probit(i / (k + 1)) for i in range(1, k + 1)])


# -- plans -------------------------------------------------------------------


@dataclass
class AttackPlan:
    kind: ClassVar[str] = ""

    def to_dict(self) -> dict:
        return {"kind": self.kind, **asdict(self)}

    @staticmethod
    def from_dict(d: dict) -> "AttackPlan":
        d = dict(d)
        kind = d.pop("kind")
        for cls in (ImprintPlan, CuriousPlan, FishingPlan, DecepticonsPlan):
            if cls.kind.lower() == str(kind).lower():
                return cls(**d)
        raise ValueError(f"unknown attack kind {kind!r}")

    def apply(self, model: Model) -> Model:
        raise NotImplementedError


@dataclass
class ImprintPlan(AttackPlan):
    kind: ClassVar[str] = "Imprint"
    bins: int = 64
    measurement: str = "brightness"
    channel: int | None = None
    family: str = "uniform_mean"
    dct_frequency: int = 1
    insert: bool = True
    seed: int = 0
    # attacker's prior on the measurement: bins sit at quantiles of N(mu, sigma^2)
    mu: float = 0.0
    sigma: float = 1.0

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError("measurement scale sigma must be positive")
        if self.bins < 2:
            raise ValueError("Imprint needs bins >= 2")
        if self.family not in ("uniform_mean", "dct2"):
            raise ValueError(f"unknown weight family {self.family!r}")

    def apply(self, model):
        return apply_imprint(model, self)


@dataclass
class CuriousPlan(AttackPlan):
    kind: ClassVar[str] = "CuriousIdentity"
    scale: float = 1.0
    thresholds: list | None = None

    def __post_init__(self):
        if not self.scale > 0:
            raise ValueError("identity scale must be positive")

    def apply(self, model):
        return apply_curious(model, self)


@dataclass
class FishingPlan(AttackPlan):
    kind: ClassVar[str] = "Fishing"
    target_class: int = 0
    alpha: float = 1000.0
    theta: float = 1.0

    def __post_init__(self):
        if not math.isfinite(self.alpha):
            raise ValueError("alpha must be finite")

    def apply(self, model):
        return apply_fishing(model, self.target_class, self.alpha, self.theta)


@dataclass
class DecepticonsPlan(AttackPlan):
    kind: ClassVar[str] = "DecepticonsAttention"
    gamma: float = 1.0
    d_prime: int = 1
    p0: list | None = None

    def __post_init__(self):
        if self.gamma == 0:
            raise ValueError("gamma must be non-zero")

    def apply(self, model):
        d = model.layers_of("Attention")[0].config["d_model"] if model.layers_of("Attention") else 0
        p0 = np.asarray(self.p0) if self.p0 is not None else default_positional(d)
        return apply_decepticons(model, self.gamma, self.d_prime, p0)


def default_positional(d_model: int) -> np.ndarray:
    """Sinusoidal encoding of position 0: ``[sin 0, cos 0, ...] = [0, 1, 0, 1, ...]``."""
    return np.array([0.0 if j % 2 == 0 else 1.0 for j in range(d_model)])


# -- manipulations -------------------------------------------------------------


def _param_layers(model: Model):
    return [(i, l) for i, l in enumerate(model.layers) if l.impl.params]


def measurement_weights(sample_shape, plan: ImprintPlan) -> np.ndarray:
    """Row vector ``w`` with ``<w, flatten(x)> = h(x)``."""
    m = int(np.prod(sample_shape))
    if plan.family == "dct2":
        return dct2_basis(m, plan.dct_frequency)
    if plan.measurement == "brightness":
        return np.full(m, 1.0 / m)
    if plan.measurement == "channel_mean":
        if len(sample_shape) != 3 or plan.channel is None or not 0 <= plan.channel < sample_shape[0]:
            raise ValueError("channel_mean needs image-shaped input and a valid channel")
        w = np.zeros(sample_shape)
        w[plan.channel] = 1.0 / (sample_shape[1] * sample_shape[2])
        return w.reshape(-1)
    raise ValueError(f"unknown measurement {plan.measurement!r}")


def apply_imprint(model: Model, plan: ImprintPlan) -> Model:
    """Turn the first FC layer into ``plan.bins`` imprint bins.

    If the first parametrised layer is a Linear with ``bins`` outputs, it is
    rewritten in place and every column of the following Linear is set to the
    same vector (so a sample's error signal is identical across bins). Otherwise
    ``Flatten -> Linear(m, k) -> ReLU -> Linear(k, m) -> Unflatten`` is
    prepended, which changes the architecture.
    """
    k = plan.bins
    biases = imprint_biases(k) - plan.mu / plan.sigma
    players = _param_layers(model)
    first_fc = players[0] if players and players[0][1].kind == "Linear" else None
    if first_fc is not None:
        idx, fc = first_fc
        if fc.config["out_features"] != k:
            raise ValueError(f"first Linear has {fc.config['out_features']} outputs; in-place imprint needs {k}")
        in_shape = model.shapes()[idx]
        sample_shape = model.input_shape if in_shape[0] == int(np.prod(model.input_shape)) else in_shape
        w = measurement_weights(sample_shape, plan) / plan.sigma
        params = {fc.param_key("weight"): np.tile(w, (k, 1)), fc.param_key("bias"): biases}
        following = [l for j, l in players if j > idx and l.kind == "Linear"]
        if following:
            nxt = following[0]
            weight = model.params[nxt.param_key("weight")]
            params[nxt.param_key("weight")] = np.tile(weight[:, :1], (1, weight.shape[1]))
        return model.replace(params=params)
    if not plan.insert:
        raise ValueError("model has no leading FC layer and insertion is disabled")
    shape = model.input_shape
    m = int(np.prod(shape))
    w = measurement_weights(shape, plan) / plan.sigma
    defs = [
        ("Flatten", {}),
        ("Linear", {"in_features": m, "out_features": k}),
        ("ReLU", {}),
        ("Linear", {"in_features": k, "out_features": m}),
        ("Unflatten", {"shape": list(shape)}),
    ] + [(l.kind, l.config) for l in model.layers]
    layers = relabel(defs)
    decoder = make_rng(plan.seed, "imprint-decoder").normal(scale=1.0 / math.sqrt(k), size=(m, 1))
    params = {
        layers[1].param_key("weight"): np.tile(w, (k, 1)),
        layers[1].param_key("bias"): biases,
        layers[3].param_key("weight"): np.tile(decoder, (1, k)),
        layers[3].param_key("bias"): np.zeros(m),
    }
    buffers = {}
    for new, old in zip(layers[5:], model.layers):
        params.update({new.param_key(p): model.params[old.param_key(p)] for p in old.impl.params})
        buffers.update({new.param_key(p): model.buffers[old.param_key(p)] for p in old.impl.buffers})
    return Model(layers, model.input_shape, params, buffers)


def apply_identity_convs(model: Model, scale: float = 1.0) -> Model:
    """Set every leading Conv2d (up to the first Linear) to a scaled identity map."""
    if not model.layers or model.layers[0].kind != "Conv2d":
        raise ValueError("identity-conv manipulation needs a Conv2d first layer")
    params = {}
    for spec in model.layers:
        if spec.kind == "Linear":
            break
        if spec.kind != "Conv2d":
            continue
        cfg = spec.config
        k = cfg["kernel_size"]
        if k % 2 == 0:
            raise ValueError(f"{spec.name}: even kernel size {k} has no center")
        out_ch, in_ch = cfg["out_channels"], cfg["in_channels"]
        if in_ch != out_ch and in_ch != 1:
            raise ValueError(f"{spec.name}: cannot build identity from {in_ch} to {out_ch} channels")
        kernel = np.zeros((out_ch, in_ch, k, k))
        for o in range(out_ch):
            kernel[o, o if in_ch == out_ch else 0, k // 2, k // 2] = scale
        params[spec.param_key("weight")] = kernel
        params[spec.param_key("bias")] = np.zeros(out_ch)
    return model.replace(params=params)


def isolating_thresholds(measurements) -> np.ndarray:
    """Midpoints between consecutive sorted measurements.

    A unit firing above the last threshold is active for exactly one sample.
    """
    v = np.sort(np.asarray(measurements, dtype=np.float64))
    return 0.5 * (v[:-1] + v[1:])


def apply_curious_fc(model: Model, thresholds, scale: float = 1.0) -> Model:
    """Program the first Linear as brightness units firing above ``thresholds``.

    Unit ``i`` computes ``mean(x) - thresholds[i]`` (inputs scaled by ``scale``
    upstream are accounted for); remaining units are disabled.
    """
    fcs = [(i, l) for i, l in enumerate(model.layers) if l.kind == "Linear"]
    if not fcs:
        raise ValueError("model has no Linear layer")
    idx, fc = fcs[0]
    out, m = fc.config["out_features"], fc.config["in_features"]
    thresholds = np.asarray(thresholds, dtype=np.float64)
    if len(thresholds) > out:
        raise ValueError(f"{len(thresholds)} thresholds but only {out} units")
    weight = np.zeros((out, m))
    bias = np.full(out, -1.0)
    weight[: len(thresholds)] = 1.0 / m
    bias[: len(thresholds)] = -scale * thresholds
    return model.replace(params={fc.param_key("weight"): weight, fc.param_key("bias"): bias})


def apply_curious(model: Model, plan: CuriousPlan) -> Model:
    depth = 0
    if model.layers and model.layers[0].kind == "Conv2d":
        model = apply_identity_convs(model, plan.scale)
        depth = _identity_depth(model)
    fc = model.layers_of("Linear")[0]
    units = fc.config["out_features"]
    thresholds = plan.thresholds
    if thresholds is None:
        thresholds = (np.arange(1, units + 1) / (units + 1)).tolist()
    return apply_curious_fc(model, thresholds, plan.scale ** depth)


def _identity_depth(model: Model) -> int:
    n = 0
    for spec in model.layers:
        if spec.kind == "Linear":
            break
        n += spec.kind == "Conv2d"
    return n


def apply_fishing(model: Model, c: int, alpha: float = 1000.0, theta: float = 1.0) -> Model:
    """Zero every last-layer row except ``c`` (scaled by ``theta``); other biases := alpha."""
    if not model.layers or model.layers[-1].kind != "Linear":
        raise ValueError("fishing needs a final Linear layer")
    last = model.layers[-1]
    weight = model.params[last.param_key("weight")]
    bias = model.params[last.param_key("bias")]
    if not 0 <= c < weight.shape[0]:
        raise ValueError(f"target class {c} out of range for {weight.shape[0]} classes")
    new_w = np.zeros_like(weight)
    new_w[c] = theta * weight[c]
    new_b = np.full_like(bias, alpha)
    new_b[c] = bias[c]
    return model.replace(params={last.param_key("weight"): new_w, last.param_key("bias"): new_b})


def apply_decepticons(model: Model, gamma: float, d_prime: int, p0) -> Model:
    """``W_K = I, b_K = 0, W_Q = 0, b_Q = gamma * p0, W_V = I_{d'}, b_V = 0`` on every attention layer."""
    attn = model.layers_of("Attention")
    if not attn:
        raise ValueError("model has no Attention layer")
    if gamma == 0:
        raise ValueError("gamma must be non-zero")
    params = {}
    for spec in attn:
        d = spec.config["d_model"]
        p0 = np.asarray(p0, dtype=np.float64)
        if p0.shape != (d,):
            raise ValueError(f"p0 has length {p0.size}, d_model is {d}")
        if not 1 <= d_prime <= d:
            raise ValueError(f"d_prime must lie in [1, {d}]")
        w_v = np.zeros((d, d))
        w_v[np.arange(d_prime), np.arange(d_prime)] = 1.0
        params.update({
            spec.param_key("W_K"): np.eye(d),
            spec.param_key("b_K"): np.zeros(d),
            spec.param_key("W_Q"): np.zeros((d, d)),
            spec.param_key("b_Q"): gamma * p0,
            spec.param_key("W_V"): w_v,
            spec.param_key("b_V"): np.zeros(d),
        })
    return model.replace(params=params)


# -- reconstruction --------------------------------------------------------------


@dataclass
class ReconstructionResult:
    candidates: list[np.ndarray] = field(default_factory=list)
    sources: list = field(default_factory=list)  # bin pair or unit index per candidate
    skipped: list = field(default_factory=list)
    matches: list[tuple[int, float]] = field(default_factory=list)
    evidence: dict = field(default_factory=dict)

    @property
    def errors(self) -> np.ndarray:
        return np.array([e for _, e in self.matches])

    @property
    def min_error(self) -> float:
        return float(self.errors.min()) if self.matches else float("inf")

    @property
    def mean_error(self) -> float:
        return float(self.errors.mean()) if self.matches else float("inf")

    def match(self, truth) -> "ReconstructionResult":
        """Pair every candidate with its closest true sample (relative L2 error)."""
        truth = np.asarray(truth, dtype=np.float64).reshape(len(truth), -1)
        norms = np.linalg.norm(truth, axis=1)
        self.matches = []
        for cand in self.candidates:
            err = np.linalg.norm(truth - cand.reshape(1, -1), axis=1) / np.where(norms > 0, norms, 1.0)
            j = int(np.argmin(err))
            self.matches.append((j, float(err[j])))
        return self

    def summary(self) -> dict:
        return {
            "n_candidates": len(self.candidates),
            "n_skipped": len(self.skipped),
            "min_error": self.min_error,
            "mean_error": self.mean_error,
            "matches": [{"sample": j, "rel_error": e, "source": s} for (j, e), s in zip(self.matches, self.sources)],
            "evidence": self.evidence,
        }


def imprint_thresholds(plan: ImprintPlan) -> np.ndarray:
    """Measurement values at which each bin switches on (increasing)."""
    return plan.mu - plan.sigma * imprint_biases(plan.bins)


def reconstruct_imprint(grad_w, grad_b, floor: float = BIAS_FLOOR, sample_shape=None) -> ReconstructionResult:
    """Recover inputs from differences of adjacent imprint bins.

    The last bin is paired with an implicit empty bin, so a sample that alone
    exceeds the highest threshold is recovered too.
    """
    grad_w = np.asarray(grad_w, dtype=np.float64)
    grad_b = np.asarray(grad_b, dtype=np.float64)
    k = grad_b.shape[0]
    if grad_w.ndim != 2 or grad_w.shape[0] != k:
        raise ValueError(f"grad_w {grad_w.shape} and grad_b {grad_b.shape} are inconsistent")
    result = ReconstructionResult()
    zero_w, zero_b = np.zeros(grad_w.shape[1]), 0.0
    for i in range(k):
        w_next, b_next = (grad_w[i + 1], grad_b[i + 1]) if i + 1 < k else (zero_w, zero_b)
        db = grad_b[i] - b_next
        if abs(db) <= floor:
            result.skipped.append((i, i + 1))
            continue
        cand = (grad_w[i] - w_next) / db
        result.candidates.append(cand.reshape(sample_shape) if sample_shape is not None else cand)
        result.sources.append((i, i + 1))
    return result


def curious_reconstruct(grad_w_row, grad_b_i: float, floor: float = BIAS_FLOOR) -> np.ndarray:
    """``x = dL/dw_i / dL/db_i`` for a unit activated by a single sample."""
    if abs(grad_b_i) <= floor:
        raise ReconstructionError(f"|dL/db| = {abs(grad_b_i):.3g} <= {floor}: unit not exclusively activated")
    return np.asarray(grad_w_row, dtype=np.float64) / grad_b_i


# -- orchestration -----------------------------------------------------------------


@dataclass(frozen=True)
class Protocol:
    kind: str = "fedsgd"  # or "fedavg"
    epochs: int = 1
    batch_size: int | None = None  # None: whole local dataset
    lr: float = 0.1

    def __post_init__(self):
        if self.kind not in ("fedsgd", "fedavg"):
            raise ValueError(f"unknown protocol {self.kind!r}")


def client_update(model: Model, client: ClientState, protocol: Protocol, seed: int) -> RoundUpdate:
    batch = protocol.batch_size or len(client.dataset)
    if protocol.kind == "fedsgd":
        return fedsgd_client_step(model, client, batch, seed)
    return fedavg_local_train(model, client, protocol.epochs, batch, protocol.lr, seed)


def pseudo_gradient(update: RoundUpdate, lr: float) -> dict[str, np.ndarray]:
    """Gradients as seen by the server: exact for FedSGD, ``delta / (-lr * steps)`` for FedAvg."""
    if update.kind == GRADIENT:
        return update.payload
    return {k: v / (-lr * update.steps) for k, v in update.payload.items()}


def _first_linear(model: Model):
    for i, spec in enumerate(model.layers):
        if spec.kind == "Linear":
            return i, spec
    raise ValueError("model has no Linear layer")


def _fc_sample_shape(model: Model, idx: int, spec):
    return model.input_shape if spec.config["in_features"] == int(np.prod(model.input_shape)) else None


def run_attack_round(plan: AttackPlan, server_model: Model, client: ClientState, protocol: Protocol,
                     seed: int) -> tuple[ReconstructionResult, RoundUpdate]:
    """Manipulate, distribute, let the client train, then reconstruct from its update."""
    from . import detect

    model = plan.apply(server_model)
    update = client_update(model, client, protocol, seed)
    grads = pseudo_gradient(update, protocol.lr)
    truth = client.dataset.inputs

    if isinstance(plan, (ImprintPlan, CuriousPlan)):
        idx, fc = _first_linear(model)
        gw, gb = grads[fc.param_key("weight")], grads[fc.param_key("bias")]
        shape = _fc_sample_shape(model, idx, fc)
        if isinstance(plan, ImprintPlan):
            result = reconstruct_imprint(gw, gb, sample_shape=shape)
        else:
            result = ReconstructionResult()
            undo = plan.scale ** _identity_depth(model)
            for i in range(gb.shape[0]):
                try:
                    cand = curious_reconstruct(gw[i], gb[i]) / undo
                except ReconstructionError:
                    result.skipped.append(i)
                    continue
                result.candidates.append(cand.reshape(shape) if shape is not None else cand)
                result.sources.append(i)
        if shape is not None:
            result.match(truth)
        return result, update

    result = ReconstructionResult()
    if isinstance(plan, FishingPlan):
        last = model.layers[-1]
        gw = grads[last.param_key("weight")]
        c = plan.target_class
        others = np.delete(gw, c, axis=0)
        result.evidence = {
            "target_class": c,
            "target_count": int((client.dataset.labels == c).sum()),
            "target_row_grad_norm": float(np.linalg.norm(gw[c])),
            "other_rows_grad_norm": float(np.linalg.norm(others)),
        }
        if protocol.kind == "fedsgd":
            batch = protocol.batch_size or len(client.dataset)
            from .flsim import sample_batch

            bidx = sample_batch(len(client.dataset), batch, seed, client.id, client.round)
            psg = per_sample_gradients(model, truth[bidx], client.dataset.labels[bidx])
            per_layer, overall = detect.d_snr(psg)
            result.evidence["d_snr"] = overall
            result.evidence["d_snr_per_layer"] = per_layer
            norms = np.array([np.linalg.norm(g) for g in psg[model.layers[0].param_key("weight")]])
            result.evidence["dominant_sample"] = int(np.argmax(norms))
            result.evidence["dominant_label"] = int(client.dataset.labels[bidx][np.argmax(norms)])
    elif isinstance(plan, DecepticonsPlan):
        result.evidence = {
            spec.name: detect.attention_signature(model.layer_params(spec)).to_dict()
            for spec in model.layers_of("Attention")
        }
    return result, update
