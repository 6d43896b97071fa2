"""Bin-capture and min-property probabilities, BN gradient coupling, FedAvg degradation."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import attacks
from .datagen import gen_images, measure_batch
from .flsim import ClientState
from .nn import Model, per_sample_gradients, zoo
from .rng import make_rng

CHUNK = 8192


@dataclass(frozen=True)
class ProbabilityEstimate:
    estimate: float
    trials: int
    stderr: float
    reference: float | None = None

    @classmethod
    def from_count(cls, successes: int, trials: int, reference=None) -> "ProbabilityEstimate":
        p = successes / trials
        return cls(p, trials, math.sqrt(p * (1.0 - p) / trials), reference)

    def within(self, sigmas: float = 3.0) -> bool:
        """Does the reference lie within ``sigmas`` standard errors?"""
        if self.reference is None:
            raise ValueError("no reference value to compare with")
        return abs(self.estimate - self.reference) <= sigmas * self.stderr

    def to_dict(self) -> dict:
        return asdict(self)


def closed_form_p1(m: int) -> float:
    """Probability that a given bin out of ``m`` holds exactly one of ``m`` samples."""
    if m < 2:
        raise ValueError("closed_form_p1 needs M >= 2")
    # log1p keeps the sequence strictly decreasing for large M
    return math.exp((m - 1) * math.log1p(-1.0 / m))


def exact_bin_capture(m: int, n: int) -> float:
    """Binomial reference for ``n`` samples over ``m`` bins: ``n/m (1 - 1/m)^(n-1)``."""
    return n / m * (1.0 - 1.0 / m) ** (n - 1)


def _chunks(trials: int):
    done = 0
    while done < trials:
        size = min(CHUNK, trials - done)
        yield done, size
        done += size


def mc_bin_capture(m: int, n: int | None = None, trials: int = 100_000, seed: int = 0) -> ProbabilityEstimate:
    """Fraction of trials in which bin 0 receives exactly one of ``n`` uniform samples."""
    n = m if n is None else n
    if m < 1 or n < 1 or trials < 1:
        raise ValueError("need m >= 1, n >= 1, trials >= 1")
    hits = 0
    for start, size in _chunks(trials):
        rng = make_rng(seed, "bin-capture", m, n, start)
        bins = rng.integers(0, m, size=(size, n))
        hits += int(((bins == 0).sum(axis=1) == 1).sum())
    return ProbabilityEstimate.from_count(hits, trials, exact_bin_capture(m, n))


def mc_min_property(batch: int, feature_dist: str = "continuous_uniform", trials: int = 10_000,
                    seed: int = 0) -> ProbabilityEstimate:
    """Fraction of trials in which exactly one sample attains the strict batch minimum."""
    if batch < 1 or trials < 1:
        raise ValueError("need batch >= 1 and trials >= 1")
    if feature_dist not in ("continuous_uniform", "constant"):
        raise ValueError(f"unknown feature distribution {feature_dist!r}")
    hits = 0
    for start, size in _chunks(trials):
        if feature_dist == "constant":
            feats = np.full((size, batch), 0.5)
        else:
            feats = make_rng(seed, "min-property", batch, start).random((size, batch))
        ties = (feats == feats.min(axis=1, keepdims=True)).sum(axis=1)
        hits += int((ties == 1).sum())
    return ProbabilityEstimate.from_count(hits, trials)


def _flat_sample_grad(psg, i: int) -> np.ndarray:
    return np.concatenate([psg.grads[k][i].ravel() for k in sorted(psg.grads)])


def gradient_coupling(model: Model, inputs, labels, i: int, j: int, delta) -> float:
    """``||g_i(x with x_j + delta) - g_i(x)||`` for per-sample gradients."""
    if i == j:
        raise ValueError("coupling needs two distinct samples")
    x = np.array(inputs, dtype=np.float64)
    before = _flat_sample_grad(per_sample_gradients(model, x, labels), i)
    x[j] = x[j] + delta
    after = _flat_sample_grad(per_sample_gradients(model, x, labels), i)
    return float(np.linalg.norm(after - before))


def bn_coupling(model: Model, inputs, labels, i: int, j: int, delta, groups: int = 2) -> dict[str, float]:
    """Cross-sample gradient sensitivity with BatchNorm versus per-sample norms.

    ``model`` must use BatchNorm2d; the controls swap every BN layer for
    LayerNorm and GroupNorm while keeping all other parameters.
    """
    if i == j:
        raise ValueError("coupling needs two distinct samples")
    if not model.layers_of("BatchNorm2d"):
        raise ValueError("model has no BatchNorm2d layer")
    out = {"bn_change": gradient_coupling(model, inputs, labels, i, j, delta)}
    for norm in ("layer", "group"):
        variant = zoo.substitute_norm(model, norm, groups=groups)
        out[f"{norm}_change"] = gradient_coupling(variant, inputs, labels, i, j, delta)
    out["control_change"] = max(out["layer_change"], out["group_change"])
    return out


# -- imprint under FedAvg --------------------------------------------------------------


def bin_index(values, plan: "attacks.ImprintPlan") -> np.ndarray:
    """Number of bins switched on by each measurement value."""
    return np.searchsorted(attacks.imprint_thresholds(plan), np.asarray(values), side="left")


def select_separated(inputs, plan: "attacks.ImprintPlan", count: int) -> np.ndarray:
    """Indices of ``count`` samples that fall into pairwise distinct bin intervals.

    Samples switching on no bin are skipped. Picks are spread across the
    occupied intervals from the lowest to the highest.
    """
    bins = bin_index(measure_batch(inputs, plan.measurement, plan.channel), plan)
    first = {}
    for idx, b in enumerate(bins):
        if b > 0 and b not in first:
            first[int(b)] = idx
    if len(first) < count:
        raise ValueError(f"only {len(first)} distinct bins occupied, need {count}")
    keys = sorted(first)
    picks = np.linspace(0, len(keys) - 1, count).round().astype(int)
    return np.array(sorted(first[keys[p]] for p in picks))


def imprint_experiment(seed: int = 0, bins: int = 64, batch: int = 8, pool: int = 256,
                       shape=(3, 8, 8)) -> tuple[Model, ClientState, "attacks.ImprintPlan"]:
    """Toy CNN, a victim holding ``batch`` brightness-separated images, and the plan."""
    data = gen_images(pool, *shape, brightness_spread=1.0, seed=seed)
    plan = attacks.ImprintPlan(bins=bins, mu=0.5, sigma=0.25, seed=seed)
    idx = select_separated(data.inputs, plan, batch)
    model = zoo.toy_cnn(input_shape=shape, seed=seed)
    return model, ClientState(0, data.subset(idx)), plan


def fedavg_degradation(plan: "attacks.ImprintPlan", local_steps, seed: int = 0, lr: float = 0.1,
                       model: Model | None = None, client: ClientState | None = None) -> list[tuple[int, float]]:
    """Minimum imprint reconstruction error after ``s`` full-batch local steps, per ``s``."""
    steps = list(local_steps)
    if not steps or steps[0] != 1 or steps != sorted(steps):
        raise ValueError("local_steps must be ascending and start at 1")
    if model is None or client is None:
        model, client, _ = imprint_experiment(seed, bins=plan.bins)
    curve = []
    for s in steps:
        protocol = attacks.Protocol("fedavg", epochs=s, batch_size=len(client.dataset), lr=lr)
        result, _ = attacks.run_attack_round(plan, model, client, protocol, seed)
        curve.append((s, result.min_error))
    return curve
