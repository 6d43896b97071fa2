"""Experiment configuration: INI-style sections flattened into dotted keys.

Grammar: ``[section]`` headers followed by ``key = value`` lines; ``#`` and
``;`` start comments. ``[model] kind = toy_cnn`` becomes ``model.kind``.
Lists are comma separated. Unknown sections or keys are errors.
"""

from __future__ import annotations

import configparser
import math
from dataclasses import dataclass, field

from ..attacks import AttackPlan, CuriousPlan, DecepticonsPlan, FishingPlan, ImprintPlan, Protocol
from ..detect import DEFAULT_THRESHOLD, WarmupConfig
from ..errors import ConfigError
from ..nn import Model, zoo

SCHEMA: dict[str, dict[str, type]] = {
    "run": {"seed": int, "rounds": int, "out": str},
    "model": {"kind": str, "input_shape": tuple, "channels": int, "classes": int, "norm": str, "depth": int,
              "hidden": int, "in_dim": int, "tokens": int, "d_model": int, "blocks": int},
    "data": {"generator": str, "clients": int, "per_client": int, "brightness_spread": float,
             "sigma": float, "noise": float},
    "protocol": {"kind": str, "batch_size": int, "epochs": int, "lr": float, "lr_server": float},
    "attack": {"kind": str, "rounds": tuple, "victim": int, "bins": int, "measurement": str, "channel": int,
               "family": str, "dct_frequency": int, "mu": float, "sigma": float, "scale": float,
               "target_class": int, "alpha": float, "theta": float, "gamma": float, "d_prime": int},
    "detect": {"enabled": bool, "steps": int, "subset": int, "lr": float, "threshold": float},
}

PLAN_FIELDS = {
    "imprint": (ImprintPlan, ("bins", "measurement", "channel", "family", "dct_frequency", "mu", "sigma")),
    "curiousidentity": (CuriousPlan, ("scale",)),
    "fishing": (FishingPlan, ("target_class", "alpha", "theta")),
    "decepticonsattention": (DecepticonsPlan, ("gamma", "d_prime")),
}


def parse_flat(text: str) -> dict[str, str]:
    """Parse config text into ``{"section.key": raw string}``."""
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as e:
        raise ConfigError(f"malformed config: {e}") from None
    flat = {}
    for section in parser.sections():
        if section not in SCHEMA:
            raise ConfigError(f"unknown section [{section}]")
        for key, value in parser.items(section):
            if key not in SCHEMA[section]:
                raise ConfigError(f"unknown key {section}.{key}")
            flat[f"{section}.{key}"] = value
    return flat


def _convert(key: str, raw: str, kind: type):
    try:
        if kind is bool:
            low = raw.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if kind is tuple:
            return tuple(int(v) for v in raw.split(",") if v.strip())
        if kind is int:
            return int(raw)
        if kind is float:
            value = float(raw)
            if not math.isfinite(value):
                raise ValueError(raw)
            return value
        return raw.strip()
    except ValueError:
        raise ConfigError(f"{key}: cannot read {raw!r} as {kind.__name__}") from None


def typed(flat: dict[str, str]) -> dict[str, object]:
    out = {}
    for key, raw in flat.items():
        section, name = key.split(".", 1)
        out[key] = _convert(key, raw, SCHEMA[section][name])
    return out


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    rounds: int = 20
    out: str | None = None
    model: dict = field(default_factory=lambda: {"kind": "toy_cnn"})
    data: dict = field(default_factory=dict)
    protocol: Protocol = Protocol("fedsgd", batch_size=32)
    lr_server: float = 0.1
    attack: AttackPlan | None = None
    attack_rounds: tuple[int, ...] = ()
    victim: int = 0
    detect: WarmupConfig | None = WarmupConfig()
    values: dict = field(default_factory=dict)  # the typed dotted keys as given

    @property
    def clients(self) -> int:
        return self.data.get("clients", 2)

    def build_model(self) -> Model:
        return build_model(self.model, self.seed)

    def to_dict(self) -> dict:
        return dict(sorted(self.values.items()))


def build_model(spec: dict, seed: int) -> Model:
    spec = dict(spec)
    kind = spec.pop("kind", "toy_cnn")
    try:
        if kind == "toy_cnn":
            if "input_shape" in spec:
                spec["input_shape"] = tuple(spec["input_shape"])
            if spec.get("norm") == "none":
                spec["norm"] = None
            return zoo.toy_cnn(seed=seed, **spec)
        if kind == "toy_mlp":
            return zoo.toy_mlp(seed=seed, **spec)
        if kind == "toy_transformer":
            return zoo.toy_transformer(seed=seed, **spec)
    except TypeError as e:
        raise ConfigError(f"model.{kind}: {e}") from None
    except ValueError as e:
        raise ConfigError(f"model: {e}") from None
    raise ConfigError(f"unknown model kind {kind!r}")


def _section(values: dict, name: str) -> dict:
    prefix = name + "."
    return {k[len(prefix):]: v for k, v in values.items() if k.startswith(prefix)}


def build_config(values: dict) -> ExperimentConfig:
    """Validate typed dotted keys and assemble an :class:`ExperimentConfig`."""
    run, model, data = _section(values, "run"), _section(values, "model"), _section(values, "data")
    proto, att, det = _section(values, "protocol"), _section(values, "attack"), _section(values, "detect")
    rounds = run.get("rounds", 20)
    if rounds < 1:
        raise ConfigError("run.rounds must be >= 1")
    model.setdefault("kind", "toy_cnn")
    data.setdefault("generator", "images" if model["kind"] == "toy_cnn" else "blobs")
    if data["generator"] not in ("images", "blobs"):
        raise ConfigError(f"unknown data.generator {data['generator']!r}")
    if data.get("clients", 2) < 1 or data.get("per_client", 128) < 1:
        raise ConfigError("data.clients and data.per_client must be >= 1")
    try:
        protocol = Protocol(proto.get("kind", "fedsgd"), proto.get("epochs", 1), proto.get("batch_size", 32),
                            proto.get("lr", 0.1))
    except ValueError as e:
        raise ConfigError(str(e)) from None
    if protocol.epochs < 1 or (protocol.batch_size or 1) < 1 or not protocol.lr > 0:
        raise ConfigError("protocol needs epochs >= 1, batch_size >= 1, lr > 0")
    if (protocol.batch_size or 0) > data.get("per_client", 128):
        raise ConfigError("protocol.batch_size exceeds data.per_client")

    plan = None
    kind = str(att.get("kind", "none")).lower()
    if kind != "none":
        if kind not in PLAN_FIELDS:
            raise ConfigError(f"unknown attack.kind {att['kind']!r}")
        cls, names = PLAN_FIELDS[kind]
        try:
            plan = cls(**{n: att[n] for n in names if n in att})
        except (TypeError, ValueError) as e:
            raise ConfigError(f"attack: {e}") from None
        if not att.get("rounds"):
            raise ConfigError("attack.rounds must list at least one round")
        if any(not 0 <= r < rounds for r in att["rounds"]):
            raise ConfigError("attack.rounds must lie within run.rounds")
        if not 0 <= att.get("victim", 0) < data.get("clients", 2):
            raise ConfigError("attack.victim is not a client id")

    detect = None
    if det.get("enabled", True):
        detect = WarmupConfig(det.get("steps", 5), det.get("subset", 128), det.get("lr", 0.1),
                              det.get("threshold", DEFAULT_THRESHOLD))
        if detect.subset > data.get("per_client", 128):
            raise ConfigError("detect.subset exceeds data.per_client")

    cfg = ExperimentConfig(
        seed=run.get("seed", 0),
        rounds=rounds,
        out=run.get("out"),
        model=model,
        data=data,
        protocol=protocol,
        lr_server=proto.get("lr_server", 0.1),
        attack=plan,
        attack_rounds=tuple(att.get("rounds", ())) if plan else (),
        victim=att.get("victim", 0),
        detect=detect,
        values=dict(values),
    )
    cfg.build_model()  # surfaces model errors as config errors
    return cfg


def load_config(path, overrides: dict | None = None) -> ExperimentConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as e:
        raise ConfigError(f"cannot read config: {e}") from None
    values = typed(parse_flat(text))
    values.update(overrides or {})
    return build_config(values)
