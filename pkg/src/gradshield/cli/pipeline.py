"""Deterministic federated rounds with an optional malicious server and client-side detection."""

from __future__ import annotations

import csv
import io
import json
import math
import os
from pathlib import Path

import numpy as np

from .. import attacks
from ..datagen import Dataset, gen_blobs, gen_images
from ..detect import StatHistory, warmup_detect
from ..flsim import ClientState, aggregate
from ..nn import Model, evaluate, save_checkpoint
from ..rng import child_seed
from .config import ExperimentConfig


def fmt(x) -> str:
    """Float text for CSV: 17 significant digits, fixed spelling of non-finite values."""
    if isinstance(x, (int, np.integer)) and not isinstance(x, bool):
        return str(int(x))
    x = float(x)
    if math.isnan(x):
        return "nan"
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    return format(x, ".17g")


def jsonable(obj):
    """Recursively convert to JSON-safe values; non-finite floats become strings."""
    if isinstance(obj, dict):
        return {str(k): jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return jsonable(obj.tolist())
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        return x if math.isfinite(x) else fmt(x)
    return obj


def dump_json(obj, path: Path) -> None:
    path.write_text(json.dumps(jsonable(obj), indent=2, sort_keys=True) + "\n", encoding="utf-8")


def write_csv(path: Path, header, rows) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\r\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([fmt(v) if isinstance(v, (float, np.floating)) else v for v in row])
    path.write_text(buf.getvalue(), encoding="utf-8", newline="")


def client_data(cfg: ExperimentConfig, model: Model, client_id: int) -> Dataset:
    data = cfg.data
    seed = child_seed(cfg.seed, "data", client_id)
    n = data.get("per_client", 128)
    shape = model.input_shape
    classes = model.output_shape[0]
    if data.get("generator", "images") == "images":
        if len(shape) != 3:
            raise ValueError("image data needs a model with (C, H, W) input")
        return gen_images(n, *shape, brightness_spread=data.get("brightness_spread", 1.0), seed=seed,
                          classes=classes, noise=data.get("noise", 0.05))
    dims = int(np.prod(shape))
    per_class = -(-n // classes)
    blobs = gen_blobs(classes, per_class, dims, data.get("sigma", 0.5), seed)
    keep = np.sort(np.random.default_rng(seed).permutation(len(blobs))[:n])
    x = blobs.inputs[keep].reshape((len(keep),) + shape)
    return Dataset(x, blobs.labels[keep], classes, seed, "blobs", dict(blobs.meta))


def run_experiment(cfg: ExperimentConfig, out_dir, log=None) -> dict:
    """Run every round and write summary.json, metrics.csv, zscores.csv, verdicts/ and checkpoints/."""
    out = Path(out_dir)
    model = cfg.build_model()
    expected = model.manifest()
    clients = [ClientState(i, client_data(cfg, model, i), history=StatHistory(), expected_manifest=expected)
               for i in range(cfg.clients)]
    (out / "verdicts").mkdir(parents=True, exist_ok=True)
    (out / "checkpoints").mkdir(parents=True, exist_ok=True)

    metrics, zrows, attack_log = [], [], []
    benign_z, attacked_z = 0.0, 0.0
    flagged = []
    for r in range(cfg.rounds):
        attacked_round = cfg.attack is not None and r in cfg.attack_rounds
        served = cfg.attack.apply(model) if attacked_round else None
        if attacked_round:
            save_checkpoint(served, out / "checkpoints" / f"round_{r:03d}_served.GSHD1")
        updates, verdicts = [], []
        for client in clients:
            client.round = r
            received = served if attacked_round and client.id == cfg.victim else model
            targeted = received is not model
            seed = child_seed(cfg.seed, "round", r)
            verdict = None
            if cfg.detect is not None:
                verdict = warmup_detect(received, client, cfg.detect, client.history, seed=seed)
                zrows += [(rr, client.id, it, key, value, z) for rr, it, key, value, z in verdict.z_table]
                if targeted:
                    attacked_z = max(attacked_z, verdict.max_abs_z)
                else:
                    benign_z = max(benign_z, verdict.max_abs_z)
                verdicts.append({"client": client.id, "targeted": targeted, **verdict.to_dict()})
                if verdict.malicious:
                    flagged.append({"round": r, "client": client.id, "targeted": targeted,
                                    "sources": sorted({t["source"] for t in verdict.triggers})})
            loss_before, acc = evaluate(received, client.dataset.inputs, client.dataset.labels)
            if verdict is not None and verdict.malicious:
                # the client refuses to train on a model it judged malicious
                metrics.append((r, client.id, float(loss_before), float(acc), float("nan")))
                continue
            if targeted:
                result, update = attacks.run_attack_round(cfg.attack, model, client, cfg.protocol, seed)
                attack_log.append({"round": r, "client": client.id, "plan": cfg.attack.to_dict(),
                                   **result.summary()})
            else:
                update = attacks.client_update(received, client, cfg.protocol, seed)
                updates.append(update)
            metrics.append((r, client.id, float(update.loss), float(acc), update.norm()))
        if updates:
            model = aggregate(updates, model, cfg.lr_server)
        dump_json({"round": r, "attacked": attacked_round, "clients": verdicts}, out / "verdicts" / f"{r:03d}.json")
        if log:
            flags = ",".join(v["flag"] for v in verdicts) or "-"
            log(f"round {r}: {flags}")
    save_checkpoint(model, out / "checkpoints" / "final.GSHD1")

    write_csv(out / "metrics.csv", ["round", "client", "loss", "accuracy", "update_norm"], metrics)
    write_csv(out / "zscores.csv", ["round", "client", "iter", "metric_key", "value", "z"], zrows)
    test = [evaluate(model, c.dataset.inputs, c.dataset.labels) for c in clients]
    summary = {
        "seed": cfg.seed,
        "config": cfg.to_dict(),
        "rounds": cfg.rounds,
        "clients": cfg.clients,
        "attack": cfg.attack.to_dict() if cfg.attack else None,
        "attack_rounds": list(cfg.attack_rounds),
        "threshold": cfg.detect.threshold if cfg.detect else None,
        "max_benign_z": benign_z,
        "max_attacked_z": attacked_z,
        "flagged": flagged,
        "malicious_verdicts": len(flagged),
        "reconstructions": attack_log,
        "final_loss": float(np.mean([l for l, _ in test])),
        "final_accuracy": float(np.mean([a for _, a in test])),
    }
    dump_json(summary, out / "summary.json")
    return summary


def ensure_out(path) -> Path:
    out = Path(path)
    os.makedirs(out, exist_ok=True)
    return out
