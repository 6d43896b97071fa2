"""``gradshield`` command line: experiments, attacks, inspectors and probability bounds."""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import math
import sys
from pathlib import Path

import numpy as np

from .. import analysis, attacks, detect
from ..datagen import Dataset, gen_blobs, gen_images, load_dataset, save_dataset
from ..errors import ConfigError, FormatError
from ..flsim import ClientState
from ..nn import gradcheck, load_checkpoint, per_sample_gradients, read_manifest, zoo
from .config import load_config
from .pipeline import client_data, dump_json, ensure_out, fmt, jsonable, run_experiment, write_csv

EXIT_OK, EXIT_MALICIOUS, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2, 3


def _echo(obj) -> None:
    print(json.dumps(jsonable(obj), indent=2, sort_keys=True))


def _log(args):
    return (lambda msg: print(msg, file=sys.stderr)) if getattr(args, "verbose", False) else None


def _load_experiment(args, **force):
    overrides = {}
    if args.seed is not None:
        overrides["run.seed"] = args.seed
    overrides.update(force)
    cfg = load_config(args.config, overrides)
    out = args.out or cfg.out
    if not out:
        raise ConfigError("no output directory: pass --out or set run.out")
    return cfg, out


def cmd_run(args) -> int:
    cfg, out = _load_experiment(args)
    summary = run_experiment(cfg, ensure_out(out), _log(args))
    print(f"rounds={summary['rounds']} malicious_verdicts={summary['malicious_verdicts']} "
          f"max_benign_z={fmt(summary['max_benign_z'])} max_attacked_z={fmt(summary['max_attacked_z'])}")
    return EXIT_OK


def cmd_simulate(args) -> int:
    cfg, out = _load_experiment(args, **{"attack.kind": "none"})
    summary = run_experiment(cfg, ensure_out(out), _log(args))
    print(f"rounds={summary['rounds']} final_loss={fmt(summary['final_loss'])} "
          f"final_accuracy={fmt(summary['final_accuracy'])}")
    return EXIT_OK


def _experiment_round(name: str, seed: int):
    if name == "imprint":
        model, client, plan = analysis.imprint_experiment(seed)
        return plan, model, client
    if name == "curious":
        data = gen_images(4, 3, 6, 6, 1.0, seed=seed)
        model = zoo.toy_cnn(input_shape=(3, 6, 6), channels=3, norm=None, hidden=8, seed=seed)
        thresholds = attacks.isolating_thresholds(data.inputs.mean(axis=(1, 2, 3)))
        return attacks.CuriousPlan(scale=2.0, thresholds=list(thresholds)), model, ClientState(0, data)
    if name == "fishing":
        data = gen_images(8, 3, 8, 8, 1.0, seed=seed)
        target = int(data.labels[0])
        return attacks.FishingPlan(target_class=target), zoo.toy_cnn(seed=seed), ClientState(0, data)
    if name == "decepticons":
        data = gen_blobs(4, 2, 32, 0.5, seed)
        data = Dataset(data.inputs.reshape(-1, 4, 8), data.labels, 4, seed, "blobs")
        return attacks.DecepticonsPlan(gamma=10.0, d_prime=4), zoo.toy_transformer(seed=seed), ClientState(0, data)
    raise ConfigError(f"unknown experiment {name!r}")


def cmd_attack(args) -> int:
    protocol = attacks.Protocol(args.protocol, args.epochs, args.batch_size, args.lr)
    if args.config:
        cfg = load_config(args.config, {"run.seed": args.seed} if args.seed is not None else None)
        if cfg.attack is None:
            raise ConfigError("config has no [attack] section")
        model = cfg.build_model()
        plan, client = cfg.attack, ClientState(cfg.victim, client_data(cfg, model, cfg.victim))
        protocol = cfg.protocol
        seed = cfg.seed
    else:
        seed = args.seed or 0
        plan, model, client = _experiment_round(args.experiment, seed)
    result, update = attacks.run_attack_round(plan, model, client, protocol, seed)
    report = {"plan": plan.to_dict(), "protocol": dataclasses.asdict(protocol), "update_norm": update.norm(),
              **result.summary()}
    if args.out:
        out = ensure_out(args.out)
        dump_json(report, out / "reconstruction.json")
    _echo(report)
    return EXIT_OK


def _load_model_and_data(args):
    model = load_checkpoint(args.checkpoint)
    data = load_dataset(args.data) if getattr(args, "data", None) else None
    return model, data


def cmd_inspect(args) -> int:
    model = load_checkpoint(args.checkpoint)
    expected = read_manifest(args.expected)[0] if args.expected else None
    findings, triggers = detect.inspect_model(model, expected)
    verdict = "malicious" if triggers else "benign"
    _echo({"verdict": verdict, "findings": findings, "triggers": triggers})
    return EXIT_MALICIOUS if triggers else EXIT_OK


def cmd_detect(args) -> int:
    model, data = _load_model_and_data(args)
    expected = read_manifest(args.expected)[0] if args.expected else None
    client = ClientState(0, data, expected_manifest=expected)
    cfg = detect.WarmupConfig(args.steps, min(args.subset, len(data)), args.lr, args.threshold)
    verdict = detect.warmup_detect(model, client, cfg, detect.StatHistory(), seed=args.seed or 0)
    report = verdict.to_dict()
    if args.out:
        dump_json(report, ensure_out(args.out) / "verdict.json")
    _echo({k: v for k, v in report.items() if k != "z"} | {"metrics": len(report["z"])})
    return EXIT_MALICIOUS if verdict.malicious else EXIT_OK


def _dsnr_row(label, model, x, y):
    per_layer, overall = detect.d_snr(per_sample_gradients(model, x, y))
    return label, per_layer, overall


def cmd_dsnr(args) -> int:
    rows = []
    if args.checkpoint:
        model, data = _load_model_and_data(args)
        if data is None:
            raise ConfigError("--data is required with --checkpoint")
        n = min(args.batch, len(data))
        rows.append(_dsnr_row(Path(args.checkpoint).name, model, data.inputs[:n], data.labels[:n]))
    else:
        seed = args.seed or 0
        data = gen_images(args.batch, 3, 8, 8, 1.0, seed=seed)
        model = zoo.toy_cnn(seed=seed)
        rows.append(_dsnr_row("benign", model, data.inputs, data.labels))
        target = int(data.labels[0])
        keep = [0] + [i for i in range(len(data)) if data.labels[i] != target]
        fishing = attacks.apply_fishing(model, target)
        rows.append(_dsnr_row("fishing", fishing, data.inputs[keep], data.labels[keep]))
        imodel, client, plan = analysis.imprint_experiment(seed)
        rows.append(_dsnr_row("imprint", plan.apply(imodel), client.dataset.inputs, client.dataset.labels))
    for label, per_layer, overall in rows:
        print(f"{label}: max D-SNR = {fmt(overall)}")
        for key, value in per_layer.items():
            print(f"  {key:<24s} {fmt(value)}")
    return EXIT_OK


def cmd_bounds(args) -> int:
    lines = []
    print(f"{'M':>6} {'N':>6} {'closed_form':>12} {'estimate':>10} {'stderr':>10} {'within_3se':>10}")
    for m in args.M:
        n = args.N or m
        ref = analysis.closed_form_p1(m) if n == m else analysis.exact_bin_capture(m, n)
        est = analysis.mc_bin_capture(m, n, args.trials, args.seed or 0)
        ok = est.within(3.0)
        print(f"{m:>6} {n:>6} {ref:>12.5f} {est.estimate:>10.5f} {est.stderr:>10.5f} {str(ok):>10}")
        lines.append(("bin_capture", f"M={m};N={n}", est.estimate, est.stderr, ref))
    print(f"lower bound 1/e = {1 / math.e:.5f}")
    for dist in ("continuous_uniform", "constant"):
        est = analysis.mc_min_property(args.batch, dist, args.min_trials, args.seed or 0)
        print(f"min-property B={args.batch} {dist}: {est.estimate:.5f} (stderr {est.stderr:.5f})")
        lines.append(("min_property", f"B={args.batch};{dist}", est.estimate, est.stderr, ""))
    if args.out:
        write_csv(ensure_out(args.out) / "bounds.csv",
                  ["experiment", "parameterization", "estimate", "stderr", "reference"], lines)
    return EXIT_OK


def cmd_coupling(args) -> int:
    rows = []
    for seed in range(args.seeds):
        data = gen_images(args.batch, 3, 8, 8, 1.0, seed=seed)
        model = zoo.toy_cnn(seed=seed)
        res = analysis.bn_coupling(model, data.inputs, data.labels, 0, 1, args.delta)
        rows.append((seed, res["bn_change"], res["layer_change"], res["group_change"]))
        print(f"seed {seed}: bn={fmt(res['bn_change'])} layer={fmt(res['layer_change'])} "
              f"group={fmt(res['group_change'])}")
    if args.out:
        write_csv(ensure_out(args.out) / "coupling.csv", ["seed", "bn_change", "layer_change", "group_change"], rows)
    return EXIT_OK


def cmd_report(args) -> int:
    src = Path(args.input)
    peaks: dict[tuple[int, str], float] = {}
    with open(src / "zscores.csv", newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            key = (int(row["round"]), row["metric_key"])
            peaks[key] = max(peaks.get(key, 0.0), abs(float(row["z"])))
    losses: dict[int, list[float]] = {}
    with open(src / "metrics.csv", newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            losses.setdefault(int(row["round"]), []).append(float(row["loss"]))
    out = ensure_out(args.out or src)
    write_csv(out / "report_zpeaks.csv", ["round", "metric_key", "max_abs_z"],
              [(r, k, v) for (r, k), v in sorted(peaks.items())])
    write_csv(out / "report_rounds.csv", ["round", "mean_loss", "max_abs_z"],
              [(r, float(np.nanmean(v)), max((z for (rr, _), z in peaks.items() if rr == r), default=0.0))
               for r, v in sorted(losses.items())])
    print(f"wrote {out / 'report_zpeaks.csv'} and {out / 'report_rounds.csv'}")
    return EXIT_OK


def cmd_gendata(args) -> int:
    if args.generator == "images":
        ds = gen_images(args.n, *args.shape, brightness_spread=args.spread, seed=args.seed or 0,
                        classes=args.classes)
    else:
        ds = gen_blobs(args.classes, max(1, args.n // args.classes), args.dims, args.sigma, args.seed or 0)
    save_dataset(ds, args.output)
    print(f"wrote {len(ds)} samples to {args.output}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    results = gradcheck.run_suite(range(args.seeds))
    worst = max(r.max_rel_error for r in results)
    for r in results:
        print(f"{r.name:<32s} max_rel_err={r.max_rel_error:.3e} {'ok' if r.passed() else 'FAIL'}")
    print(f"worst={worst:.3e}")
    return EXIT_OK if all(r.passed() for r in results) else EXIT_RUNTIME


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gradshield", description=__doc__)
    p.add_argument("--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def experiment(name, func, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", required=True)
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out")
        sp.add_argument("--verbose", action="store_true")
        sp.set_defaults(func=func)
        return sp

    experiment("run", cmd_run, "run a configured experiment")
    experiment("simulate", cmd_simulate, "run the configured rounds without the attack")

    sp = sub.add_parser("attack", help="one manipulated round and its reconstruction")
    sp.add_argument("--config")
    sp.add_argument("--experiment", default="imprint", choices=["imprint", "curious", "fishing", "decepticons"])
    sp.add_argument("--protocol", default="fedsgd", choices=["fedsgd", "fedavg"])
    sp.add_argument("--epochs", type=int, default=1)
    sp.add_argument("--batch-size", type=int)
    sp.add_argument("--lr", type=float, default=0.1)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_attack)

    sp = sub.add_parser("inspect", help="parameter inspectors on a checkpoint")
    sp.add_argument("checkpoint")
    sp.add_argument("--expected", help="checkpoint with the architecture the client expects")
    sp.set_defaults(func=cmd_inspect)

    sp = sub.add_parser("detect", help="warm-up detection on a checkpoint and dataset")
    sp.add_argument("checkpoint")
    sp.add_argument("--data", required=True)
    sp.add_argument("--expected")
    sp.add_argument("--steps", type=int, default=5)
    sp.add_argument("--subset", type=int, default=128)
    sp.add_argument("--lr", type=float, default=0.1)
    sp.add_argument("--threshold", type=float, default=detect.DEFAULT_THRESHOLD)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_detect)

    sp = sub.add_parser("dsnr", help="per-layer D-SNR (built-in demo without --checkpoint)")
    sp.add_argument("--checkpoint")
    sp.add_argument("--data")
    sp.add_argument("--batch", type=int, default=8)
    sp.add_argument("--seed", type=int)
    sp.set_defaults(func=cmd_dsnr)

    sp = sub.add_parser("bounds", help="bin-capture and min-property probabilities")
    sp.add_argument("--M", type=int, nargs="+", default=[4, 8, 32, 128])
    sp.add_argument("--N", type=int)
    sp.add_argument("--trials", type=int, default=100_000)
    sp.add_argument("--batch", type=int, default=512)
    sp.add_argument("--min-trials", type=int, default=10_000)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_bounds)

    sp = sub.add_parser("coupling", help="cross-sample gradient coupling: BN vs LN/GN")
    sp.add_argument("--seeds", type=int, default=10)
    sp.add_argument("--delta", type=float, default=1e-2)
    sp.add_argument("--batch", type=int, default=8)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_coupling)

    sp = sub.add_parser("report", help="aggregate zscores.csv/metrics.csv of a run")
    sp.add_argument("input")
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_report)

    sp = sub.add_parser("gendata", help="write a synthetic dataset file")
    sp.add_argument("output")
    sp.add_argument("--generator", choices=["images", "blobs"], default="images")
    sp.add_argument("--n", type=int, default=128)
    sp.add_argument("--shape", type=int, nargs=3, default=[3, 8, 8])
    sp.add_argument("--spread", type=float, default=1.0)
    sp.add_argument("--classes", type=int, default=10)
    sp.add_argument("--dims", type=int, default=8)
    sp.add_argument("--sigma", type=float, default=0.1)
    sp.add_argument("--seed", type=int)
    sp.set_defaults(func=cmd_gendata)

    sp = sub.add_parser("gradcheck", help="finite-difference check of every layer kind")
    sp.add_argument("--seeds", type=int, default=5)
    sp.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_CONFIG if e.code else EXIT_OK
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (FormatError, OSError, ValueError, ArithmeticError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
