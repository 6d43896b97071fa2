import csv
import json
import subprocess
import sys

import pytest

from gradshield import attacks
from gradshield.cli.config import load_config, parse_flat
from gradshield.cli.main import main
from gradshield.errors import ConfigError
from gradshield.nn import save_checkpoint, zoo

SMALL = """
[run]
seed = 3
rounds = 4

[data]
clients = 2
per_client = 32

[protocol]
kind = fedsgd
batch_size = 8

[detect]
steps = 2
subset = 16
"""

ATTACKED = SMALL + """
[attack]
kind = Fishing
rounds = 3
victim = 1
"""


@pytest.fixture
def config(tmp_path):
    def write(text, name="c.ini"):
        path = tmp_path / name
        path.write_text(text)
        return str(path)
    return write


class TestConfig:
    def test_flattening(self):
        assert parse_flat("[run]\nseed = 4 # note\n[model]\nkind = toy_mlp\n") == {"run.seed": "4",
                                                                                    "model.kind": "toy_mlp"}

    @pytest.mark.parametrize("text", ["[run]\nsead = 1\n", "[extra]\nx = 1\n", "seed = 1\n",
                                      "[run]\nseed = one\n", "[run]\nrounds = 0\n",
                                      "[protocol]\nbatch_size = 500\n", "[attack]\nkind = Fishing\nrounds = 30\n",
                                      "[attack]\nkind = Robbing\nrounds = 1\n", "[model]\nkind = resnet\n",
                                      "[detect]\nthreshold = nan\n"])
    def test_rejections(self, config, text):
        with pytest.raises(ConfigError):
            load_config(config(text))

    def test_attack_plan(self, config):
        cfg = load_config(config(ATTACKED))
        assert isinstance(cfg.attack, attacks.FishingPlan)
        assert cfg.attack_rounds == (3,) and cfg.victim == 1 and cfg.clients == 2

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            load_config(tmp_path / "nope.ini")


class TestRun:
    def test_malformed_config_writes_nothing(self, config, tmp_path):
        out = tmp_path / "out"
        assert main(["run", "--config", config("[run\nseed = 1"), "--out", str(out)]) == 2
        assert main(["run", "--config", config("[run]\nbogus = 1\n"), "--out", str(out)]) == 2
        assert not out.exists()

    def test_attacked_run_and_report(self, config, tmp_path, capsys):
        out = tmp_path / "run"
        assert main(["run", "--config", config(ATTACKED), "--out", str(out)]) == 0
        summary = json.loads((out / "summary.json").read_text())
        assert [(f["round"], f["client"], f["targeted"]) for f in summary["flagged"]] == [(3, 1, True)]
        assert summary["max_benign_z"] < summary["threshold"]
        verdict = json.loads((out / "verdicts" / "003.json").read_text())
        victim = [c for c in verdict["clients"] if c["client"] == 1][0]
        metrics = {t["metric"].split(".")[0] for t in victim["triggers"] if t["source"] == "zscore"}
        assert victim["flag"] == "malicious" and {"linear[0]"} <= metrics
        raw = (out / "metrics.csv").read_bytes()
        assert raw.startswith(b"round,client,loss,accuracy,update_norm\r\n")
        assert (out / "checkpoints" / "round_003_served.GSHD1").exists()

        assert main(["report", str(out)]) == 0
        with open(out / "report_rounds.csv", newline="") as fh:
            rows = list(csv.DictReader(fh))
        assert [int(r["round"]) for r in rows] == [0, 1, 2, 3]
        assert float(rows[3]["max_abs_z"]) > 1e4 > float(rows[2]["max_abs_z"])

    def test_byte_identical(self, config, tmp_path):
        path = config(ATTACKED)
        for name in ("a", "b"):
            assert main(["run", "--config", path, "--out", str(tmp_path / name)]) == 0
        files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
        assert len(files) > 5
        for f in files:
            assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()

    def test_needs_out(self, config):
        assert main(["run", "--config", config(SMALL)]) == 2


class TestSubcommands:
    def test_bounds(self, capsys):
        assert main(["bounds", "--M", "128", "--trials", "20000", "--min-trials", "1000"]) == 0
        text = capsys.readouterr().out
        assert "0.36932" in text and "0.36788" in text

    def test_inspect(self, tmp_path, capsys):
        model = zoo.toy_cnn(seed=0)
        save_checkpoint(model, tmp_path / "clean.GSHD1")
        save_checkpoint(attacks.ImprintPlan(bins=16).apply(model), tmp_path / "imprint.GSHD1")
        assert main(["inspect", str(tmp_path / "clean.GSHD1")]) == 0
        capsys.readouterr()
        code = main(["inspect", str(tmp_path / "imprint.GSHD1"), "--expected", str(tmp_path / "clean.GSHD1")])
        report = json.loads(capsys.readouterr().out)
        assert code == 1 and report["verdict"] == "malicious"
        assert {t["source"] for t in report["triggers"]} == {"architecture", "imprint_signature"}

    def test_dsnr_and_detect_on_files(self, tmp_path, capsys):
        assert main(["gendata", str(tmp_path / "d.gsds"), "--n", "32", "--seed", "2"]) == 0
        save_checkpoint(attacks.apply_fishing(zoo.toy_cnn(seed=0), 1), tmp_path / "f.GSHD1")
        capsys.readouterr()
        assert main(["dsnr", "--checkpoint", str(tmp_path / "f.GSHD1"), "--data", str(tmp_path / "d.gsds")]) == 0
        out = capsys.readouterr().out
        assert "max D-SNR" in out and "linear.0.weight" in out
        code = main(["detect", str(tmp_path / "f.GSHD1"), "--data", str(tmp_path / "d.gsds"), "--steps", "2",
                     "--out", str(tmp_path / "v")])
        assert code in (0, 1) and (tmp_path / "v" / "verdict.json").exists()

    def test_dsnr_demo(self, capsys):
        assert main(["dsnr"]) == 0
        out = capsys.readouterr().out
        assert "fishing: max D-SNR = inf" in out

    @pytest.mark.parametrize("name", ["imprint", "curious", "fishing", "decepticons"])
    def test_attack_experiments(self, name, capsys):
        assert main(["attack", "--experiment", name]) == 0
        report = json.loads(capsys.readouterr().out)
        assert report["plan"]["kind"].lower().startswith(name)
        if name in ("imprint", "curious"):
            assert report["min_error"] < 1e-3

    def test_runtime_errors(self, tmp_path):
        (tmp_path / "bad").write_bytes(b"junk")
        assert main(["inspect", str(tmp_path / "bad")]) == 3
        assert main(["inspect", str(tmp_path / "missing")]) == 3

    def test_usage_error(self):
        assert main(["bounds", "--M", "x"]) == 2
        assert main([]) == 2


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "gradshield", "bounds", "--M", "8", "--trials", "1000",
                           "--min-trials", "100"], capture_output=True, text=True)
    assert proc.returncode == 0 and "0.39270" in proc.stdout
