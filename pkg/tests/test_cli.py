import csv
import json

import pytest

from trajinr import cli
from trajinr.inr import INR_MAGIC
from trajinr.weightspace import MODEL_MAGIC

TINY_TOML = """
seed = 7

[cohort]
subjects = 3
dims = [8, 8, 8]

[inr]
hidden = 6
space_layers = 2
time_layers = 2
combined_layers = 1

[fit]
pretrain_iterations = 4
finetune_iterations = 4
finetune_voxel_fraction = 0.1
pretrain_voxel_fraction = 0.05

[classifier]
widths = [4, 6, 8]
head_hidden = 3
epochs = 2
batch_size = 2
selections = ["s", "t"]
"""


@pytest.fixture
def tiny_config(tmp_path):
    p = tmp_path / "tiny.toml"
    p.write_text(TINY_TOML)
    return p


def _run(cfg, out, *cmds, extra=()):
    codes = []
    for c in cmds:
        codes.append(cli.run([c, "--config", str(cfg), "--out", str(out), *extra]))
    return codes


class TestExitCodes:
    def test_bad_config_key(self, tmp_path):
        p = tmp_path / "bad.toml"
        p.write_text("[cohort]\nsubject = 3\n")
        assert cli.run(["simulate", "--config", str(p), "--out", str(tmp_path / "o")]) == 2

    def test_invalid_config_value(self, tmp_path):
        p = tmp_path / "bad.toml"
        p.write_text("[cohort]\nsubjects = 4\n")
        assert cli.run(["simulate", "--config", str(p)]) == 2

    def test_unparseable_and_missing_config(self, tmp_path):
        p = tmp_path / "bad.toml"
        p.write_text("[cohort\n")
        assert cli.run(["simulate", "--config", str(p)]) == 2
        assert cli.run(["simulate", "--config", str(tmp_path / "nope.toml")]) == 2

    def test_bad_workers(self, tiny_config, tmp_path):
        assert cli.run(["fit", "--config", str(tiny_config), "--out", str(tmp_path), "--workers", "0"]) == 2

    def test_io_error(self, tiny_config, tmp_path):
        blocker = tmp_path / "file"
        blocker.write_text("x")
        assert _run(tiny_config, blocker, "simulate") == [3]

    def test_missing_cohort(self, tiny_config, tmp_path):
        assert _run(tiny_config, tmp_path, "fit", "classify", "evaluate") == [4, 4, 4]

    def test_missing_inrs(self, tiny_config, tmp_path):
        assert _run(tiny_config, tmp_path, "simulate", "classify", "evaluate") == [0, 5, 5]

    def test_cohort_config_mismatch(self, tiny_config, tmp_path):
        assert _run(tiny_config, tmp_path, "simulate") == [0]
        assert cli.run(["fit", "--config", str(tiny_config), "--out", str(tmp_path), "--seed", "8"]) == 2

    def test_unknown_subcommand(self):
        with pytest.raises(SystemExit) as exc:
            cli.run(["train"])
        assert exc.value.code == 2


class TestPipeline:
    def test_end_to_end(self, tiny_config, tmp_path, capsys):
        assert _run(tiny_config, tmp_path, "simulate", "fit", "classify", "evaluate",
                    extra=["--workers", "1"]) == [0, 0, 0, 0]
        man = json.loads((tmp_path / "cohort" / "manifest.json").read_text())
        assert len(man["train"]) == 2 and len(man["test"]) == 2
        keys = [f"{r['subject_id']}-{r['label']}" for r in man["train"] + man["test"]]
        for k in keys:
            assert (tmp_path / "inr" / f"{k}.inr").read_bytes()[:8] == INR_MAGIC
            rows = list(csv.reader(open(tmp_path / "inr" / "losses" / f"{k}.csv")))
            assert rows[0] == ["iteration", "loss"] and len(rows) == 5
        assert (tmp_path / "inr" / "theta_star.inr").is_file()
        for name in ("s", "t"):
            assert (tmp_path / "classify" / f"{name}.inrc").read_bytes()[:8] == MODEL_MAGIC
            hist = (tmp_path / "classify" / f"{name}_history.csv").read_text().splitlines()
            assert hist[0] == "epoch,loss,train_acc" and len(hist) == 3
        rep = tmp_path / "reports"
        for f in ("classification.csv", "classification.md", "predictions.csv", "reconstruction.csv",
                  "reconstruction_cells.csv", "reconstruction.md", "compression.csv"):
            assert (rep / f).is_file(), f
        cls = list(csv.DictReader(open(rep / "classification.csv")))
        assert [r["selection"] for r in cls] == ["s", "t"]
        assert all(float(r["accuracy"]) in (0.0, 50.0, 100.0) for r in cls)
        cells = list(csv.DictReader(open(rep / "reconstruction_cells.csv")))
        assert len(cells) == 2 * 41
        out = capsys.readouterr().out
        assert "simulated 3 subjects" in out

    def test_regular_scheme_flag(self, tiny_config, tmp_path):
        assert cli.run(["simulate", "--config", str(tiny_config), "--out", str(tmp_path),
                        "--scheme", "regular"]) == 0
        man = json.loads((tmp_path / "cohort" / "manifest.json").read_text())
        assert man["scheme"] == "regular"
        for r in man["train"] + man["test"]:
            assert [s["chron_age"] for s in r["scans"]] == [50.0, 58.0, 67.0, 75.0]

    def test_worker_count_does_not_change_output(self, tiny_config, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        assert _run(tiny_config, a, "simulate", "fit", extra=["--workers", "1"]) == [0, 0]
        assert _run(tiny_config, b, "simulate", "fit", extra=["--workers", "2"]) == [0, 0]
        for f in sorted((a / "inr").glob("*.inr")):
            assert f.read_bytes() == (b / "inr" / f.name).read_bytes(), f.name
