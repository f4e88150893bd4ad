from __future__ import annotations

import json
import os
import subprocess
import sys

import pytest

from ccdn.cli import main
from ccdn.evaluation import MetricsReport
from ccdn.training import EpochRecord


def run_pipeline(root):
    data, model, det, rep = root / "data", root / "w.bin", root / "det", root / "report.csv"
    assert main(["generate", "--boards", "7x7,6x9", "--count", "4", "--seed", "5", "--out", str(data),
                 "--canvas", "64x48", "--resize", "none", "--train-fraction", "0.5"]) == 0
    assert main(["train", "--data", str(data), "--out", str(model), "--epochs", "1", "--batch-size", "2",
                 "--lr", "1e-4", "--quiet"]) == 0
    assert main(["detect", "--weights", str(model), str(data / "images"), "--out", str(det), "--quiet"]) == 0
    assert main(["eval", "--data", str(data), "--weights", str(model), "--out", str(rep)]) == 0
    return data, model, det, rep


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    return run_pipeline(tmp_path_factory.mktemp("run"))


class TestCommands:
    def test_generate_outputs(self, pipeline):
        data = pipeline[0]
        manifest = json.loads((data / "manifest.json").read_text())
        assert manifest["count"] == 4 and manifest["n_train"] == 2
        assert len(list((data / "images").glob("*.pgm"))) == 4
        config = json.loads((data / "run_config.json").read_text())
        assert config["boards"] == ["7x7", "6x9"] and config["augment"]["seed"] == 5

    def test_train_outputs(self, pipeline):
        model = pipeline[1]
        lines = model.with_suffix(".log").read_text().splitlines()
        assert [EpochRecord.parse(line).epoch for line in lines] == [0, 1]
        config = json.loads(model.with_suffix(".config.json").read_text())
        assert config["initial_lr"] == 1e-4 and config["train_samples"] == 2

    def test_detect_outputs(self, pipeline):
        det = pipeline[2]
        assert sorted(p.name for p in det.glob("*.csv")) == [f"0000{i}.csv" for i in range(4)]
        assert all(p.read_text().startswith("x,y,score\n") for p in det.glob("*.csv"))
        assert json.loads((det / "run_config.json").read_text())["nms"] is True

    def test_eval_from_detections_matches_eval_from_weights(self, pipeline, tmp_path):
        data, _, det, rep = pipeline
        out = tmp_path / "r.csv"
        assert main(["eval", "--data", str(data), "--detections", str(det), "--out", str(out)]) == 0
        assert out.read_text() == rep.read_text()
        report = MetricsReport.from_csv(rep.read_text())
        assert report.n_images == 4
        assert rep.with_suffix(".per_image.csv").read_text().count("\n") == 5

    def test_overlay_and_ablation(self, pipeline, tmp_path):
        data, model, det, _ = pipeline
        assert main(["detect", "--weights", str(model), str(data / "images" / "00000.pgm"), "--out", str(tmp_path),
                     "--overlay", "--no-nms", "--quiet"]) == 0
        assert (tmp_path / "00000.overlay.ppm").exists()
        ablated = (tmp_path / "00000.csv").read_text().count("\n")
        assert ablated >= (det / "00000.csv").read_text().count("\n")

    def test_reproducible(self, pipeline, tmp_path):
        again = run_pipeline(tmp_path)
        first, second = pipeline[0].parent, again[0].parent
        names = sorted(str(p.relative_to(first)) for p in first.rglob("*") if p.is_file())
        # run configs embed the (different) output paths
        names = [n for n in names if not n.endswith("config.json")]
        assert len(names) > 10
        for n in names:
            assert (first / n).read_bytes() == (second / n).read_bytes(), n


class TestErrors:
    def test_unknown_flag(self, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["generate", "--count", "1", "--out", "x", "--bogus"])
        assert exc.value.code == 2
        assert "unrecognized arguments" in capsys.readouterr().err

    def test_bad_board(self, capsys):
        with pytest.raises(SystemExit):
            main(["generate", "--count", "1", "--out", "x", "--boards", "7by7"])

    @pytest.mark.skipif(os.geteuid() == 0, reason="root can write anywhere")
    def test_unwritable_output(self, tmp_path, capsys):
        locked = tmp_path / "locked"
        locked.mkdir()
        locked.chmod(0o500)
        code = main(["generate", "--count", "1", "--out", str(locked / "d")])
        assert code == 2 and "not writable" in capsys.readouterr().err

    def test_output_path_is_a_file(self, tmp_path, capsys):
        blocker = tmp_path / "file"
        blocker.write_text("")
        code = main(["generate", "--count", "1", "--out", str(blocker / "d")])
        assert code == 2 and "not writable" in capsys.readouterr().err

    def test_corrupt_weights(self, tmp_path, capsys):
        (tmp_path / "w.bin").write_bytes(b"junk")
        code = main(["detect", "--weights", str(tmp_path / "w.bin"), str(tmp_path), "--out", str(tmp_path / "o")])
        assert code == 2 and "bad magic" in capsys.readouterr().err

    def test_eval_needs_one_source(self, pipeline, tmp_path, capsys):
        code = main(["eval", "--data", str(pipeline[0]), "--out", str(tmp_path / "r.csv")])
        assert code == 2 and "exactly one" in capsys.readouterr().err

    def test_missing_dataset(self, tmp_path, capsys):
        code = main(["train", "--data", str(tmp_path), "--out", str(tmp_path / "w.bin")])
        assert code == 2 and "no manifest.json" in capsys.readouterr().err

    def test_missing_detection_file(self, pipeline, tmp_path, capsys):
        code = main(["eval", "--data", str(pipeline[0]), "--detections", str(tmp_path), "--out", str(tmp_path / "r.csv")])
        assert code == 2 and "no detection file" in capsys.readouterr().err

    def test_unreadable_image_continues(self, pipeline, tmp_path, capsys):
        bad = tmp_path / "bad.pgm"
        bad.write_bytes(b"P2 nope")
        good = pipeline[0] / "images" / "00000.pgm"
        code = main(["detect", "--weights", str(pipeline[1]), str(bad), str(good), "--out", str(tmp_path / "o"), "--quiet"])
        assert code == 1
        assert "bad.pgm" in capsys.readouterr().err
        assert (tmp_path / "o" / "00000.csv").exists()

    def test_console_script_help(self):
        out = subprocess.run([sys.executable, "-m", "ccdn.cli", "--help"], capture_output=True, text=True)
        assert out.returncode == 0 and "generate" in out.stdout
