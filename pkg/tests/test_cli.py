import json
import os

import numpy as np
import pytest

from capsconv.cli import main
from capsconv.data import DEFAULT_DATA_DIR
from capsconv.model import (
    format_config_text,
    init_kernels,
    preset,
    save_checkpoint,
)

HAVE_MNIST = os.path.exists(os.path.join(DEFAULT_DATA_DIR, "mnist"))
needs_mnist = pytest.mark.skipif(not HAVE_MNIST, reason="no MNIST data")


class TestParams:
    def test_p1_total(self, capsys):
        assert main(["params", "--preset", "p1"]) == 0
        out = capsys.readouterr().out
        assert "total 2952" in out

    def test_p2_total_and_diagnostic(self, capsys):
        assert main(["params", "--preset", "p2"]) == 0
        out = capsys.readouterr().out
        assert "total 3888" in out
        assert "22176" in out and "170784" in out
        assert "swapped" in out

    def test_config_file_equivalent(self, tmp_path, capsys):
        path = tmp_path / "arch.cfg"
        path.write_text(format_config_text(preset("p1")))
        assert main(["params", "--config", str(path)]) == 0
        assert "total 2952" in capsys.readouterr().out

    def test_no_model_given(self, capsys):
        assert main(["params"]) == 2

    def test_both_model_flags(self, tmp_path, capsys):
        path = tmp_path / "arch.cfg"
        path.write_text(format_config_text(preset("p1")))
        assert main(["params", "--preset", "p1", "--config", str(path)]) == 2

    def test_unknown_preset_rejected_by_parser(self):
        with pytest.raises(SystemExit) as e:
            main(["params", "--preset", "nope"])
        assert e.value.code == 2

    def test_missing_config_file(self, capsys):
        assert main(["params", "--config", "/nonexistent.cfg"]) == 2


class TestGradcheckCmd:
    def test_toy_suite_passes(self, capsys):
        assert main(["gradcheck", "--preset", "toy", "--sample", "40"]) == 0
        out = capsys.readouterr().out
        assert "11/11 gradient checks passed" in out
        assert "FAIL" not in out


class TestBenchCmd:
    def test_table_and_json(self, tmp_path, capsys):
        report = tmp_path / "bench.json"
        assert main(["bench", "--preset", "toy", "--batch", "4,8",
                     "--iters", "1", "--json", str(report)]) == 0
        out = capsys.readouterr().out
        assert out.count("s / 100 iterations") == 2
        data = json.loads(report.read_text())
        assert len(data["results"]) == 2
        assert "linearity_deviation" in data

    def test_range_notation(self, capsys):
        assert main(["bench", "--preset", "toy", "--batch", "2..4",
                     "--iters", "1"]) == 0
        assert capsys.readouterr().out.count("s / 100") == 3

    def test_bad_batch_list(self, capsys):
        assert main(["bench", "--preset", "toy", "--batch", "abc"]) == 2


class TestAnalyzeCorr:
    def test_writes_matrices(self, tmp_path, capsys):
        ck = tmp_path / "model.bin"
        config = preset("p2")
        save_checkpoint(ck, config, init_kernels(config, 0), 0, 0)
        out_dir = tmp_path / "diag"
        assert main(["analyze", "corr", "--checkpoint", str(ck),
                     "--out-dir", str(out_dir)]) == 0
        for i in range(5):
            corr = np.loadtxt(out_dir / f"corr_layer{i}.csv", delimiter=",")
            assert corr.shape == (9, 9)
            np.testing.assert_allclose(np.diag(corr), 1.0, atol=1e-9)
        flat = np.loadtxt(out_dir / "filters_layer0.csv", delimiter=",")
        assert flat.shape == (9, 16)

    def test_bad_checkpoint_is_config_error(self, tmp_path, capsys):
        bad = tmp_path / "junk.bin"
        bad.write_bytes(b"not a checkpoint at all")
        assert main(["analyze", "corr", "--checkpoint", str(bad)]) == 2


class TestAnalyzeGap:
    def test_reports_series(self, tmp_path, capsys):
        metrics = tmp_path / "metrics.csv"
        metrics.write_text(
            "iteration,split,loss,accuracy,lr\n"
            "1,train,0.5,0.3,0.002\n"
            "2,train,0.4,0.4,0.002\n"
            "2,test,0.35,0.45,0.002\n")
        out = tmp_path / "gap.csv"
        assert main(["analyze", "gap", "--run-dir", str(tmp_path),
                     "--out", str(out)]) == 0
        assert "terminal gap" in capsys.readouterr().out
        assert out.read_text().splitlines()[0] == \
            "iteration,train_loss,test_loss,gap"

    def test_missing_metrics_is_data_error(self, tmp_path, capsys):
        assert main(["analyze", "gap", "--run-dir", str(tmp_path)]) == 3


@needs_mnist
class TestTrainEvalCycle:
    def test_tiny_run_then_eval_and_fgsm(self, tmp_path, capsys):
        out_dir = tmp_path / "run"
        code = main(["train", "--preset", "p2", "--out-dir", str(out_dir),
                     "--iters", "4", "--batch", "16", "--eval-every", "2",
                     "--checkpoint-every", "2", "--seed", "5",
                     "--threads", "1"])
        assert code == 0
        assert (out_dir / "run.json").exists()
        assert (out_dir / "metrics.csv").exists()
        assert (out_dir / "final.bin").exists()
        manifest = json.loads((out_dir / "run.json").read_text())
        assert manifest["train"]["seed"] == 5
        assert "capsconv train" in manifest["command"]

        assert main(["eval", "--checkpoint", str(out_dir / "final.bin"),
                     "--threads", "1"]) == 0
        out = capsys.readouterr().out
        assert "accuracy" in out and "error" in out

        assert main(["analyze", "fgsm",
                     "--checkpoint", str(out_dir / "final.bin"),
                     "--samples", "32", "--epsilons", "0.0,0.2",
                     "--threads", "1",
                     "--out", str(tmp_path / "fgsm.json")]) == 0
        points = json.loads((tmp_path / "fgsm.json").read_text())
        assert [p["epsilon"] for p in points] == [0.0, 0.2]
        assert points[0]["adversarial_accuracy"] == \
            pytest.approx(points[0]["clean_accuracy"])

    def test_missing_data_dir_is_data_error(self, tmp_path, capsys):
        assert main(["train", "--preset", "p2",
                     "--out-dir", str(tmp_path / "x"),
                     "--data-dir", str(tmp_path / "nowhere"),
                     "--iters", "1", "--batch", "4"]) == 3

    def test_nan_checkpoint_resume_is_numeric_error(self, tmp_path, capsys):
        config = preset("p2")
        kernels = init_kernels(config, 0)
        kernels[0][:] = np.nan
        ck = tmp_path / "nan.bin"
        save_checkpoint(ck, config, kernels, 0, 0)
        code = main(["train", "--preset", "p2",
                     "--out-dir", str(tmp_path / "run"),
                     "--resume", str(ck), "--iters", "2", "--batch", "8",
                     "--seed", "0", "--threads", "1"])
        assert code == 4
