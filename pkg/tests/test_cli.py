import subprocess
import sys

import numpy as np
import pytest

from mcl_forge import data
from mcl_forge.cli import main
from mcl_forge.network import load_checkpoint


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture
def complementary(tmp_path):
    path = tmp_path / "c.mmds"
    assert run("gen", "--preset", "complementary", "--seed", 7, "-o", path) == 0
    return path


def read_report(path):
    return dict(line.split("=", 1) for line in path.read_text().splitlines())


class TestGen:
    def test_byte_identical(self, tmp_path):
        for name in ("a", "b"):
            assert run("gen", "--preset", "complementary", "--seed", 7, "-o", tmp_path / name) == 0
        assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()

    def test_sample_count(self, tmp_path, capsys):
        out = tmp_path / "d.mmds"
        assert run("gen", "--m", 2, "--c", 3, "--n-per-class", 50, "--separability", "0.5", "-o", out) == 0
        ds = data.load(out)
        assert (ds.M, ds.C, ds.N) == (2, 3, 150)
        assert "N=150" in capsys.readouterr().out

    def test_separability_matrix(self, tmp_path):
        out = tmp_path / "d.mmds"
        assert run("gen", "--m", 2, "--c", 2, "--separability", "1,0;0,1", "--dims", "3,5", "-o", out) == 0
        assert data.load(out).dims == [3, 5]

    def test_missing_output_is_usage_error(self):
        assert run("gen", "--preset", "complementary") == 2

    def test_bad_separability_shape(self, tmp_path):
        assert run("gen", "--m", 2, "--c", 3, "--separability", "1,0;0,1", "-o", tmp_path / "x") == 2


class TestTrain:
    def test_artifacts_are_deterministic(self, complementary, tmp_path):
        outputs = []
        for name in ("r1", "r2"):
            out = tmp_path / name
            code = run("train", "--dataset", complementary, "--variant", "dmcl", "--t", 2, "--lambda", 0.5,
                       "--steps", 60, "--seed", 1, "--eval-every", 20, "--out-dir", out)
            assert code == 0
            outputs.append([(out / f).read_bytes() for f in ("checkpoint.mclf", "metrics.csv", "report.txt", "report.csv")])
        assert outputs[0] == outputs[1]
        log = (tmp_path / "r1" / "metrics.csv").read_text().splitlines()
        assert log[0] == "step,modality,mean_loss,winner_count,variant,seed"
        assert len(log) == 1 + 60 * 3
        assert len((tmp_path / "r1" / "report.csv").read_text().splitlines()) == 1 + 3

    def test_independent_equals_dmcl_on_one_modality(self, tmp_path):
        ds = tmp_path / "one.mmds"
        assert run("gen", "--m", 1, "--c", 3, "--n-per-class", 20, "-o", ds) == 0
        for variant in ("independent", "dmcl"):
            assert run("train", "--dataset", ds, "--variant", variant, "--steps", 40, "--out-dir", tmp_path / variant) == 0
        a = (tmp_path / "independent" / "checkpoint.mclf").read_bytes()
        b = (tmp_path / "dmcl" / "checkpoint.mclf").read_bytes()
        assert a == b

    def test_config_file_and_override(self, complementary, tmp_path):
        cfg = tmp_path / "run.cfg"
        cfg.write_text(f"# recipe\ndataset = {complementary}\nvariant = smcl\nsteps = 5\nbatch-size = 8\n")
        assert run("train", "--config", cfg, "--out-dir", tmp_path / "a") == 0
        assert run("train", "--config", cfg, "--steps", 7, "--out-dir", tmp_path / "b") == 0
        a = (tmp_path / "a" / "metrics.csv").read_text().splitlines()
        b = (tmp_path / "b" / "metrics.csv").read_text().splitlines()
        assert len(a) == 1 + 5 * 3 and len(b) == 1 + 7 * 3
        assert a[1].endswith(",smcl,0")

    @pytest.mark.parametrize("body", ["steps\n", "nonsense = 1\n", "variant = bagging\n", "steps = many\n"])
    def test_bad_config_file(self, complementary, tmp_path, body):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text(body)
        assert run("train", "--config", cfg, "--dataset", complementary) == 2

    def test_missing_config_file(self, tmp_path):
        assert run("train", "--config", tmp_path / "nope.cfg") == 1

    @pytest.mark.parametrize(
        "flags",
        [["--lambda", 1.5], ["--steps", 0], ["--t", 0], ["--variant", "bagging"], ["--lr", "fast"]],
    )
    def test_bad_flags(self, complementary, tmp_path, flags):
        assert run("train", "--dataset", complementary, *flags, "--out-dir", tmp_path / "x") == 2

    def test_no_dataset(self):
        assert run("train") == 2

    def test_missing_dataset_file(self, tmp_path):
        assert run("train", "--dataset", tmp_path / "absent.mmds", "--out-dir", tmp_path / "x") == 1

    def test_corrupt_dataset_file(self, tmp_path):
        bad = tmp_path / "bad.mmds"
        bad.write_bytes(b"MMDS\x01\x00")
        assert run("train", "--dataset", bad, "--out-dir", tmp_path / "x") == 1


class TestEval:
    def test_untrained_is_chance(self, complementary, tmp_path):
        assert run("train", "--dataset", complementary, "--steps", 1, "--lr", 1e-12, "--out-dir", tmp_path / "r") == 0
        stem = tmp_path / "ev"
        assert run("eval", "--checkpoint", tmp_path / "r" / "checkpoint.mclf", "--dataset", complementary, "-o", stem) == 0
        report = read_report(tmp_path / "ev.txt")
        n, p = int(report["num_test_samples"]), 1 / 6
        band = 3 * np.sqrt(p * (1 - p) / n)
        for key in ("accuracy_0", "accuracy_1", "accuracy_2", "sum_accuracy"):
            assert abs(float(report[key]) - p) < band, key

    def test_subsets_echo(self, complementary, tmp_path, capsys):
        run("train", "--dataset", complementary, "--steps", 3, "--out-dir", tmp_path / "r")
        capsys.readouterr()
        assert run("eval", "--checkpoint", tmp_path / "r" / "checkpoint.mclf", "--dataset", complementary,
                   "--subsets", "0;1;2;0,1,2", "-o", tmp_path / "ev") == 0
        printed = [l.split(":")[0] for l in capsys.readouterr().out.splitlines() if l.startswith("subset")]
        assert printed == ["subset 0", "subset 1", "subset 2", "subset 0,1,2"]
        keys = [k for k in read_report(tmp_path / "ev.txt") if k.startswith("subset_")]
        assert keys == ["subset_0", "subset_1", "subset_2", "subset_0,1,2"]

    def test_bad_subset(self, complementary, tmp_path):
        run("train", "--dataset", complementary, "--steps", 1, "--out-dir", tmp_path / "r")
        assert run("eval", "--checkpoint", tmp_path / "r" / "checkpoint.mclf", "--dataset", complementary,
                   "--subsets", "5") == 1

    def test_checkpoint_round_trip_through_cli(self, complementary, tmp_path):
        run("train", "--dataset", complementary, "--steps", 2, "--hidden", "8,4", "--out-dir", tmp_path / "r")
        ens = load_checkpoint(tmp_path / "r" / "checkpoint.mclf")
        assert ens[0].layer_sizes == (16, 8, 4, 6)


class TestProbeAndCurves:
    def test_probe_grid(self, complementary, tmp_path, capsys):
        out = tmp_path / "probe.csv"
        assert run("probe", "--dataset", complementary, "--k", "1,5,10,50", "-o", out) == 0
        lines = out.read_text().splitlines()
        assert lines[0] == "modality,k=1,k=5,k=10,k=50"
        assert len(lines) == 4
        assert capsys.readouterr().out == out.read_text()

    def test_probe_k_too_large(self, complementary):
        assert run("probe", "--dataset", complementary, "--k", 100000) == 2

    def test_curves(self, complementary, tmp_path):
        run("train", "--dataset", complementary, "--steps", 4, "--out-dir", tmp_path / "r")
        out = tmp_path / "curves.csv"
        assert run("curves", "--log", tmp_path / "r" / "metrics.csv", "-o", out, "--smooth", 2) == 0
        lines = out.read_text().splitlines()
        assert lines[0] == "step,modality,mean_loss,winner_fraction,variant,seed"
        assert len(lines) == 1 + 12

    def test_curves_missing_log(self, tmp_path):
        assert run("curves", "--log", tmp_path / "none.csv", "-o", tmp_path / "c.csv") == 1


def test_module_entry_point(tmp_path):
    cmd = [sys.executable, "-m", "mcl_forge"]
    ok = subprocess.run(cmd + ["gen", "--m", "1", "--c", "2", "--n-per-class", "5", "-o", str(tmp_path / "d.mmds")],
                        capture_output=True, text=True)
    assert ok.returncode == 0
    assert subprocess.run(cmd + ["frobnicate"], capture_output=True, text=True).returncode == 2
