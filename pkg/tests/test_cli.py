import csv
import math

import numpy as np

from momentum_ssm.cli import COMMANDS, COMMON, main, read_config
from momentum_ssm.har_pipeline import Model, ModelConfig, Recording, load_checkpoint, write_dataset_csv
from momentum_ssm.numkit import Rng

TINY_MODEL = ["--d-model", "8", "--d-state", "4", "--n-layers", "1"]
TRAIN_KEYS = {**COMMANDS["train"], **COMMON}
SWEEP_KEYS = {**COMMANDS["sweep"], **COMMON}
TINY_TASK = ["--seq-len", "12", "--delay", "3", "--n-train", "16", "--n-val", "8", "--classes", "3"]


def rows(path):
    with open(path) as fh:
        return list(csv.reader(line for line in fh if not line.startswith("#")))


def run(tmp_path, name, *args):
    out = tmp_path / name
    code = main([args[0], "--out", str(out), *args[1:]])
    return code, out


class TestScanBench:
    def test_depths_and_columns(self, tmp_path):
        code, out = run(tmp_path, "b", "scan-bench", "--lengths", "1,5,4096", "--kinds", "diagonal,momentum",
                        "--n-state", "2", "--repeats", "1", "--no-ratio")
        assert code == 0
        table = rows(out / "scan_bench.csv")
        assert table[0] == ["kind", "L", "N", "seq_ns", "par_ns", "speedup", "combine_depth"]
        depth = {(r[0], int(r[1])): int(r[6]) for r in table[1:]}
        assert depth[("diagonal", 1)] == 1
        assert depth[("diagonal", 5)] == 4
        assert depth[("momentum", 4096)] == 13

    def test_digest_is_byte_identical(self, tmp_path):
        args = ["scan-bench", "--lengths", "3,64", "--n-state", "2", "--repeats", "1", "--no-ratio"]
        _, a = run(tmp_path, "a", *args)
        _, b = run(tmp_path, "b", *args)
        assert (a / "scan_bench_digest.csv").read_bytes() == (b / "scan_bench_digest.csv").read_bytes()

    def test_ratio_reported_as_comment(self, tmp_path):
        code, out = run(tmp_path, "r", "scan-bench", "--lengths", "4", "--kinds", "diagonal", "--repeats", "1",
                        "--ratio-d-model", "8", "--ratio-d-state", "4", "--ratio-len", "16")
        assert code == 0
        comments = [l for l in (out / "scan_bench.csv").read_text().splitlines() if l.startswith("#")]
        assert any("ratio" in l for l in comments)


class TestCheck:
    def test_fast_checks_pass(self, tmp_path):
        code, out = run(tmp_path, "c", "check", "--props", "inverse,affine,jacobian,impulse")
        assert code == 0
        report = rows(out / "check_report.csv")
        assert report[0] == ["check", "metric", "worst_error", "tolerance", "gating", "passed"]
        assert all(r[5] == "1" for r in report[1:])
        assert (out / "check_inverse.csv").exists()

    def test_sign_mutation_fails_inverse(self, tmp_path):
        code, out = run(tmp_path, "m", "check", "--props", "inverse", "--mutate-schur-sign")
        assert code == 1
        assert rows(out / "check_inverse.csv")[1][4] == "0"

    def test_empty_selection(self, tmp_path):
        code, out = run(tmp_path, "e", "check", "--props", "")
        assert code == 0
        assert rows(out / "check_report.csv") == [["check", "metric", "worst_error", "tolerance", "gating",
                                                   "passed"]]

    def test_unknown_check_is_usage_error(self, tmp_path):
        assert run(tmp_path, "u", "check", "--props", "inverse,bogus")[0] == 2


class TestGradflow:
    def test_zero_epochs_single_column(self, tmp_path):
        code, out = run(tmp_path, "g", "gradflow", "--variant", "momentum", "--epochs", "0", *TINY_MODEL,
                        "--seq-len", "16", "--delay", "4", "--n-train", "8", "--n-val", "8")
        assert code == 0
        table = rows(out / "gradflow_momentum.csv")
        assert table[0] == ["t", "epoch_0"]
        assert len(table) == 17
        assert "ratio_first_over_last=" in (out / "gradflow_momentum_summary.txt").read_text()

    def test_rejects_other_variants(self, tmp_path):
        assert run(tmp_path, "g", "gradflow", "--variant", "adam", "--epochs", "0")[0] == 2


class TestTrain:
    def test_bit_identical_runs(self, tmp_path):
        args = ["train", "--seed", "7", *TINY_MODEL, *TINY_TASK, "--max-epochs", "2", "--batch", "8"]
        _, a = run(tmp_path, "a", *args)
        _, b = run(tmp_path, "b", *args)
        assert (a / "metrics.csv").read_bytes() == (b / "metrics.csv").read_bytes()
        assert (a / "checkpoint.mssm").read_bytes() == (b / "checkpoint.mssm").read_bytes()
        assert rows(a / "metrics.csv")[0] == ["epoch", "train_loss", "val_loss", "val_acc", "lr"]

    def test_zero_epochs_checkpoint_is_initialization(self, tmp_path):
        code, out = run(tmp_path, "z", "train", "--seed", "3", *TINY_MODEL, *TINY_TASK, "--max-epochs", "0")
        assert code == 0
        params, buffers = load_checkpoint(out / "checkpoint.mssm")
        cfg = ModelConfig(d_model=8, d_state=4, n_layers=1, num_classes=3)
        init = Model.init(cfg, Rng(3).child(0))
        assert params.keys() == init.params.keys()
        for k in params:
            np.testing.assert_array_equal(params[k], init.params[k])

    def test_resolved_config_reproduces_run(self, tmp_path):
        args = ["train", "--seed", "5", *TINY_MODEL, *TINY_TASK, "--max-epochs", "1", "--lr", "0.003"]
        _, a = run(tmp_path, "a", *args)
        code, b = run(tmp_path, "b", "train", "--config", str(a / "resolved_config.txt"))
        assert code == 0
        assert (a / "metrics.csv").read_bytes() == (b / "metrics.csv").read_bytes()
        resolved_b = read_config(b / "resolved_config.txt", TRAIN_KEYS)
        resolved_a = read_config(a / "resolved_config.txt", TRAIN_KEYS)
        assert {k: v for k, v in resolved_a.items() if k != "out"} == \
               {k: v for k, v in resolved_b.items() if k != "out"}

    def test_csv_dataset(self, tmp_path):
        rng = Rng(0)
        for split in ("train", "val"):
            recs = [Recording(str(i), np.arange(40.0), rng.normal((40, 6)), np.full(40, i % 2)) for i in range(3)]
            write_dataset_csv(tmp_path / f"{split}.csv", recs)
        code, out = run(tmp_path, "d", "train", *TINY_MODEL, "--seq-len", "16", "--max-epochs", "1",
                        "--train-csv", str(tmp_path / "train.csv"), "--val-csv", str(tmp_path / "val.csv"))
        assert code == 0
        assert rows(out / "stats.csv")[0] == ["channel", "mean", "std"]

    def test_bad_dataset_exit_code_and_line(self, tmp_path, capsys):
        bad = tmp_path / "bad.csv"
        bad.write_text("t,ax,ay,az,gx,gy,gz,label_id\n0,1,2,3,4,5,6,0\n0,1,2,oops,4,5,6,0\n")
        code, _ = run(tmp_path, "x", "train", "--train-csv", str(bad), "--val-csv", str(bad))
        assert code == 3
        assert ":3:" in capsys.readouterr().err

    def test_missing_dataset(self, tmp_path):
        code, _ = run(tmp_path, "x", "train", "--train-csv", str(tmp_path / "nope.csv"),
                      "--val-csv", str(tmp_path / "nope.csv"))
        assert code == 3


class TestSweep:
    def test_single_cell(self, tmp_path):
        code, out = run(tmp_path, "s", "sweep", *TINY_MODEL, *TINY_TASK, "--max-epochs", "1",
                        "--beta-grid", "0.9", "--alpha-grid", "0.6")
        assert code == 0
        table = rows(out / "sweep.csv")
        assert len(table) == 2 and len(table[1]) == 2
        assert 0.0 <= float(table[1][1]) <= 1.0

    def test_default_grid_shape(self, tmp_path):
        code, out = run(tmp_path, "s", "sweep", "--d-model", "4", "--d-state", "2", "--n-layers", "1",
                        "--seq-len", "6", "--delay", "1", "--n-train", "6", "--n-val", "6", "--classes", "3",
                        "--max-epochs", "1")
        assert code == 0
        table = rows(out / "sweep.csv")
        assert table[0][0] == "beta"
        assert [float(r[0]) for r in table[1:]] == [0.0, 0.1, 0.3, 0.6, 0.9, 0.99, 0.999]
        assert [float(c.split("=")[1]) for c in table[0][1:]] == [0.0, 0.1, 0.3, 0.6, 0.9, 1.0, 2.0]
        cells = [float(v) for r in table[1:] for v in r[1:]]
        assert len(cells) == 49
        assert all(math.isnan(v) or 0.0 <= v <= 1.0 for v in cells)

    def test_byte_identical(self, tmp_path):
        args = ["sweep", *TINY_MODEL, *TINY_TASK, "--max-epochs", "1", "--beta-grid", "0.5,0.9",
                "--alpha-grid", "0,1"]
        _, a = run(tmp_path, "a", *args)
        _, b = run(tmp_path, "b", *args)
        assert (a / "sweep.csv").read_bytes() == (b / "sweep.csv").read_bytes()


class TestUsage:
    def test_no_command(self):
        assert main([]) == 2

    def test_unknown_flag(self, tmp_path):
        assert main(["train", "--out", str(tmp_path), "--bogus", "1"]) == 2

    def test_bad_value(self, tmp_path):
        assert main(["train", "--out", str(tmp_path), "--lr", "fast"]) == 2

    def test_unknown_config_key(self, tmp_path):
        cfg = tmp_path / "c.txt"
        cfg.write_text("# comment\nlr = 0.01\nwarmup = 3\n")
        assert main(["train", "--out", str(tmp_path / "o"), "--config", str(cfg)]) == 2

    def test_config_file_parsing(self, tmp_path):
        cfg = tmp_path / "c.txt"
        cfg.write_text("# comment\n\nlr = 0.01\nbeta_grid = 0.1, 0.2\n")
        parsed = read_config(cfg, SWEEP_KEYS)
        assert parsed == {"lr": 0.01, "beta_grid": [0.1, 0.2]}

    def test_flags_override_config(self, tmp_path):
        cfg = tmp_path / "c.txt"
        cfg.write_text("max_epochs = 3\n")
        out = tmp_path / "o"
        code = main(["train", "--out", str(out), "--config", str(cfg), "--max-epochs", "0", *TINY_MODEL,
                     *TINY_TASK])
        assert code == 0
        assert "max_epochs = 0" in (out / "resolved_config.txt").read_text().splitlines()

    def test_help(self, capsys):
        assert main(["--help"]) == 0
        assert "scan-bench" in capsys.readouterr().out
