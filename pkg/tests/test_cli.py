import io

import numpy as np
import pytest

from graspinfer import cli, models, trainer, world


def run(*argv):
    out, err = io.StringIO(), io.StringIO()
    code = cli.main([str(a) for a in argv], out, err)
    return code, out.getvalue(), err.getvalue()


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    code, _, err = run("gen-data", "--n", 150, "--seed", 7, "--out", d / "data.bin")
    assert code == 0, err
    code, _, err = run("train", "--data", d / "data.bin", "--iters", 30, "--out", d / "cn.ckpt")
    assert code == 0, err
    code, _, err = run("train", "--data", d / "data.bin", "--arch", "regression", "--iters", 10,
                       "--out", d / "reg.ckpt")
    assert code == 0, err
    return d


class TestGenData:
    def test_summary_and_file(self, tmp_path):
        code, out, err = run("gen-data", "--n", 40, "--seed", 7, "--out", tmp_path / "d.bin")
        assert code == 0
        assert "40 trials" in out and "positive" in out
        assert len(world.load_dataset(tmp_path / "d.bin")) == 40
        assert "config n=40 (flag)" in err and "config families=24 (default)" in err

    def test_byte_identical_rerun(self, tmp_path):
        for name in ("a", "b"):
            assert run("gen-data", "--n", 25, "--seed", 3, "--out", tmp_path / name)[0] == 0
        assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()

    @pytest.mark.parametrize("n", [0, -3])
    def test_invalid_n(self, tmp_path, n):
        code, _, err = run("gen-data", "--n", n, "--out", tmp_path / "d.bin")
        assert code == 2 and "usage error" in err
        assert not (tmp_path / "d.bin").exists()

    def test_unwritable_path(self, tmp_path):
        code, _, err = run("gen-data", "--n", 5, "--out", tmp_path / "missing" / "d.bin")
        assert code == 3

    def test_missing_required(self):
        assert run("gen-data", "--n", 5)[0] == 2

    def test_bad_type(self, tmp_path):
        assert run("gen-data", "--n", "many", "--out", tmp_path / "d.bin")[0] == 2


class TestConfigFile:
    def test_precedence(self, tmp_path):
        conf = tmp_path / "run.conf"
        conf.write_text("# comment\nn = 30\nseed=4\ncalib.slack=0.05\n")
        code, out, err = run("--config", conf, "gen-data", "--n", 12, "--out", tmp_path / "d.bin")
        assert code == 0
        assert "config n=12 (flag)" in err
        assert f"config seed=4 (file:{conf})" in err
        assert "config calib.slack=0.05" in err
        ds = world.load_dataset(tmp_path / "d.bin")
        assert len(ds) == 12 and ds.seed == 4 and ds.calib.slack == pytest.approx(0.05)

    def test_unknown_key(self, tmp_path):
        conf = tmp_path / "run.conf"
        conf.write_text("n=3\nbogus=1\n")
        code, _, err = run("--config", conf, "gen-data", "--out", tmp_path / "d.bin")
        assert code == 2 and ":2:" in err and "bogus" in err

    def test_malformed_line(self, tmp_path):
        conf = tmp_path / "run.conf"
        conf.write_text("n 3\n")
        code, _, err = run("--config", conf, "gen-data", "--out", tmp_path / "d.bin")
        assert code == 2 and ":1:" in err

    def test_missing_config(self, tmp_path):
        assert run("--config", tmp_path / "nope", "gen-data", "--out", tmp_path / "d.bin")[0] == 2

    def test_boolean_values(self, tmp_path):
        conf = tmp_path / "run.conf"
        conf.write_text("mirror=no\n")
        cfg = cli.resolve(cli.build_parser().parse_args(["--config", str(conf), "train", "--data", "x", "--out", "y"]))
        assert cfg["mirror"] is False
        cfg = cli.resolve(cli.build_parser().parse_args(["train", "--data", "x", "--out", "y", "--mirror", "on"]))
        assert cfg["mirror"] is True

    def test_help_and_unknown_command(self):
        assert run("--help")[0] == 0
        assert run("frobnicate")[0] == 2
        assert run()[0] == 2


class TestTrain:
    def test_outputs(self, work):
        model = models.load_checkpoint(work / "cn.ckpt")
        assert model.arch == "config-net"
        trace = (work / "cn.ckpt.loss").read_text().splitlines()
        assert len(trace) == 30 and trace[0].startswith("0 ")
        leftovers = [p.name for p in work.iterdir() if p.name.startswith(".") or p.suffix == ".tmp"]
        assert leftovers == []

    def test_regression_reports_positive_count(self, work, tmp_path):
        ds = world.load_dataset(work / "data.bin")
        code, out, _ = run("train", "--data", work / "data.bin", "--arch", "regression", "--iters", 3,
                           "--out", tmp_path / "r.ckpt")
        assert code == 0
        assert f"trained on {2 * int(ds.labels.sum())} positive samples of {len(ds)}" in out

    def test_deterministic(self, work, tmp_path):
        for name in ("a", "b"):
            assert run("train", "--data", work / "data.bin", "--iters", 15, "--seed", 2,
                       "--out", tmp_path / name)[0] == 0
        assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()
        assert (tmp_path / "a.loss").read_bytes() == (tmp_path / "b.loss").read_bytes()

    def test_missing_data(self, tmp_path):
        code, _, err = run("train", "--data", tmp_path / "none.bin", "--out", tmp_path / "m")
        assert code == 3 and "data error" in err

    def test_corrupt_data(self, tmp_path):
        (tmp_path / "bad.bin").write_bytes(b"garbage\n")
        assert run("train", "--data", tmp_path / "bad.bin", "--out", tmp_path / "m")[0] == 3

    def test_numeric_failure(self, work, tmp_path, monkeypatch):
        def boom(*args, **kwargs):
            raise trainer.TrainingError("non-finite loss at iteration 3 (lr=0.001)")

        monkeypatch.setattr(trainer, "train", boom)
        code, _, err = run("train", "--data", work / "data.bin", "--out", tmp_path / "m")
        assert code == 4 and "iteration 3" in err
        assert not (tmp_path / "m").exists()


class TestEval:
    def test_report(self, work, tmp_path):
        code, out, _ = run("eval", "--data", work / "data.bin", "--model", work / "cn.ckpt", "--folds", 2,
                           "--iters", 10, "--scores-out", tmp_path / "s.txt")
        assert code == 0
        assert out.splitlines()[0].split() == ["Experiment", "Accuracy", "F1", "AUC"]
        assert "fold 1: auc" in out
        lines = (tmp_path / "s.txt").read_text().splitlines()
        assert lines[0] == "# mode=seen" and len(lines) == 151

    def test_single_fold_rejected(self, work):
        assert run("eval", "--data", work / "data.bin", "--model", work / "cn.ckpt", "--folds", 1)[0] == 2

    def test_regression_checkpoint_rejected(self, work):
        code, _, err = run("eval", "--data", work / "data.bin", "--model", work / "reg.ckpt")
        assert code == 2 and "classifier" in err

    def test_infeasible_unseen(self, work, tmp_path):
        run("gen-data", "--n", 30, "--families", 3, "--out", tmp_path / "few.bin")
        code, _, err = run("eval", "--data", tmp_path / "few.bin", "--model", work / "cn.ckpt",
                           "--mode", "unseen", "--folds", 5, "--iters", 2)
        assert code == 3 and "families" in err


class TestPlan:
    def test_three_results(self, work):
        code, out, _ = run("plan", "--model", work / "cn.ckpt", "--scene-seed", 4)
        lines = out.splitlines()
        assert code == 0 and len(lines) == 4
        assert lines[-1].startswith("chosen=")
        assert all("oracle=" in ln for ln in lines[:3])

    def test_full_chain_on_fixed_patch_warns(self, work):
        code, _, err = run("plan", "--model", work / "cn.ckpt", "--mode", "full-chain")
        assert code == 0 and "equals config-only" in err

    def test_init_file(self, work, tmp_path):
        (tmp_path / "inits.txt").write_text("# gx gy psi h\n0.5 0.5 0.0 0.1\n0.45,0.55,1.2,0.08\n")
        code, out, _ = run("plan", "--model", work / "cn.ckpt", "--inits", tmp_path / "inits.txt")
        assert code == 0 and len(out.splitlines()) == 3

    def test_malformed_init_file(self, work, tmp_path):
        (tmp_path / "inits.txt").write_text("0.5 0.5 0.0 0.1\n0.5 oops 0 0.1\n")
        code, _, err = run("plan", "--model", work / "cn.ckpt", "--inits", tmp_path / "inits.txt")
        assert code == 3 and "inits.txt:2:" in err
        (tmp_path / "short.txt").write_text("\n0.5 0.5 0.0\n")
        code, _, err = run("plan", "--model", work / "cn.ckpt", "--inits", tmp_path / "short.txt")
        assert code == 3 and "short.txt:2:" in err

    def test_regression_model_rejected(self, work):
        assert run("plan", "--model", work / "reg.ckpt")[0] == 2


class TestBench:
    def test_table_log_and_determinism(self, work, tmp_path):
        args = ["bench", "--model", work / "cn.ckpt", "--scenes", 3, "--samples", 10, "--seed", 5]
        code, out, _ = run(*args, "--log", tmp_path / "a.log", "--out", tmp_path / "a.txt")
        assert code == 0
        header = out.splitlines()[1].split()
        assert header == ["family", "heuristic", "max-eval", "sampling", "inference"]
        assert out.splitlines()[0].startswith("#")
        assert (tmp_path / "a.txt").read_text() == out
        run(*args, "--log", tmp_path / "b.log")
        assert (tmp_path / "a.log").read_bytes() == (tmp_path / "b.log").read_bytes()

        code, out, _ = run("plot-data", "--bench-log", tmp_path / "a.log")
        assert code == 0 and out.startswith("# success-rate")

    def test_methods_filter(self, work):
        code, out, _ = run("bench", "--model", work / "cn.ckpt", "--scenes", 2, "--methods", "inference,heuristic")
        assert code == 0
        assert out.splitlines()[1].split() == ["family", "inference", "heuristic"]

    def test_regression_column(self, work):
        code, out, _ = run("bench", "--model", work / "cn.ckpt", "--scenes", 2, "--methods", "heuristic",
                           "--regression", work / "reg.ckpt")
        assert code == 0 and out.splitlines()[1].split() == ["family", "heuristic", "regression"]

    def test_bad_methods(self, work):
        assert run("bench", "--model", work / "cn.ckpt", "--methods", "magic")[0] == 2
        assert run("bench", "--model", work / "cn.ckpt", "--methods", "regression")[0] == 2
        assert run("bench", "--model", work / "cn.ckpt", "--regression", work / "cn.ckpt")[0] == 2


class TestPlotData:
    def test_scores(self, tmp_path):
        rng = np.random.default_rng(0)
        lines = ["# mode=unseen"]
        for fold in range(2):
            for _ in range(20):
                y = int(rng.integers(2))
                lines.append(f"{fold} {rng.random() * 0.5 + 0.4 * y:.6f} {y}")
        (tmp_path / "s.txt").write_text("\n".join(lines) + "\n")
        code, out, _ = run("plot-data", "--scores", tmp_path / "s.txt", "--out", tmp_path / "p.txt")
        assert code == 0 and out == ""
        text = (tmp_path / "p.txt").read_text()
        assert "# roc unseen vertical-average" in text and "# roc chance" in text

    def test_needs_input(self):
        assert run("plot-data")[0] == 2

    def test_malformed_inputs(self, tmp_path):
        (tmp_path / "s.txt").write_text("0 0.5\n")
        assert run("plot-data", "--scores", tmp_path / "s.txt")[0] == 3
        (tmp_path / "log.txt").write_text("scene=1 method=x\n")
        assert run("plot-data", "--bench-log", tmp_path / "log.txt")[0] == 3
