import filecmp
from pathlib import Path

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sonofield import cli, dataio, gradsuite

SIM = ["--frames", "3", "--width", "12", "--depth", "16", "--tilt", "10", "--test-tilt", "0", "--half-length", "1", "--mode", "hard"]
SMALL_NET = ["--iters", "3", "--width", "8", "--layers", "2", "--skip", "1", "--frequencies", "2"]


def run(*argv) -> int:
    return cli.main([str(a) for a in argv])


def same_tree(a: Path, b: Path) -> bool:
    cmp = filecmp.dircmp(a, b)
    if cmp.left_only or cmp.right_only or cmp.funny_files:
        return False
    _, mismatch, errors = filecmp.cmpfiles(a, b, cmp.common_files, shallow=False)
    return not mismatch and not errors and all(same_tree(a / d, b / d) for d in cmp.common_dirs)


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert run("simulate", "--out", root / "ds", "--seed", 7, *SIM) == 0
    poses = (root / "ds" / "sweep_1" / "poses.txt").read_text().splitlines()
    (root / "pose.txt").write_text(poses[0] + "\n")
    (root / "poses.txt").write_text("\n".join(poses[:2]) + "\n")
    assert run("train", "--data", root / "ds", "--out", root / "ck.bin", "--mode", "expected", *SMALL_NET) == 0
    return root


class TestDispatch:
    def test_no_arguments_prints_usage(self, capsys):
        assert cli.main([]) == 1
        assert "usage" in capsys.readouterr().err

    def test_help_lists_every_subcommand(self, capsys):
        with pytest.raises(SystemExit) as exc:
            cli.main(["--help"])
        assert exc.value.code == 0
        out = capsys.readouterr().out
        for name in cli.COMMANDS:
            assert name in out

    @pytest.mark.parametrize(
        "argv, message",
        [
            (["train", "--data", "x"], "--out is required"),
            (["train", "--bogus", "1"], "unrecognized arguments"),
            (["frobnicate"], "invalid choice"),
            (["train", "--data", "nowhere", "--out", "c.bin"], "does not exist"),
            (["simulate", "--out", "d", "--frames", "0"], "bad value for --frames"),
            (["simulate", "--out", "d", "--tilt", "50"], "45 degrees"),
            (["simulate", "--out", "d", "--sweeps", "9"], "exceeds"),
            (["compound", "--data", ".", "--out", "v.raw", "--mode", "median"], "expected one of"),
        ],
    )
    def test_validation_errors_exit_one(self, argv, message, capsys, tmp_path, monkeypatch):
        monkeypatch.chdir(tmp_path)
        assert cli.main(argv) == 1
        assert message in capsys.readouterr().err
        assert not any(tmp_path.iterdir())

    def test_unknown_config_key(self, tmp_path, capsys):
        cfg = tmp_path / "run.cfg"
        cfg.write_text("out=x\nlearning_rate=3\n")
        assert run("simulate", "--config", cfg) == 1
        assert "unknown config key(s): learning-rate" in capsys.readouterr().err

    def test_malformed_config_line(self, tmp_path, capsys):
        cfg = tmp_path / "run.cfg"
        cfg.write_text("out=x\njust words\n")
        assert run("simulate", "--config", cfg) == 1
        assert "run.cfg:2: expected key=value" in capsys.readouterr().err

    def test_runtime_error_exits_two(self, tmp_path, capsys, workspace):
        bad = tmp_path / "bad.bin"
        bad.write_bytes(b"garbage")
        assert run("render", "--ckpt", bad, "--pose-file", workspace / "pose.txt", "--out", tmp_path / "r.pgm") == 2
        assert "bad magic" in capsys.readouterr().err

    def test_resolved_config_on_stderr(self, capsys, workspace, tmp_path):
        assert run("slice", "--vol", workspace / "missing.raw", "--pose-file", workspace / "pose.txt", "--out", tmp_path / "s.pgm") == 1
        err = capsys.readouterr().err
        assert "# sonofield slice" in err and "width=64" in err and "threads=1" in err


class TestResolution:
    def test_precedence(self):
        cfg = cli.resolve("train", {"iters": "7"}, {"iters": "5", "lr": "0.01", "data": "d", "out": "o"})
        assert cfg["iters"] == 7 and cfg["lr"] == 0.01 and cfg["width"] == 256

    def test_dashes_and_underscores_equivalent(self):
        a = cli.resolve("train", {}, {"data": "d", "out": "o", "halve-every": "10"})
        b = cli.resolve("train", {}, {"data": "d", "out": "o", "halve_every": "10"})
        assert a == b and a["halve_every"] == 10

    @settings(max_examples=40, deadline=None)
    @given(
        st.fixed_dictionaries(
            {"data": st.just("d"), "out": st.just("o")},
            optional={
                "iters": st.integers(0, 10**6).map(str),
                "lr": st.floats(1e-6, 1.0).map(repr),
                "variant": st.sampled_from(["ultra", "baseline"]),
                "lambda": st.floats(0, 1).map(repr),
                "threads": st.integers(1, 64).map(str),
            },
        )
    )
    def test_resolving_twice_equals_once(self, tmp_path_factory, flags):
        once = cli.resolve("train", flags)
        path = tmp_path_factory.mktemp("cfg") / "resolved.cfg"
        path.write_text(cli.format_config("train", once))
        assert cli.resolve("train", {}, cli.read_config(path)) == once

    def test_sequence_values_round_trip(self, tmp_path):
        once = cli.resolve("simulate", {"out": "d", "tilt": "5,-5", "test_tilt": ""})
        path = tmp_path / "r.cfg"
        path.write_text(cli.format_config("simulate", once))
        again = cli.resolve("simulate", {}, cli.read_config(path))
        assert again == once and again["tilt"] == (5.0, -5.0) and again["test_tilt"] == ()


class TestSubcommands:
    def test_simulate_deterministic(self, tmp_path, workspace):
        assert run("simulate", "--out", tmp_path / "again", "--seed", 7, *SIM) == 0
        assert same_tree(workspace / "ds", tmp_path / "again")
        assert run("simulate", "--out", tmp_path / "other", "--seed", 8, *SIM) == 0
        assert not same_tree(workspace / "ds", tmp_path / "other")

    def test_simulate_layout(self, workspace):
        _, _, manifests = dataio.load_manifest(workspace / "ds")
        assert [(m.split, m.view_kind) for m in manifests] == [("train", "tilted"), ("test", "perpendicular")]
        assert (workspace / "ds" / "sweep_0" / "gt" / "frame_0000_alpha.pgm").exists()

    def test_train_deterministic(self, tmp_path, workspace):
        assert run("train", "--data", workspace / "ds", "--out", tmp_path / "ck.bin", "--mode", "expected", *SMALL_NET) == 0
        assert (tmp_path / "ck.bin").read_bytes() == (workspace / "ck.bin").read_bytes()

    def test_train_periodic_checkpoints(self, tmp_path, workspace):
        assert run("train", "--data", workspace / "ds", "--out", tmp_path / "ck.bin", "--checkpoint-every", 2, *SMALL_NET) == 0
        assert (tmp_path / "ck.bin.2").exists() and not (tmp_path / "ck.bin.3").exists()

    def test_render_one_and_many(self, tmp_path, workspace):
        assert run("render", "--ckpt", workspace / "ck.bin", "--pose-file", workspace / "pose.txt", "--out", tmp_path / "one.pgm") == 0
        assert dataio.read_pgm(tmp_path / "one.pgm").shape == (12, 16)
        assert run("render", "--ckpt", workspace / "ck.bin", "--pose-file", workspace / "poses.txt", "--out", tmp_path / "v.pgm") == 0
        assert sorted(p.name for p in tmp_path.glob("v_*.pgm")) == ["v_0000.pgm", "v_0001.pgm"]
        run("render", "--ckpt", workspace / "ck.bin", "--pose-file", workspace / "pose.txt", "--out", tmp_path / "two.pgm")
        assert (tmp_path / "one.pgm").read_bytes() == (tmp_path / "two.pgm").read_bytes()

    def test_eval_table_and_plot(self, tmp_path, workspace, capsys):
        for name in ("a", "b"):
            assert run("eval", "--ckpt", workspace / "ck.bin", "--data", workspace / "ds", "--out", tmp_path / f"{name}.tsv") == 0
        lines = (tmp_path / "a.tsv").read_text().splitlines()
        assert lines[0].split("\t") == ["sweep", "view", "frames", "median_ssim", "mean_ssim"]
        assert lines[1].startswith("sweep_1\tperpendicular\t3\t")
        assert (tmp_path / "a.tsv").read_bytes() == (tmp_path / "b.tsv").read_bytes()
        assert (tmp_path / "a.png").stat().st_size > 0
        assert "median_ssim" in capsys.readouterr().out

    def test_decompose_exports(self, tmp_path, workspace):
        assert run("decompose", "--ckpt", workspace / "ck.bin", "--pose-file", workspace / "pose.txt", "--out-dir", tmp_path / "maps") == 0
        names = {p.name for p in (tmp_path / "maps").iterdir()}
        for m in ("alpha", "beta", "rho_b", "rho_s", "phi"):
            assert f"frame_0000_{m}.pgm" in names
        assert "frame_0000_maps.png" in names
        rows = (tmp_path / "maps" / "frame_0000_ranges.tsv").read_text().splitlines()
        assert rows[0] == "map\tmin\tmax" and len(rows) == 6

    def test_decompose_baseline_fails(self, tmp_path, workspace):
        ck = tmp_path / "b.bin"
        assert run("train", "--data", workspace / "ds", "--out", ck, "--variant", "baseline", *SMALL_NET) == 0
        assert run("decompose", "--ckpt", ck, "--pose-file", workspace / "pose.txt", "--out-dir", tmp_path / "m") == 2

    def test_compound_and_slice(self, tmp_path, workspace):
        vol = tmp_path / "vol.raw"
        assert run("compound", "--data", workspace / "ds", "--exclude-sweeps", "sweep_1", "--out", vol) == 0
        assert Path(str(vol) + ".hdr").exists()
        out = tmp_path / "s.pgm"
        assert run("slice", "--vol", vol, "--pose-file", workspace / "pose.txt", "--out", out, "--width", 12, "--depth", 16) == 0
        assert dataio.read_pgm(out).shape == (12, 16)

    def test_compound_unknown_sweep(self, tmp_path, workspace):
        assert run("compound", "--data", workspace / "ds", "--exclude-sweeps", "sweep_9", "--out", tmp_path / "v.raw") == 2

    @pytest.mark.parametrize("error, code", [(0.0, 0), (1.0, 2)])
    def test_gradcheck_exit_code(self, monkeypatch, capsys, error, code):
        fake = [gradsuite.CheckResult("add", "float32", 1e-7, 1e-3), gradsuite.CheckResult("render", "float64", error, 1e-5)]
        monkeypatch.setattr(gradsuite, "run", lambda points, seed: fake)
        assert run("gradcheck") == code
        assert "render" in capsys.readouterr().out
