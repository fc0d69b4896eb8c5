"""End-to-end command-line tests: every subcommand runs against a tiny
dataset, outputs land where advertised, and failures map to the documented
exit codes (0 success, 1 I/O or value errors, 2 config or format errors)."""

import json
import os

import numpy as np
import pytest

from deformgrid import cli, config, formats
from deformgrid.net import model

CFG_DOC = {
    "dataset": {
        "grid_n": 16,
        "num_meshes": 4,
        "force_max": 0.5,
        "train_fraction": 0.75,
    },
    "net": {"grid_n": 16, "stage_channels": [2, 3, 4, 5]},
    "train": {
        "learning_rate": 1e-3,
        "batch_size": 2,
        "max_epochs": 2,
        "patience": 2,
    },
}


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg_path = root / "cfg.json"
    cfg_path.write_text(json.dumps(CFG_DOC))
    data = root / "data"
    code = cli.main(
        ["--config", str(cfg_path), "gen-data", "--out", str(data)]
    )
    assert code == 0
    return root


@pytest.fixture(scope="module")
def trained(workdir):
    run = workdir / "run"
    code = cli.main(
        [
            "--config", str(workdir / "cfg.json"),
            "train",
            "--data", str(workdir / "data"),
            "--out", str(run),
        ]
    )
    assert code == 0
    return run


def run_cli(args):
    """main() with SystemExit (argparse errors) folded into the exit code."""
    try:
        return cli.main([str(a) for a in args])
    except SystemExit as exc:
        return exc.code


# ---------------------------------------------------------------------------
# gen-data


def test_gen_data_layout(workdir):
    data = workdir / "data"
    manifest = formats.read_manifest(data / "manifest.txt")
    stats = json.loads((data / "stats.json").read_text())
    assert stats["accepted"] == 4
    assert len(manifest.entries) == 32
    assert len(manifest.paths("val")) == 8
    for rel, _ in manifest.entries:
        assert (data / rel).exists()


def test_gen_data_count_two_lists_sixteen_samples(workdir):
    out = workdir / "count2"
    code = run_cli(
        ["--config", workdir / "cfg.json", "gen-data",
         "--out", out, "--count", 2]
    )
    assert code == 0
    manifest = formats.read_manifest(out / "manifest.txt")
    assert len(manifest.entries) == 16  # 2 meshes x 8 flips


def test_gen_data_per_seed_samples_reproduce_across_runs(workdir):
    a = (workdir / "data" / "s000000_f0.dgs").read_bytes()
    b = (workdir / "count2" / "s000000_f0.dgs").read_bytes()
    assert a == b


def test_gen_data_seed_override_shifts_sequence(workdir):
    out = workdir / "seeded"
    code = run_cli(
        ["--config", workdir / "cfg.json", "--seed", 50,
         "gen-data", "--out", out, "--count", 1]
    )
    assert code == 0
    manifest = formats.read_manifest(out / "manifest.txt")
    assert all(int(rel[1:7]) >= 50 for rel, _ in manifest.entries)


# ---------------------------------------------------------------------------
# train


def test_train_writes_checkpoint_and_log(workdir, trained):
    header, params, state = formats.read_checkpoint(trained / "checkpoint.dgnet")
    cfg = config.from_dict(CFG_DOC)
    assert header["config_digest"] == cfg.digest()
    assert header["grid_n"] == 16
    assert len(params) == len(model.param_names(cfg.net))
    assert state is not None
    lines = (trained / "training_log.csv").read_text().strip().splitlines()
    assert lines[0].startswith("epoch,")
    assert len(lines) >= 2


# ---------------------------------------------------------------------------
# infer


def test_infer_twice_is_bitwise_identical(workdir, trained, capsys):
    sample = workdir / "data" / "s000000_f0.dgs"
    outs = []
    for name in ("u1.npy", "u2.npy"):
        out = workdir / name
        code = run_cli(
            ["--config", workdir / "cfg.json", "infer",
             "--checkpoint", trained / "checkpoint.dgnet",
             "--sample", sample, "--out", out]
        )
        assert code == 0
        outs.append(out)
    info = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert info["grid_n"] == 16
    assert info["elapsed_s"] > 0
    assert outs[0].read_bytes() == outs[1].read_bytes()
    u = np.load(outs[0])
    assert u.shape == (16, 16, 16, 3)
    assert np.isfinite(u).all()


# ---------------------------------------------------------------------------
# eval


def test_eval_perfect_estimator_gives_zero_error_tables(workdir):
    out = workdir / "eval_perfect"
    code = run_cli(
        ["--config", workdir / "cfg.json", "eval",
         "--data", workdir / "data", "--estimator", "perfect",
         "--out", out]
    )
    assert code == 0
    summary = json.loads((out / "summary.json").read_text())
    assert summary["mean_error_m"] == 0.0
    assert summary["max_error_m"] == 0.0
    assert summary["estimator"] == "perfect"
    rows = (out / "depth_magnitude.csv").read_text().strip().splitlines()[1:]
    means = [r.split(",")[-1] for r in rows]
    assert all(m == "" or float(m) == 0.0 for m in means)
    rows = (out / "fraction_bins.csv").read_text().strip().splitlines()[1:]
    pop = [r for r in rows if r.split(",")[-1] != ""]
    assert pop and all(float(r.split(",")[-1]) == 0.0 for r in pop)


def test_eval_net_writes_summary(workdir, trained):
    out = workdir / "eval_net"
    code = run_cli(
        ["--config", workdir / "cfg.json", "eval",
         "--data", workdir / "data",
         "--checkpoint", trained / "checkpoint.dgnet", "--out", out]
    )
    assert code == 0
    summary = json.loads((out / "summary.json").read_text())
    assert summary["estimator"] == "net"
    assert summary["split"] == "val"
    assert set(summary["baseline_mean_error_m"]) == {
        "zeroField", "nearestVisibleCopy",
    }
    assert summary["mean_error_m"] > 0
    assert (out / "hist2d_2cm.csv").exists()


def test_eval_net_requires_checkpoint(workdir):
    code = run_cli(
        ["--config", workdir / "cfg.json", "eval", "--data", workdir / "data"]
    )
    assert code == 2


# ---------------------------------------------------------------------------
# bench


def test_bench_reports_latency_json(workdir, capsys):
    code = run_cli(
        ["--config", workdir / "cfg.json", "bench", "--reps", 2]
    )
    assert code == 0
    out = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert out["grid_n"] == 16
    assert out["reps"] == 2
    assert out["parameters"] == model.count_parameters(
        config.from_dict(CFG_DOC).net
    )
    assert out["mean_ms"] > 0
    assert out["p95_ms"] >= out["mean_ms"] * 0.5


# ---------------------------------------------------------------------------
# failure modes -> exit codes


def test_invalid_config_exits_2(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text('{"schema_version": 99}')
    assert run_cli(["--config", bad, "bench"]) == 2


def test_unknown_config_key_exits_2(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text('{"bogus": 1}')
    assert run_cli(["--config", bad, "bench"]) == 2


def test_malformed_json_exits_2(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert run_cli(["--config", bad, "bench"]) == 2


def test_missing_config_file_exits_1(tmp_path):
    assert run_cli(["--config", tmp_path / "absent.json", "bench"]) == 1


def test_missing_data_dir_exits_1(workdir, tmp_path):
    code = run_cli(
        ["--config", workdir / "cfg.json", "train",
         "--data", tmp_path / "nothing", "--out", tmp_path / "run"]
    )
    assert code == 1


def test_missing_checkpoint_exits_1(workdir):
    sample = workdir / "data" / "s000000_f0.dgs"
    code = run_cli(
        ["--config", workdir / "cfg.json", "infer",
         "--checkpoint", workdir / "absent.dgnet", "--sample", sample]
    )
    assert code == 1


def test_corrupt_checkpoint_exits_2(workdir, tmp_path):
    junk = tmp_path / "junk.dgnet"
    junk.write_bytes(b"XXXXXXXXXXXXXXXX")
    sample = workdir / "data" / "s000000_f0.dgs"
    code = run_cli(
        ["--config", workdir / "cfg.json", "infer",
         "--checkpoint", junk, "--sample", sample]
    )
    assert code == 2


def test_nonpositive_threads_exits_2(workdir):
    assert run_cli(["--threads", 0, "bench"]) == 2
