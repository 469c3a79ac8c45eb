"""CLI surface: plan rows, run determinism, analyze exports, exit codes."""

import json

import numpy as np
import pytest

from grainmoe import cli
from grainmoe.analysis import read_metrics


def run_cli(*argv):
    return cli.main(list(argv))


@pytest.fixture(scope="module")
def tiny_run_config(tmp_path_factory):
    """A fast CLI-sized run config (small model, 10 steps)."""
    cfg = {
        "preset": None,
        "ep_size": 4,
        "model": {
            "n_layers": 2, "d_model": 16, "n_heads": 2, "vocab_size": 16,
            "seq_len": 16, "rotary_pct": 0.5, "attn_dropout_p": 0.1,
            "init_std": 0.01, "tied_embeddings": False,
            "moe": {
                "n_experts": 4, "top_k": 2, "d_model": 16, "d_expert": 8,
                "capacity_factor": 1.5, "softmax_order": "after_topk",
                "aux_coeff": 0.01, "z_coeff": 0.001,
            },
        },
        "hp": {
            "beta1": 0.9, "beta2": 0.95, "weight_decay": 0.1, "peak_lr": 0.002,
            "warmup_frac": 0.01, "clip_threshold": 1.0, "batch_tokens": 64,
            "total_steps": 10, "aux_coeff": 0.01, "z_coeff": 0.001,
            "end_lr_frac": 0.1, "val_interval": 5, "seed": 3,
        },
    }
    path = tmp_path_factory.mktemp("cfg") / "run.json"
    path.write_text(json.dumps(cfg))
    return path


# ---------------------------------------------------------------------------
# plan


def test_plan_11b_g8_row(capsys):
    assert run_cli("plan", "--preset", "11b-g8") == 0
    out = capsys.readouterr().out
    assert "64, 8, 2.7B, 2048, 1024, 11.1B" in out


def test_plan_56b_2x_g8_row(capsys):
    assert run_cli("plan", "--preset", "56b-2x-g8") == 0
    assert "64, 16, 17.1B, 4096, 2048, 55.8B" in capsys.readouterr().out


def test_plan_writes_json_report(tmp_path, capsys):
    assert run_cli("plan", "--preset", "11b-g1", "--out", str(tmp_path)) == 0
    report = json.loads((tmp_path / "plan_11b-g1.json").read_text())
    assert report["counts"]["total_params"] == 11_115_499_520
    assert report["rounded"] == {"active_params": "2.7B", "total_params": "11.1B"}


def test_plan_accepts_arch_json(tmp_path, capsys):
    arch = {
        "name": "custom", "n_layers": 2, "d_model": 8, "d_ff": 16,
        "vocab_size": 11, "n_experts": 2, "top_k": 1, "granularity": 2,
        "tied_embeddings": False,
    }
    path = tmp_path / "arch.json"
    path.write_text(json.dumps(arch))
    assert run_cli("plan", "--config", str(path)) == 0
    assert "4, 2," in capsys.readouterr().out  # effective experts and top-k


def test_plan_unknown_preset_exits_1(capsys):
    assert run_cli("plan", "--preset", "nope") == 1
    assert "unknown preset" in capsys.readouterr().err


def test_plan_requires_exactly_one_source(capsys):
    assert run_cli("plan") == 1
    assert run_cli("plan", "--preset", "11b-g1", "--config", "x.json") == 1


# ---------------------------------------------------------------------------
# train


def test_train_writes_artifacts(tmp_path, tiny_run_config, capsys):
    out = tmp_path / "run"
    code = run_cli("train", "--config", str(tiny_run_config), "--out", str(out), "--no-figures")
    assert code == 0
    assert (out / "metrics.csv").exists()
    assert (out / "checkpoint.bin").exists()
    assert (out / "resolved_config.json").exists()
    cols = read_metrics(out)
    assert len(cols["step"]) == 10
    assert [k for k in cols if k.startswith("ep_load_")] == [f"ep_load_{g}" for g in range(4)]


def test_train_byte_identical_reruns(tmp_path, tiny_run_config):
    a, b = tmp_path / "a", tmp_path / "b"
    assert run_cli("train", "--config", str(tiny_run_config), "--out", str(a), "--no-figures") == 0
    assert run_cli("train", "--config", str(tiny_run_config), "--out", str(b), "--no-figures") == 0
    assert (a / "metrics.csv").read_bytes() == (b / "metrics.csv").read_bytes()
    assert (a / "checkpoint.bin").read_bytes() == (b / "checkpoint.bin").read_bytes()


def test_resolved_config_reproduces_run(tmp_path, tiny_run_config):
    first = tmp_path / "first"
    assert run_cli("train", "--config", str(tiny_run_config), "--out", str(first), "--no-figures") == 0
    second = tmp_path / "second"
    assert run_cli(
        "train", "--config", str(first / "resolved_config.json"), "--out", str(second), "--no-figures"
    ) == 0
    assert (first / "metrics.csv").read_bytes() == (second / "metrics.csv").read_bytes()


def test_train_seed_override_changes_metrics(tmp_path, tiny_run_config):
    a, b = tmp_path / "a", tmp_path / "b"
    run_cli("train", "--config", str(tiny_run_config), "--out", str(a), "--no-figures")
    run_cli("train", "--config", str(tiny_run_config), "--out", str(b), "--seed", "99", "--no-figures")
    assert (a / "metrics.csv").read_bytes() != (b / "metrics.csv").read_bytes()
    resolved = json.loads((b / "resolved_config.json").read_text())
    assert resolved["hp"]["seed"] == 99


def test_train_steps_override(tmp_path, tiny_run_config):
    out = tmp_path / "short"
    run_cli("train", "--config", str(tiny_run_config), "--out", str(out), "--steps", "4", "--no-figures")
    assert len(read_metrics(out)["step"]) == 4


def test_train_desk_preset_smoke(tmp_path):
    out = tmp_path / "desk"
    code = run_cli("train", "--preset", "desk-g1", "--out", str(out), "--steps", "4", "--no-figures")
    assert code == 0
    resolved = json.loads((out / "resolved_config.json").read_text())
    assert resolved["preset"] == "desk-g1"
    assert resolved["model"]["moe"]["softmax_order"] == "before_topk"


def test_train_unknown_preset_exits_1(tmp_path):
    assert run_cli("train", "--preset", "bogus", "--out", str(tmp_path / "x")) == 1


def test_train_requires_out():
    assert run_cli("train", "--preset", "desk-g1") == 1


# ---------------------------------------------------------------------------
# analyze


@pytest.fixture(scope="module")
def finished_run(tmp_path_factory, tiny_run_config):
    out = tmp_path_factory.mktemp("runs") / "done"
    assert run_cli("train", "--config", str(tiny_run_config), "--out", str(out), "--no-figures") == 0
    return out


def test_analyze_exports_and_figures(finished_run, tmp_path):
    out = tmp_path / "report"
    assert run_cli("analyze", "--run", str(finished_run), "--out", str(out)) == 0
    assert (out / "ep_load.csv").exists()
    assert (out / "logit_ranks.json").exists()
    for name in ("loss_curves.png", "ep_load.png", "logit_ranks.png"):
        path = out / name
        assert path.exists() and path.stat().st_size > 1000


def test_analyze_savings_against_itself(finished_run, tmp_path):
    out = tmp_path / "selfcmp"
    code = run_cli(
        "analyze", "--run", str(finished_run), "--baseline", str(finished_run),
        "--out", str(out), "--no-figures",
    )
    assert code == 0
    report = json.loads((out / "savings_report.json").read_text())
    assert report["savings_pct"] == pytest.approx(0.0, abs=1e-9)


def test_analyze_savings_figure(finished_run, tmp_path):
    out = tmp_path / "withfig"
    assert run_cli("analyze", "--run", str(finished_run), "--baseline", str(finished_run), "--out", str(out)) == 0
    assert (out / "savings.png").stat().st_size > 1000


def test_analyze_missing_run_exits_1(tmp_path):
    assert run_cli("analyze", "--run", str(tmp_path / "missing")) == 1


# ---------------------------------------------------------------------------
# global behavior


def test_unknown_flag_exits_1():
    assert run_cli("plan", "--bogus-flag") == 1


def test_unknown_command_exits_1():
    assert run_cli("frobnicate") == 1


def test_precision_env_var(monkeypatch, capsys):
    import grainmoe.tensor as tt

    try:
        monkeypatch.setenv("GRAINMOE_PRECISION", "f64")
        assert run_cli("plan", "--preset", "11b-g1") == 0
        assert tt.DEFAULT_DTYPE == np.float64
        monkeypatch.setenv("GRAINMOE_PRECISION", "f16")
        assert run_cli("plan", "--preset", "11b-g1") == 1
    finally:
        tt.set_default_dtype("f32")
