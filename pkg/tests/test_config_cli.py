"""Config parsing and CLI contract tests (exit codes, file outputs,
override precedence)."""

import json
import os
from pathlib import Path

import numpy as np
import pytest

from mlvicx.cli import main
from mlvicx.config import (
    ConfigError,
    RunConfig,
    apply_overrides,
    config_hash,
    load_config,
    parse_config_text,
    resolved_text,
)

TINY = {
    "model.channels": "4,8",
    "model.blocks": "1,1",
    "model.strides": "1,2",
    "model.taps": "0,1",
    "model.image_size": "16",
    "model.head_width": "8",
    "data.phantom_count": "24",
    "data.phantom_size": "16",
    "train.epochs": "1",
    "train.batch_size": "8",
    "eval.epochs": "3",
    "eval.fraction": "1.0",
}


def tiny_config_file(tmp_path: Path) -> Path:
    path = tmp_path / "config.txt"
    path.write_text("".join(f"{k}={v}\n" for k, v in TINY.items()))
    return path


class TestConfig:
    def test_defaults_round_trip(self):
        cfg = RunConfig()
        text = resolved_text(cfg)
        again = parse_config_text(text)
        assert resolved_text(again) == text

    def test_unknown_key_rejected(self):
        with pytest.raises(ConfigError, match="unknown config key"):
            parse_config_text("loss.nonsense=1\n")

    def test_unknown_section_rejected(self):
        with pytest.raises(ConfigError, match="unknown config section"):
            parse_config_text("nothing.here=1\n")

    def test_bad_value_type_rejected(self):
        with pytest.raises(ConfigError, match="expected an integer"):
            parse_config_text("train.epochs=soon\n")

    def test_duplicate_key_rejected(self):
        with pytest.raises(ConfigError, match="duplicate"):
            parse_config_text("loss.alpha=1\nloss.alpha=2\n")

    def test_comments_and_blanks_ignored(self):
        cfg = parse_config_text("# a comment\n\nloss.alpha=3.5\n")
        assert cfg.loss.alpha == 3.5

    def test_overrides_win_over_file(self, tmp_path):
        path = tiny_config_file(tmp_path)
        cfg = load_config(path, {"train.epochs": "7"})
        assert cfg.train.epochs == 7

    def test_hash_stable_and_epoch_free(self):
        a = RunConfig()
        b = apply_overrides(a, {"train.epochs": "999"})
        c = apply_overrides(a, {"loss.alpha": "9"})
        assert config_hash(a) == config_hash(b)
        assert config_hash(a) != config_hash(c)

    def test_boolean_parsing(self):
        cfg = parse_config_text("train.deterministic=false\n")
        assert cfg.train.deterministic is False

    def test_views_reconstruct_types(self):
        cfg = apply_overrides(RunConfig(), TINY)
        assert cfg.encoder_config().channels == (4, 8)
        assert cfg.vic_weights().beta == 25.0
        assert cfg.augment_policy().out_size == 16
        assert cfg.phantom_spec().image_size == 16


class TestCliPretrain:
    def test_run_directory_contents_and_exit_code(self, tmp_path):
        cfg = tiny_config_file(tmp_path)
        out = tmp_path / "run"
        code = main(["pretrain", "--config", str(cfg), "--out", str(out)])
        assert code == 0
        assert (out / "config.resolved").exists()
        assert (out / "metrics.jsonl").exists()
        assert (out / "checkpoints" / "final.mlvx").exists()
        record = json.loads((out / "metrics.jsonl").read_text().splitlines()[0])
        expected_keys = {"epoch", "step", "total", "l_g", "l_l", "inv_g", "var_g", "cov_g",
                         "inv_l", "var_l", "cov_l", "z_std_mean", "m_std_mean",
                         "z_cov_offdiag_mean", "m_cov_offdiag_mean", "wall_time", "seed"}
        assert set(record) == expected_keys

    def test_dotted_override_lands_in_resolved_config(self, tmp_path):
        cfg = tiny_config_file(tmp_path)
        out = tmp_path / "run"
        code = main(["pretrain", "--config", str(cfg), "--out", str(out),
                     "--train.epochs=2"])
        assert code == 0
        assert "train.epochs=2" in (out / "config.resolved").read_text()

    def test_rerun_refused_without_force(self, tmp_path):
        cfg = tiny_config_file(tmp_path)
        out = tmp_path / "run"
        assert main(["pretrain", "--config", str(cfg), "--out", str(out)]) == 0
        assert main(["pretrain", "--config", str(cfg), "--out", str(out)]) == 2
        assert main(["pretrain", "--config", str(cfg), "--out", str(out), "--force"]) == 0

    def test_missing_config_file_is_usage_error(self, tmp_path):
        code = main(["pretrain", "--config", str(tmp_path / "nope.txt"),
                     "--out", str(tmp_path / "run")])
        assert code in (1, 2)  # surfaced as an error, not a crash

    def test_env_seed_used_as_fallback(self, tmp_path, monkeypatch):
        cfg = tiny_config_file(tmp_path)
        out = tmp_path / "run"
        monkeypatch.setenv("MLVICX_SEED", "777")
        assert main(["pretrain", "--config", str(cfg), "--out", str(out)]) == 0
        assert "train.seed=777" in (out / "config.resolved").read_text()

    def test_explicit_seed_beats_env(self, tmp_path, monkeypatch):
        cfg = tiny_config_file(tmp_path)
        out = tmp_path / "run"
        monkeypatch.setenv("MLVICX_SEED", "777")
        assert main(["pretrain", "--config", str(cfg), "--out", str(out),
                     "--train.seed=3"]) == 0
        assert "train.seed=3" in (out / "config.resolved").read_text()

    def test_resume_via_cli(self, tmp_path):
        cfg = tiny_config_file(tmp_path)
        first = tmp_path / "first"
        assert main(["pretrain", "--config", str(cfg), "--out", str(first)]) == 0
        ckpt = first / "checkpoints" / "final.mlvx"
        second = tmp_path / "second"
        code = main(["pretrain", "--config", str(cfg), "--out", str(second),
                     "--resume", str(ckpt), "--train.epochs=2"])
        assert code == 0
        lines = (second / "metrics.jsonl").read_text().splitlines()
        assert len(lines) == 1  # epochs 1..2 resumed from epoch 1

    def test_resume_config_mismatch_fails_without_force(self, tmp_path):
        cfg = tiny_config_file(tmp_path)
        first = tmp_path / "first"
        assert main(["pretrain", "--config", str(cfg), "--out", str(first)]) == 0
        ckpt = first / "checkpoints" / "final.mlvx"
        code = main(["pretrain", "--config", str(cfg), "--out", str(tmp_path / "x"),
                     "--resume", str(ckpt), "--loss.alpha=9"])
        assert code == 1
        code = main(["pretrain", "--config", str(cfg), "--out", str(tmp_path / "y"),
                     "--resume", str(ckpt), "--loss.alpha=9", "--force"])
        assert code == 0


class TestCliProbeAndDiagnose:
    @pytest.fixture()
    def pretrained(self, tmp_path):
        cfg = tiny_config_file(tmp_path)
        out = tmp_path / "run"
        assert main(["pretrain", "--config", str(cfg), "--out", str(out)]) == 0
        return cfg, out / "checkpoints" / "final.mlvx"

    def test_probe_report_fields(self, tmp_path, pretrained):
        cfg, ckpt = pretrained
        report_path = tmp_path / "report.json"
        code = main(["probe", "--checkpoint", str(ckpt), "--config", str(cfg),
                     "--mode", "frozen", "--fraction", "1.0", "--out", str(report_path)])
        assert code == 0
        report = json.loads(report_path.read_text())
        assert report["mode"] == "frozen"
        assert report["fraction"] == 1.0
        assert report["encoder_hash_before"] == report["encoder_hash_after"]
        assert set(report) == {"mode", "fraction", "auc_test", "val_auc_trace", "best_epoch",
                               "encoder_hash_before", "encoder_hash_after", "seed", "n_train"}

    def test_probe_bad_checkpoint_is_runtime_error(self, tmp_path, pretrained):
        cfg, _ = pretrained
        bad = tmp_path / "bad.mlvx"
        bad.write_bytes(b"UH-OH")
        code = main(["probe", "--checkpoint", str(bad), "--config", str(cfg)])
        assert code == 1

    def test_diagnose_report(self, tmp_path, pretrained):
        cfg, ckpt = pretrained
        out = tmp_path / "diag.json"
        code = main(["diagnose", "--checkpoint", str(ckpt), "--config", str(cfg),
                     "--out", str(out)])
        assert code == 0
        payload = json.loads(out.read_text())
        assert payload["r"] == 8  # head width from the tiny config
        assert set(payload["z"]) == {"r", "per_dim_std", "std_mean", "std_min",
                                     "cov_offdiag_mean", "collapsed"}


class TestCliGradcheckAndGenData:
    def test_gradcheck_scope_dense_passes(self, capsys):
        code = main(["gradcheck", "--scope", "dense"])
        out = capsys.readouterr().out
        assert code == 0
        assert "dense" in out and "1/1 passed" in out

    def test_gradcheck_tolerance_override(self, capsys):
        code = main(["gradcheck", "--scope", "dense", "--tolerance", "1e-12"])
        assert code == 1  # float32 noise cannot meet an impossible tolerance

    def test_gen_data_writes_pgms_and_labels(self, tmp_path):
        out = tmp_path / "data"
        code = main(["gen-data", "--out", str(out), "--count", "10", "--seed", "4",
                     "--size", "16"])
        assert code == 0
        pgms = sorted(out.glob("*.pgm"))
        assert len(pgms) == 10
        lines = (out / "labels.csv").read_text().splitlines()
        assert lines[0] == "filename,label"
        assert len(lines) == 11

    def test_gen_data_deterministic_bytes(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        main(["gen-data", "--out", str(a), "--count", "5", "--seed", "9", "--size", "16"])
        main(["gen-data", "--out", str(b), "--count", "5", "--seed", "9", "--size", "16"])
        for fa, fb in zip(sorted(a.iterdir()), sorted(b.iterdir())):
            assert fa.read_bytes() == fb.read_bytes()

    def test_gen_data_lesion_p_zero_all_negative(self, tmp_path):
        out = tmp_path / "data"
        main(["gen-data", "--out", str(out), "--count", "8", "--seed", "1",
              "--size", "16", "--lesion-p", "0"])
        rows = (out / "labels.csv").read_text().splitlines()[1:]
        assert all(row.endswith(",0") for row in rows)

    def test_ablate_writes_table(self, tmp_path):
        cfg = tiny_config_file(tmp_path)
        out = tmp_path / "ablation.json"
        code = main(["ablate", "--config", str(cfg), "--seeds", "0",
                     "--modes", "frozen", "--out", str(out)])
        assert code == 0
        table = json.loads(out.read_text())
        assert set(table["cells"]) == {"global_only", "local_only", "combined"}
