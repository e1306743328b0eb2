"""Command-line interface: argument handling, config merging, exit codes,
resolved-config snapshots, and each subcommand run end to end at desk scale.

Exit-code contract: 0 success, 1 validation error (including unknown flags
and missing inputs), 2 runtime failure.
"""

import json

import pytest
import torch

torch.set_num_threads(1)

from triview import cli as cli_mod
from triview import experiments, geometry, nets, tasks, train

# Small enough to train in milliseconds; 32 px is the smallest size that
# survives the five pooling stages.
TINY_NET = ["--family", "vgg13", "--width", "16",
            "--embed-dim", "16", "--mlp-width", "16", "--no-dropout"]
SIZE = ["--size", "32"]


def run_cli(args):
    return cli_mod.main([str(a) for a in args])


# --------------------------------------------------------------------------
# shared artifacts (built through the CLI itself)
# --------------------------------------------------------------------------

@pytest.fixture(scope="module")
def archive_root(tmp_path_factory):
    root = tmp_path_factory.mktemp("archive")
    code = run_cli(["gen-models", "--group", "2", "--count", "4",
                    "--seed", "5", "--out", root])
    assert code == 0
    return root


@pytest.fixture(scope="module")
def t2i_bank(tmp_path_factory, archive_root):
    out = tmp_path_factory.mktemp("bank_t2i")
    code = run_cli(["gen-questions", "--models", archive_root, "--task", "t2i",
                    "--seed", "3", "--out", out] + SIZE)
    assert code == 0
    return out / "t2i"


@pytest.fixture(scope="module")
def i2p_bank(tmp_path_factory, archive_root):
    out = tmp_path_factory.mktemp("bank_i2p")
    code = run_cli(["gen-questions", "--models", archive_root, "--task", "i2p",
                    "--count", "2", "--seed", "3", "--out", out] + SIZE)
    assert code == 0
    return out / "i2p"


@pytest.fixture(scope="module")
def pretrained(tmp_path_factory, archive_root):
    out = tmp_path_factory.mktemp("pretrained")
    code = run_cli(["pretrain", "--models", archive_root, "--count", "3",
                    "--steps", "2", "--batch-size", "2", "--image-size", "32",
                    "--seed", "0", "--out", out] + TINY_NET)
    assert code == 0
    return out


@pytest.fixture(scope="module")
def finetuned(tmp_path_factory, t2i_bank):
    out = tmp_path_factory.mktemp("finetuned")
    code = run_cli(["finetune", "--bank", t2i_bank, "--epochs", "1",
                    "--learning-rate", "1e-4", "--batch-size", "2",
                    "--heldout-fraction", "0.25", "--seed", "0",
                    "--out", out] + TINY_NET)
    assert code == 0
    return out


# --------------------------------------------------------------------------
# argument handling and exit codes
# --------------------------------------------------------------------------

class TestArgumentHandling:
    def test_help_exits_zero(self, capsys):
        assert run_cli(["--help"]) == 0
        assert "gen-models" in capsys.readouterr().out

    def test_bare_invocation_prints_usage(self, capsys):
        code = run_cli([])
        captured = capsys.readouterr()
        assert code in (0, 1)
        assert "Usage" in captured.out + captured.err

    def test_unknown_flag_prints_usage_and_exits_1(self, capsys):
        code = run_cli(["gen-models", "--bogus", "1"])
        captured = capsys.readouterr()
        assert code == 1
        assert "Usage" in captured.err
        assert "bogus" in captured.err.lower()

    def test_missing_required_input_exits_1(self, capsys):
        assert run_cli(["gen-questions", "--task", "t2i", "--out", "x"]) == 1
        assert "--models" in capsys.readouterr().err

    def test_invalid_count_exits_1(self, tmp_path):
        assert run_cli(["gen-models", "--count", "0", "--out", tmp_path]) == 1

    def test_invalid_group_exits_1(self, tmp_path):
        assert run_cli(["gen-models", "--group", "pebble",
                        "--out", tmp_path]) == 1

    def test_unsupported_device_exits_1(self, tmp_path, capsys):
        code = run_cli(["gen-models", "--count", "1", "--device", "tpu",
                        "--out", tmp_path])
        assert code == 1
        assert "device" in capsys.readouterr().err


# --------------------------------------------------------------------------
# gen-models
# --------------------------------------------------------------------------

class TestGenModels:
    def test_count_contract(self, tmp_path, capsys):
        code = run_cli(["gen-models", "--group", "3-5", "--count", "10",
                        "--seed", "1", "--out", tmp_path])
        assert code == 0
        files = sorted((tmp_path / "models" / "3-5").glob("*.json.gz"))
        assert len(files) == 10
        assert "wrote 10 models" in capsys.readouterr().out

    def test_archive_contents(self, archive_root):
        models = geometry.read_model_archive(archive_root / "models" / "2")
        assert len(models) == 4
        assert [m.model_id for m in models] == [f"2/{i}" for i in range(4)]

    def test_snapshot_written(self, archive_root):
        snapshot = json.loads((archive_root / "gen-models-config.json").read_text())
        assert snapshot["command"] == "gen-models"
        assert snapshot["group"] == "2"
        assert snapshot["count"] == 4
        assert snapshot["seed"] == 5

    def test_identical_configs_byte_identical_outputs(self, tmp_path):
        args = ["gen-models", "--group", "2", "--count", "2", "--seed", "7"]
        assert run_cli(args + ["--out", tmp_path / "a"]) == 0
        assert run_cli(args + ["--out", tmp_path / "b"]) == 0
        for name in ("0.json.gz", "1.json.gz"):
            first = (tmp_path / "a" / "models" / "2" / name).read_bytes()
            second = (tmp_path / "b" / "models" / "2" / name).read_bytes()
            assert first == second


# --------------------------------------------------------------------------
# gen-questions
# --------------------------------------------------------------------------

class TestGenQuestions:
    def test_bank_readable(self, t2i_bank):
        bank = tasks.read_bank(t2i_bank)
        assert bank.task == "t2i"
        assert len(bank.questions) == 4
        assert bank.questions[0].F.pixels.shape == (32, 32, 3)

    def test_count_truncates(self, i2p_bank):
        assert len(tasks.read_bank(i2p_bank).questions) == 2

    def test_snapshot_next_to_outputs(self, t2i_bank):
        snapshot = json.loads(
            (t2i_bank.parent / "gen-questions-config.json").read_text())
        assert snapshot["task"] == "t2i"
        assert snapshot["size"] == 32

    def test_identical_configs_byte_identical_manifests(self, tmp_path,
                                                        archive_root):
        args = ["gen-questions", "--models", archive_root, "--task", "i2p",
                "--count", "2", "--seed", "11"] + SIZE
        assert run_cli(args + ["--out", tmp_path / "a"]) == 0
        assert run_cli(args + ["--out", tmp_path / "b"]) == 0
        first, second = tmp_path / "a" / "i2p", tmp_path / "b" / "i2p"
        assert (first / "manifest.json").read_bytes() == \
               (second / "manifest.json").read_bytes()
        images = sorted(p.name for p in (first / "images").iterdir())
        assert images == sorted(p.name for p in (second / "images").iterdir())
        for name in images:
            assert (first / "images" / name).read_bytes() == \
                   (second / "images" / name).read_bytes()


# --------------------------------------------------------------------------
# config file, env var, dry run
# --------------------------------------------------------------------------

class TestConfigResolution:
    def test_dry_run_prints_plan_without_side_effects(self, tmp_path, capsys):
        out = tmp_path / "never"
        code = run_cli(["gen-models", "--count", "2", "--dry-run", "--out", out])
        captured = capsys.readouterr()
        assert code == 0
        assert "plan: gen-models" in captured.out
        assert '"count": 2' in captured.out
        assert not out.exists()

    def test_toml_file_overrides_defaults(self, tmp_path):
        cfg = tmp_path / "run.toml"
        cfg.write_text('seed = 9\n[gen-models]\ngroup = "2"\ncount = 3\n')
        out = tmp_path / "out"
        assert run_cli(["gen-models", "--config", cfg, "--out", out]) == 0
        snapshot = json.loads((out / "gen-models-config.json").read_text())
        assert snapshot["seed"] == 9          # top-level key applied
        assert snapshot["count"] == 3         # [gen-models] table applied
        assert len(list((out / "models" / "2").glob("*.json.gz"))) == 3

    def test_flags_override_file(self, tmp_path):
        cfg = tmp_path / "run.toml"
        cfg.write_text('[gen-models]\ngroup = "2"\ncount = 3\n')
        out = tmp_path / "out"
        assert run_cli(["gen-models", "--config", cfg, "--count", "1",
                        "--out", out]) == 0
        snapshot = json.loads((out / "gen-models-config.json").read_text())
        assert snapshot["count"] == 1
        assert len(list((out / "models" / "2").glob("*.json.gz"))) == 1

    def test_json_config_file(self, tmp_path):
        cfg = tmp_path / "run.json"
        cfg.write_text(json.dumps({"gen-models": {"group": "2", "count": 1}}))
        out = tmp_path / "out"
        assert run_cli(["gen-models", "--config", cfg, "--out", out]) == 0
        assert len(list((out / "models" / "2").glob("*.json.gz"))) == 1

    def test_unknown_key_in_command_table_exits_1(self, tmp_path, capsys):
        cfg = tmp_path / "run.toml"
        cfg.write_text("[gen-models]\nbogus = 1\n")
        assert run_cli(["gen-models", "--config", cfg, "--out", tmp_path]) == 1
        assert "unknown config key" in capsys.readouterr().err

    def test_unrecognized_top_level_keys_ignored(self, tmp_path):
        cfg = tmp_path / "run.toml"
        cfg.write_text('steps = 99\n[gen-models]\ngroup = "2"\ncount = 1\n')
        out = tmp_path / "out"
        assert run_cli(["gen-models", "--config", cfg, "--out", out]) == 0
        snapshot = json.loads((out / "gen-models-config.json").read_text())
        assert "steps" not in snapshot

    def test_missing_config_file_exits_1(self, tmp_path):
        assert run_cli(["gen-models", "--config", tmp_path / "no.toml",
                        "--out", tmp_path]) == 1

    def test_env_var_supplies_default_out(self, tmp_path, monkeypatch):
        monkeypatch.setenv(cli_mod.OUT_ENV, str(tmp_path / "envroot"))
        assert run_cli(["gen-models", "--group", "2", "--count", "1",
                        "--seed", "2"]) == 0
        made = tmp_path / "envroot" / "models" / "2"
        assert len(list(made.glob("*.json.gz"))) == 1


# --------------------------------------------------------------------------
# pretrain / direct-eval
# --------------------------------------------------------------------------

class TestPretrainAndDirectEval:
    def test_pretrain_outputs(self, pretrained):
        bundle = nets.read_bundle(pretrained / "pretrained.zip")
        assert bundle.header["fingerprint"]["head"] == "contrastive"
        assert bundle.header["fingerprint"]["backbone"]["family"] == "vgg13"
        curve = (pretrained / "loss_curve.csv").read_text().strip().splitlines()
        assert curve[0] == "step,loss"
        assert len(curve) == 3  # header + 2 steps
        assert (pretrained / "pretrain-config.json").is_file()

    def test_direct_eval_prints_accuracy_line(self, pretrained, t2i_bank,
                                              tmp_path, capsys):
        code = run_cli(["direct-eval", "--bundle", pretrained / "pretrained.zip",
                        "--bank", t2i_bank, "--out", tmp_path])
        captured = capsys.readouterr()
        assert code == 0
        line = captured.out.strip().splitlines()[-1]
        assert line.startswith("accuracy=")
        assert 0.0 <= float(line.split("=", 1)[1]) <= 1.0
        record = json.loads((tmp_path / "direct_eval.json").read_text())
        assert record["questions"] == 4

    def test_direct_eval_json_mode(self, pretrained, t2i_bank, tmp_path,
                                   capsys):
        code = run_cli(["direct-eval", "--bundle", pretrained / "pretrained.zip",
                        "--bank", t2i_bank, "--json", "--out", tmp_path])
        captured = capsys.readouterr()
        assert code == 0
        record = json.loads(captured.out.strip().splitlines()[-1])
        assert set(record) == {"accuracy", "task", "questions"}
        assert record["task"] == "t2i"

    def test_direct_eval_rejects_non_t2i_bank(self, pretrained, i2p_bank,
                                              tmp_path):
        assert run_cli(["direct-eval", "--bundle",
                        pretrained / "pretrained.zip", "--bank", i2p_bank,
                        "--out", tmp_path]) == 1

    def test_direct_eval_missing_bundle_exits_1(self, t2i_bank, tmp_path):
        assert run_cli(["direct-eval", "--bundle", tmp_path / "no.zip",
                        "--bank", t2i_bank, "--out", tmp_path]) == 1


# --------------------------------------------------------------------------
# finetune / evaluate
# --------------------------------------------------------------------------

class TestFinetuneAndEvaluate:
    def test_finetune_outputs(self, finetuned):
        report = train.report_from_json(finetuned / "report.json")
        assert report.task == "t2i"
        assert 0.0 <= report.accuracy <= 1.0
        log = train.read_training_log(finetuned / "train_log.csv")
        assert [row[0] for row in log] == [0, 1]
        bundle = nets.read_bundle(finetuned / "finetuned.zip")
        assert bundle.header["fingerprint"]["head"] == "t2i_binary"
        assert (finetuned / "finetune-config.json").is_file()

    def test_evaluate_prints_accuracy_line(self, finetuned, t2i_bank,
                                           tmp_path, capsys):
        code = run_cli(["evaluate", "--bundle", finetuned / "finetuned.zip",
                        "--bank", t2i_bank, "--out", tmp_path])
        captured = capsys.readouterr()
        assert code == 0
        line = captured.out.strip().splitlines()[-1]
        assert line.startswith("accuracy=")
        assert (tmp_path / "report.json").is_file()

    def test_evaluate_json_mode(self, finetuned, t2i_bank, tmp_path, capsys):
        code = run_cli(["evaluate", "--bundle", finetuned / "finetuned.zip",
                        "--bank", t2i_bank, "--json", "--out", tmp_path])
        captured = capsys.readouterr()
        assert code == 0
        record = json.loads(captured.out)
        assert len(record["predictions"]) == 4

    def test_evaluate_head_task_mismatch_exits_1(self, finetuned, i2p_bank,
                                                 tmp_path):
        assert run_cli(["evaluate", "--bundle", finetuned / "finetuned.zip",
                        "--bank", i2p_bank, "--out", tmp_path]) == 1

    def test_evaluate_rejects_contrastive_bundle(self, pretrained, t2i_bank,
                                                 tmp_path):
        assert run_cli(["evaluate", "--bundle", pretrained / "pretrained.zip",
                        "--bank", t2i_bank, "--out", tmp_path]) == 1


# --------------------------------------------------------------------------
# sweep
# --------------------------------------------------------------------------

def write_sweep_spec(path):
    path.write_text(json.dumps({
        "axis": "structure", "levels": ["scratch+early"], "tasks": ["i2p"],
        "train_models": 3, "test_models": 2, "model_group": "2", "seed": 0,
        "epochs": 0, "image_size": 32, "heldout_fraction": 0.5, "runs": 1,
        "backbone_family": "vgg13", "width_last": 16,
        "embed_dim": 16, "mlp_width": 16, "use_dropout": False,
    }))
    return path


class TestSweep:
    def test_missing_spec_exits_1(self, tmp_path):
        assert run_cli(["sweep", "--spec", tmp_path / "missing.json",
                        "--out", tmp_path]) == 1

    def test_sweep_runs_and_resumes(self, tmp_path, capsys):
        spec = write_sweep_spec(tmp_path / "sweep.json")
        out = tmp_path / "out"
        assert run_cli(["sweep", "--spec", spec, "--out", out]) == 0
        first = capsys.readouterr().out
        assert "1 cells trained, 0 reused, 0 failed" in first
        assert (out / "report.csv").is_file()
        assert (out / "cells" / "scratch+early" / "i2p.json").is_file()
        report = experiments.report_from_json(out / "report.json")
        assert 0.0 <= report.accuracy("scratch+early", "i2p") <= 1.0
        # a completed sweep resumes without training anything
        assert run_cli(["sweep", "--spec", spec, "--out", out]) == 0
        assert "0 cells trained, 1 reused" in capsys.readouterr().out

    def test_sweep_dry_run_lists_cells(self, tmp_path, capsys):
        spec = write_sweep_spec(tmp_path / "sweep.json")
        out = tmp_path / "out"
        code = run_cli(["sweep", "--spec", spec, "--dry-run", "--out", out])
        captured = capsys.readouterr()
        assert code == 0
        assert "plan: sweep" in captured.out
        assert '"done": false' in captured.out
        assert not out.exists()

    def test_sweep_runtime_failure_exits_2(self, tmp_path, monkeypatch,
                                           capsys):
        spec = write_sweep_spec(tmp_path / "sweep.json")

        def boom(spec, out_dir):
            raise RuntimeError("cell exploded")

        monkeypatch.setattr(experiments, "run_sweep", boom)
        code = run_cli(["sweep", "--spec", spec, "--out", tmp_path / "out"])
        assert code == 2
        assert "runtime failure" in capsys.readouterr().err


# --------------------------------------------------------------------------
# attention
# --------------------------------------------------------------------------

class TestAttention:
    def test_panel_written(self, pretrained, t2i_bank, tmp_path, capsys):
        code = run_cli(["attention", "--bundle", pretrained / "pretrained.zip",
                        "--bank", t2i_bank, "--question", "0",
                        "--layer", "conv1", "--out", tmp_path])
        captured = capsys.readouterr()
        assert code == 0
        panel = tmp_path / "attn_t2i_q0.png"
        assert str(panel) in captured.out
        assert panel.stat().st_size > 1000
        assert (tmp_path / "attention-config.json").is_file()

    def test_unknown_layer_exits_1(self, pretrained, t2i_bank, tmp_path,
                                   capsys):
        code = run_cli(["attention", "--bundle", pretrained / "pretrained.zip",
                        "--bank", t2i_bank, "--layer", "conv99",
                        "--out", tmp_path])
        assert code == 1
        assert "conv0" in capsys.readouterr().err

    def test_question_index_out_of_range_exits_1(self, pretrained, t2i_bank,
                                                 tmp_path):
        assert run_cli(["attention", "--bundle",
                        pretrained / "pretrained.zip", "--bank", t2i_bank,
                        "--question", "99", "--out", tmp_path]) == 1
