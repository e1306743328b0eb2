"""Single command-line entry point driving every pipeline stage.

Subcommands: gen-models, gen-questions, pretrain, finetune, evaluate,
direct-eval, sweep, attention.  Each resolves its configuration as
defaults < config file (TOML or JSON) < flags, writes a resolved-config
snapshot next to its outputs, and exits 0 on success, 1 on a validation
error (including unknown flags), 2 on a runtime failure.  ``--dry-run``
validates and prints the execution plan without touching the filesystem.
The ``TRIVIEW_OUT`` environment variable supplies the default output root.
"""

from __future__ import annotations

import json
import os
import sys
from pathlib import Path

import click

from . import contrast, experiments, geometry, nets, render, tasks, train, viz
from .seeding import substream

try:  # stdlib from 3.11; the tomli backport elsewhere
    import tomllib
except ModuleNotFoundError:  # pragma: no cover - depends on interpreter
    import tomli as tomllib

OUT_ENV = "TRIVIEW_OUT"
DEVICES = ("cpu",)


class CliError(Exception):
    """Invalid configuration or inputs; maps to exit code 1."""


# --------------------------------------------------------------------------
# config resolution: defaults < file (top level, then [command] table) < flags
# --------------------------------------------------------------------------

def _load_config_file(path) -> dict:
    p = Path(path)
    if not p.is_file():
        raise CliError(f"config file not found: {p}")
    if p.suffix == ".toml":
        with open(p, "rb") as fh:
            return tomllib.load(fh)
    if p.suffix == ".json":
        try:
            data = json.loads(p.read_text())
        except json.JSONDecodeError as e:
            raise CliError(f"invalid JSON config {p}: {e}") from e
        if not isinstance(data, dict):
            raise CliError(f"config file {p} must hold a table/object")
        return data
    raise CliError(f"config file must be .toml or .json, got {p.name!r}")


def resolve_config(command: str, defaults: dict, flags: dict,
                   config_path=None) -> dict:
    """Merge one command's configuration.  Top-level file keys the command
    recognises apply to it (shared files list several commands' tables);
    keys inside the [command] table must all be recognised."""
    cfg = dict(defaults)
    cfg.setdefault("out", os.environ.get(OUT_ENV, "."))
    cfg.setdefault("device", "cpu")
    if config_path is not None:
        data = _load_config_file(config_path)
        table = data.pop(command, {})
        if not isinstance(table, dict):
            raise CliError(f"config section {command!r} must be a table")
        for key, value in data.items():
            key = key.replace("-", "_")
            if key in cfg and not isinstance(value, dict):
                cfg[key] = value
        for key, value in table.items():
            key = key.replace("-", "_")
            if key not in cfg:
                raise CliError(f"unknown config key {key!r} for {command}")
            cfg[key] = value
    for key, value in flags.items():
        if value is not None:
            cfg[key] = value
    if cfg["device"] not in DEVICES:
        raise CliError(f"unsupported device {cfg['device']!r}; "
                       f"this build executes on {', '.join(DEVICES)}")
    return cfg


def _begin_run(command: str, cfg: dict, dry_run: bool) -> Path | None:
    """Print the plan and stop (dry run), or create the output directory and
    write the resolved-config snapshot beside the outputs to come."""
    if dry_run:
        click.echo(f"plan: {command}")
        click.echo(json.dumps(cfg, indent=2, sort_keys=True, default=str))
        return None
    out_dir = Path(cfg["out"])
    out_dir.mkdir(parents=True, exist_ok=True)
    snapshot = out_dir / f"{command}-config.json"
    snapshot.write_text(json.dumps({"command": command, **cfg},
                                   indent=2, sort_keys=True, default=str))
    return out_dir


# --------------------------------------------------------------------------
# shared option groups
# --------------------------------------------------------------------------

def common_options(f):
    opts = [
        click.option("--config", "config_path", default=None, metavar="FILE",
                     help="TOML or JSON config file (defaults < file < flags)."),
        click.option("--out", default=None, metavar="DIR",
                     help=f"Output directory (default ${OUT_ENV} or '.')."),
        click.option("--device", default=None,
                     help="Execution device (cpu)."),
        click.option("--dry-run", is_flag=True, default=False,
                     help="Validate and print the plan; write nothing."),
    ]
    for opt in reversed(opts):
        f = opt(f)
    return f


def network_options(f):
    opts = [
        click.option("--family", default=None,
                     type=click.Choice(sorted(nets.FAMILIES))),
        click.option("--width", default=None, type=int,
                     help="Channels of the last conv stage."),
        click.option("--embed-dim", default=None, type=int,
                     help="Pair-embedding width of the scoring head."),
        click.option("--mlp-width", default=None, type=int,
                     help="Hidden width of the classifier MLPs."),
        click.option("--no-pooling", "use_pooling", flag_value=False,
                     default=None, help="Drop the adaptive 6x6 pooling stage."),
        click.option("--no-dropout", "use_dropout", flag_value=False,
                     default=None, help="Drop the classifier dropout layers."),
        click.option("--share-weights", is_flag=True, default=None,
                     help="One backbone shared by all late-fusion branches."),
        click.option("--separate-fc", is_flag=True, default=None,
                     help="Per-branch classifier stacks (late i2p/p2i)."),
    ]
    for opt in reversed(opts):
        f = opt(f)
    return f


NETWORK_DEFAULTS = {
    "family": "vgg16", "width": 512, "embed_dim": 4096, "mlp_width": 4096,
    "use_pooling": True, "use_dropout": True,
    "share_weights": False, "separate_fc": False,
}


def _network_spec(cfg: dict, fusion: str, head: str) -> nets.NetworkSpec:
    backbone = nets.BackboneSpec(
        family=cfg["family"], width_last=cfg["width"],
        in_channels=12 if fusion == "early" else 3,
        use_pooling=cfg["use_pooling"], use_dropout=cfg["use_dropout"])
    return nets.NetworkSpec(
        backbone=backbone, fusion=fusion, head=head,
        share_weights=cfg["share_weights"], separate_fc=cfg["separate_fc"],
        embed_dim=cfg["embed_dim"], mlp_width=cfg["mlp_width"])


# --------------------------------------------------------------------------
# input loading helpers
# --------------------------------------------------------------------------

def _models_dir(models_path, group) -> Path:
    root = Path(models_path)
    if not root.exists():
        raise CliError(f"models path not found: {root}")
    archive = root / "models" if (root / "models").is_dir() else root
    if group:
        d = archive / group
        if not d.is_dir():
            raise CliError(f"no model group {group!r} under {archive}")
        return d
    if any(archive.glob("*.json.gz")):
        return archive
    groups = sorted(p for p in archive.iterdir() if p.is_dir())
    if len(groups) == 1:
        return groups[0]
    raise CliError(f"{archive} holds {len(groups)} model groups; pass --group")


def _read_models(models_path, group, count):
    models = geometry.read_model_archive(_models_dir(models_path, group))
    if not models:
        raise CliError(f"no model files under {_models_dir(models_path, group)}")
    if count is not None:
        if count < 1:
            raise CliError("count must be >= 1")
        if count > len(models):
            raise CliError(f"asked for {count} models, archive holds {len(models)}")
        models = models[:count]
    return models


def _read_bank(path) -> tasks.QuestionBank:
    p = Path(path)
    if not (p / "manifest.json").is_file():
        raise CliError(f"no question bank at {p} (missing manifest.json)")
    return tasks.read_bank(p)


def _read_bundle(path) -> nets.ParamBundle:
    p = Path(path)
    if not p.is_file():
        raise CliError(f"parameter bundle not found: {p}")
    return nets.read_bundle(p)


def _network_from_bundle(bundle: nets.ParamBundle):
    spec = nets.spec_from_fingerprint(bundle.header["fingerprint"])
    net = nets.build_network(spec)
    nets.load_bundle(net, bundle)
    return net


# --------------------------------------------------------------------------
# the command group
# --------------------------------------------------------------------------

@click.group(name="triview")
def cli():
    """Synthesize CSG line-drawing datasets, build spatial-reasoning question
    banks, train and evaluate multi-view networks, run controlled sweeps, and
    render attention panels."""


@cli.command("gen-models")
@common_options
@click.option("--group", default=None, metavar="GROUP",
              help="Complexity group: '3-5' or a literal primitive count.")
@click.option("--count", default=None, type=int, help="Models to generate.")
@click.option("--seed", default=None, type=int)
@click.option("--continuous-rotation", "continuous_rotation",
              is_flag=True, default=None,
              help="Sample rotations continuously instead of 90-degree steps.")
def gen_models_cmd(config_path, dry_run, **flags):
    """Generate CSG models into <out>/models/<group>/."""
    cfg = resolve_config("gen-models",
                         {"group": "3-5", "count": 10, "seed": 0,
                          "continuous_rotation": False},
                         flags, config_path)
    if cfg["count"] < 1:
        raise CliError("count must be >= 1")
    if cfg["group"] != "3-5":
        try:
            if int(cfg["group"]) < 1:
                raise ValueError
        except ValueError:
            raise CliError(f"group must be '3-5' or a positive count, "
                           f"got {cfg['group']!r}") from None
    out_dir = _begin_run("gen-models", cfg, dry_run)
    if out_dir is None:
        return
    group, seed = str(cfg["group"]), int(cfg["seed"])
    models = []
    for i in range(int(cfg["count"])):
        rng = substream(seed, "gen-models", group, str(i))
        n = geometry.sample_group_count(rng, group)
        model = geometry.generate_model(
            rng, n, continuous_rotation=bool(cfg["continuous_rotation"]))
        model.model_id = f"{group}/{i}"
        models.append(model)
    paths = geometry.write_model_archive(models, out_dir, group)
    click.echo(f"wrote {len(paths)} models to {out_dir / 'models' / group}")


@cli.command("gen-questions")
@common_options
@click.option("--models", "models_path", default=None, metavar="DIR",
              help="Model archive root (or one group directory).")
@click.option("--group", default=None, help="Model group inside the archive.")
@click.option("--task", default=None, type=click.Choice(tasks.TASKS))
@click.option("--count", default=None, type=int,
              help="Use only the first COUNT models.")
@click.option("--size", default=None, type=int, help="Drawing size in pixels.")
@click.option("--seed", default=None, type=int)
def gen_questions_cmd(config_path, dry_run, **flags):
    """Build a question bank (one question per model) into <out>/<task>/."""
    cfg = resolve_config("gen-questions",
                         {"models_path": None, "group": None, "task": "t2i",
                          "count": None, "size": render.IMAGE_SIZE, "seed": 0},
                         flags, config_path)
    if cfg["models_path"] is None:
        raise CliError("--models is required")
    if cfg["task"] not in tasks.TASKS:
        raise CliError(f"unknown task {cfg['task']!r}")
    models = _read_models(cfg["models_path"], cfg["group"], cfg["count"])
    out_dir = _begin_run("gen-questions", cfg, dry_run)
    if out_dir is None:
        return
    bank = tasks.build_bank(models, cfg["task"], int(cfg["seed"]),
                            size=int(cfg["size"]))
    task_dir = tasks.write_bank(bank, out_dir)
    click.echo(f"wrote {len(bank.questions)} {bank.task} questions to {task_dir}")


@cli.command("pretrain")
@common_options
@network_options
@click.option("--models", "models_path", default=None, metavar="DIR",
              help="Model archive root (or one group directory).")
@click.option("--group", default=None)
@click.option("--count", default=None, type=int)
@click.option("--steps", default=None, type=int)
@click.option("--learning-rate", "--lr", "learning_rate", default=None, type=float)
@click.option("--batch-size", default=None, type=int)
@click.option("--image-size", default=None, type=int)
@click.option("--pair-variants", default=None, type=int,
              help="Distinct augmented pairs per source model.")
@click.option("--init", default=None, metavar="BUNDLE",
              help="Warm-start from a parameter bundle.")
@click.option("--seed", default=None, type=int)
def pretrain_cmd(config_path, dry_run, **flags):
    """Contrastively pre-train the pair scorer on rendered view pairs."""
    defaults = {"models_path": None, "group": None, "count": None,
                "steps": 1000, "learning_rate": 5e-5, "batch_size": 4,
                "image_size": render.IMAGE_SIZE, "pair_variants": 1,
                "init": "random", "seed": 0, **NETWORK_DEFAULTS}
    cfg = resolve_config("pretrain", defaults, flags, config_path)
    if cfg["models_path"] is None:
        raise CliError("--models is required")
    spec = _network_spec(cfg, fusion="late", head="contrastive")
    models = _read_models(cfg["models_path"], cfg["group"], cfg["count"])
    config = contrast.PretrainConfig(
        learning_rate=float(cfg["learning_rate"]),
        batch_size=int(cfg["batch_size"]), steps=int(cfg["steps"]),
        seed=int(cfg["seed"]), init=str(cfg["init"]), network=spec,
        image_size=int(cfg["image_size"]),
        pair_variants=int(cfg["pair_variants"]))
    out_dir = _begin_run("pretrain", cfg, dry_run)
    if out_dir is None:
        return
    bundle, curve = contrast.pretrain(models, config)
    bundle_path = out_dir / "pretrained.zip"
    nets.write_bundle(bundle, bundle_path)
    contrast.write_loss_curve(curve, out_dir / "loss_curve.csv")
    click.echo(f"pretrained {len(models)} models for {len(curve)} steps; "
               f"final loss {curve[-1]:.6f}")
    click.echo(f"bundle: {bundle_path}")


@cli.command("finetune")
@common_options
@network_options
@click.option("--bank", "bank_path", default=None, metavar="DIR",
              help="Question bank directory (the one holding manifest.json).")
@click.option("--fusion", default=None, type=click.Choice(sorted(nets.FUSIONS)))
@click.option("--learning-rate", "--lr", "learning_rate", default=None, type=float)
@click.option("--batch-size", default=None, type=int)
@click.option("--epochs", default=None, type=int)
@click.option("--heldout-fraction", default=None, type=float)
@click.option("--runs", default=None, type=int,
              help="Train RUNS seeds and keep the best held-out report.")
@click.option("--init", default=None, metavar="BUNDLE",
              help="Warm-start from a parameter bundle.")
@click.option("--seed", default=None, type=int)
def finetune_cmd(config_path, dry_run, **flags):
    """Supervise-train a network on a question bank."""
    defaults = {"bank_path": None, "fusion": "late", "learning_rate": 1e-5,
                "batch_size": None, "epochs": 10, "heldout_fraction": 0.1,
                "runs": 1, "init": "random", "seed": 0, **NETWORK_DEFAULTS}
    cfg = resolve_config("finetune", defaults, flags, config_path)
    if cfg["bank_path"] is None:
        raise CliError("--bank is required")
    bank = _read_bank(cfg["bank_path"])
    spec = _network_spec(cfg, fusion=cfg["fusion"],
                         head=train.TASK_HEADS[bank.task])
    config = train.TrainConfig(
        task=bank.task, fusion=cfg["fusion"],
        learning_rate=float(cfg["learning_rate"]),
        batch_size=None if cfg["batch_size"] is None else int(cfg["batch_size"]),
        epochs=int(cfg["epochs"]), seed=int(cfg["seed"]),
        init=str(cfg["init"]), network=spec,
        heldout_fraction=float(cfg["heldout_fraction"]), runs=int(cfg["runs"]))
    out_dir = _begin_run("finetune", cfg, dry_run)
    if out_dir is None:
        return
    net, report = train.finetune(bank, config,
                                 log_path=out_dir / "train_log.csv")
    bundle_path = out_dir / "finetuned.zip"
    nets.write_bundle(nets.save_bundle(net), bundle_path)
    (out_dir / "report.json").write_text(report.to_json())
    click.echo(f"held-out accuracy {report.accuracy:.6f} "
               f"on {len(report.predictions)} questions")
    click.echo(f"bundle: {bundle_path}")


@cli.command("evaluate")
@common_options
@click.option("--bank", "bank_path", default=None, metavar="DIR")
@click.option("--bundle", "bundle_path", default=None, metavar="FILE")
@click.option("--json", "as_json", is_flag=True, default=False,
              help="Print the full report as JSON.")
def evaluate_cmd(config_path, dry_run, as_json, **flags):
    """Score a trained network (from its bundle) on a question bank."""
    cfg = resolve_config("evaluate", {"bank_path": None, "bundle_path": None},
                         flags, config_path)
    if cfg["bank_path"] is None or cfg["bundle_path"] is None:
        raise CliError("--bank and --bundle are required")
    bank = _read_bank(cfg["bank_path"])
    bundle = _read_bundle(cfg["bundle_path"])
    out_dir = _begin_run("evaluate", cfg, dry_run)
    if out_dir is None:
        return
    report = train.evaluate(_network_from_bundle(bundle), bank)
    (out_dir / "report.json").write_text(report.to_json())
    if as_json:
        click.echo(report.to_json())
    else:
        click.echo(f"accuracy={report.accuracy:.6f}")


@cli.command("direct-eval")
@common_options
@click.option("--bundle", "bundle_path", default=None, metavar="FILE",
              help="Contrastively pre-trained parameter bundle.")
@click.option("--bank", "bank_path", default=None, metavar="DIR")
@click.option("--json", "as_json", is_flag=True, default=False,
              help="Print a JSON record instead of the accuracy line.")
def direct_eval_cmd(config_path, dry_run, as_json, **flags):
    """Score a pre-trained pair scorer on a T2I bank without fine-tuning."""
    cfg = resolve_config("direct-eval", {"bank_path": None, "bundle_path": None},
                         flags, config_path)
    if cfg["bank_path"] is None or cfg["bundle_path"] is None:
        raise CliError("--bundle and --bank are required")
    bank = _read_bank(cfg["bank_path"])
    bundle = _read_bundle(cfg["bundle_path"])
    out_dir = _begin_run("direct-eval", cfg, dry_run)
    if out_dir is None:
        return
    accuracy = contrast.direct_evaluate(bundle, bank)
    record = {"accuracy": accuracy, "task": bank.task,
              "questions": len(bank.questions)}
    (out_dir / "direct_eval.json").write_text(json.dumps(record, indent=2))
    if as_json:
        click.echo(json.dumps(record))
    else:
        click.echo(f"accuracy={accuracy:.6f}")


@cli.command("sweep")
@common_options
@click.option("--spec", "spec_path", default=None, metavar="FILE",
              help="Sweep description (JSON).")
def sweep_cmd(config_path, dry_run, **flags):
    """Run a controlled-experiment sweep; resumable cell by cell."""
    cfg = resolve_config("sweep", {"spec_path": None}, flags, config_path)
    if cfg["spec_path"] is None:
        raise CliError("--spec is required")
    if not Path(cfg["spec_path"]).is_file():
        raise CliError(f"sweep spec not found: {cfg['spec_path']}")
    spec = experiments.spec_from_json(cfg["spec_path"])
    if dry_run:
        out_dir = Path(cfg["out"])
        plan = [{"level": str(lv), "task": t,
                 "done": experiments._cell_path(out_dir, lv, t).is_file()}
                for lv in spec.levels for t in spec.tasks_]
        _begin_run("sweep", {**cfg, "axis": spec.axis, "cells": plan}, True)
        return
    out_dir = _begin_run("sweep", cfg, False)
    report = experiments.run_sweep(spec, out_dir)
    paths = experiments.emit_report(report, out_dir)
    click.echo(f"sweep {spec.axis}: {len(report.executed)} cells trained, "
               f"{len(report.skipped)} reused, {len(report.failures)} failed")
    click.echo(f"report: {paths['csv']}")
    if report.failures:
        failed = ", ".join(sorted(report.failures))
        raise RuntimeError(f"sweep cells failed: {failed}")


@cli.command("attention")
@common_options
@click.option("--bank", "bank_path", default=None, metavar="DIR")
@click.option("--bundle", "bundle_path", default=None, metavar="FILE")
@click.option("--question", "question_index", default=None, type=int,
              help="Question index within the bank.")
@click.option("--layer", default=None,
              help="Conv layer to visualize ('last' or conv0..convN).")
def attention_cmd(config_path, dry_run, **flags):
    """Render activation attention panels for one question."""
    cfg = resolve_config("attention",
                         {"bank_path": None, "bundle_path": None,
                          "question_index": 0, "layer": "last"},
                         flags, config_path)
    if cfg["bank_path"] is None or cfg["bundle_path"] is None:
        raise CliError("--bank and --bundle are required")
    bank = _read_bank(cfg["bank_path"])
    index = int(cfg["question_index"])
    if not 0 <= index < len(bank.questions):
        raise CliError(f"question index {index} outside bank of "
                       f"{len(bank.questions)}")
    net = _network_from_bundle(_read_bundle(cfg["bundle_path"]))
    layer = str(cfg["layer"])
    if layer != "last" and layer not in viz.conv_layer_names(net):
        raise CliError(f"unknown layer {layer!r}; choose 'last' or one of "
                       f"{', '.join(viz.conv_layer_names(net))}")
    out_dir = _begin_run("attention", cfg, dry_run)
    if out_dir is None:
        return
    question = bank.questions[index]
    maps = viz.attention_map(net, viz.question_views(question), layer=layer)
    if len(maps) == 1:  # early fusion: one composite map
        rows = {f"{layer} (composite)": [maps[0], None, None, None]}
    else:
        rows = {layer: maps}
    path = viz.compose_panels(question, rows, out_dir,
                              question_id=f"{bank.task}_q{index}")
    click.echo(f"panel: {path}")


# --------------------------------------------------------------------------
# exit-code mapping
# --------------------------------------------------------------------------

def main(argv=None) -> int:
    """Run the CLI; returns the process exit code (0 ok / 1 invalid / 2 failed)."""
    try:
        cli.main(args=argv, prog_name="triview", standalone_mode=False)
        return 0
    except click.exceptions.Exit as e:
        return int(e.exit_code)
    except click.UsageError as e:
        e.show()
        return 1
    except click.ClickException as e:
        e.show()
        return 1
    except click.Abort:
        click.echo("aborted", err=True)
        return 1
    except (CliError, ValueError, KeyError, tasks.BankError,
            FileNotFoundError) as e:
        click.echo(f"error: {e}", err=True)
        return 1
    except Exception as e:  # training divergence, I/O failures, ...
        click.echo(f"runtime failure: {type(e).__name__}: {e}", err=True)
        return 2


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
