"""Controlled-experiment sweeps over one factor at a time.

A sweep varies one axis — CAD model complexity, backbone width, backbone
depth, fusion structure, or architecture variant — across a grid of
(level, task) cells. Every cell trains an independent seeded network on its
own question bank and scores a disjoint test bank. Completed cells persist
as JSON markers, so interrupted sweeps resume without retraining, and a
finished sweep reruns with zero training. Reports are emitted as delimited
tables plus per-axis accuracy figures.
"""

from __future__ import annotations

import csv
import json
import traceback
from dataclasses import dataclass, field
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

from . import geometry, nets, tasks, train  # noqa: E402
from .seeding import derive_seed, substream  # noqa: E402

AXES = ("complexity", "width", "depth", "structure", "variant")

# Tuned (learning rate, batch size) per axis and task.
HYPERPARAMS = {
    "complexity": {"t2i": (1e-5, 16), "i2p": (1e-5, 16)},
    "width": {"t2i": (1e-5, 6), "i2p": (5e-5, 70)},
    "depth": {"t2i": (1e-5, 6), "i2p": (5e-5, 70)},
    "structure": {"t2i": (1e-5, 16), "i2p": (5e-5, 50), "p2i": (5e-5, 16)},
    "variant": {"t2i": (1e-5, 16), "i2p": (5e-5, 50), "p2i": (5e-5, 16)},
}

DEFAULT_LEVELS = {
    "complexity": ["3-5", "8", "12", "16", "20", "24", "30"],
    "width": [384, 448, 512, 1024],
    "depth": ["vgg13", "vgg16", "vgg19"],
    "structure": ["scratch+early", "scratch+late", "warm+early", "warm+late"],
    "variant": ["baseline", "no_pooling", "no_dropout", "share_weight",
                "separate_fc"],
}

DEFAULT_TASKS = {
    "complexity": ["t2i", "i2p"],
    "width": ["t2i", "i2p"],
    "depth": ["t2i", "i2p"],
    "structure": ["t2i", "i2p", "p2i"],
    "variant": ["i2p", "p2i"],
}

STRUCTURES = {
    "scratch+early": ("random", "early"),
    "scratch+late": ("random", "late"),
    "warm+early": ("warm", "early"),
    "warm+late": ("warm", "late"),
}

VARIANT_FLAGS = {
    "baseline": {},
    "no_pooling": {"use_pooling": False},
    "no_dropout": {"use_dropout": False},
    "share_weight": {"share_weights": True},
    "separate_fc": {"separate_fc": True},
}


@dataclass
class SweepSpec:
    axis: str
    levels: list | None = None
    tasks_: list | None = None
    train_models: int = 400
    test_models: int = 100
    model_group: str = "3-5"        # complexity of the models on non-complexity axes
    seed: int = 0
    epochs: int = 10
    image_size: int = 200
    heldout_fraction: float = 0.1
    runs: int = 1
    backbone_family: str = "vgg16"
    width_last: int = 512
    embed_dim: int = 4096
    mlp_width: int = 4096
    use_dropout: bool = True
    # warm-start donors for the structure axis, keyed by fusion kind
    init_bundles: dict = field(default_factory=dict)
    # {"learning_rate": ..., "batch_size": ...} overriding the tuned table
    train_overrides: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.axis not in AXES:
            raise ValueError(f"unknown sweep axis {self.axis!r}")
        if self.levels is None:
            self.levels = list(DEFAULT_LEVELS[self.axis])
        if self.tasks_ is None:
            self.tasks_ = list(DEFAULT_TASKS[self.axis])
        if not self.levels:
            raise ValueError("sweep needs at least one level")
        if not self.tasks_:
            raise ValueError("sweep needs at least one task")
        for t in self.tasks_:
            if t not in train.TASK_HEADS:
                raise ValueError(f"unknown task {t!r}")
        if self.axis == "structure":
            bad = [l for l in self.levels if l not in STRUCTURES]
        elif self.axis == "variant":
            bad = [l for l in self.levels if l not in VARIANT_FLAGS]
        elif self.axis == "depth":
            bad = [l for l in self.levels if l not in nets.FAMILIES]
        else:
            bad = []
        if bad:
            raise ValueError(f"invalid {self.axis} levels {bad}")
        if self.train_models < 1 or self.test_models < 1:
            raise ValueError("model counts must be positive")

    # ---- per-cell derivations ------------------------------------------

    def cell_seed(self, level, task: str) -> int:
        return derive_seed(self.seed, "sweep", self.axis, str(level), task) % (2 ** 31)

    def level_group(self, level) -> str:
        return str(level) if self.axis == "complexity" else self.model_group

    def cell_fusion(self, level) -> str:
        if self.axis == "structure":
            return STRUCTURES[level][1]
        if self.axis == "variant":
            return "late"
        # complexity / width / depth probe the single-backbone baseline
        return "early"

    def cell_network(self, level, task: str) -> nets.NetworkSpec:
        fusion = self.cell_fusion(level)
        bb = dict(family=self.backbone_family, width_last=self.width_last,
                  in_channels=12 if fusion == "early" else 3,
                  use_dropout=self.use_dropout)
        extras: dict = {}
        if self.axis == "width":
            bb["width_last"] = int(level)
        elif self.axis == "depth":
            bb["family"] = str(level)
        elif self.axis == "variant":
            for key, value in VARIANT_FLAGS[level].items():
                (bb if key in ("use_pooling", "use_dropout") else extras)[key] = value
        return nets.NetworkSpec(backbone=nets.BackboneSpec(**bb), fusion=fusion,
                                head=train.TASK_HEADS[task],
                                embed_dim=self.embed_dim, mlp_width=self.mlp_width,
                                **extras)

    def cell_train_config(self, level, task: str) -> train.TrainConfig:
        lr, batch = HYPERPARAMS[self.axis].get(task, (1e-5, 16))
        lr = self.train_overrides.get("learning_rate", lr)
        batch = self.train_overrides.get("batch_size", batch)
        fusion = self.cell_fusion(level)
        init = "random"
        if self.axis == "structure" and STRUCTURES[level][0] == "warm":
            init = self.init_bundles.get(fusion, "random")
        return train.TrainConfig(task=task, fusion=fusion, learning_rate=lr,
                                 batch_size=batch, epochs=self.epochs,
                                 seed=self.cell_seed(level, task), init=init,
                                 network=self.cell_network(level, task),
                                 heldout_fraction=self.heldout_fraction,
                                 runs=self.runs)

    # ---- serialization --------------------------------------------------

    def to_json(self, path=None) -> str:
        d = {k: v for k, v in self.__dict__.items()}
        d["tasks"] = d.pop("tasks_")
        text = json.dumps(d, indent=1, sort_keys=True)
        if path is not None:
            Path(path).parent.mkdir(parents=True, exist_ok=True)
            Path(path).write_text(text)
        return text


def spec_from_json(text_or_path) -> SweepSpec:
    p = Path(str(text_or_path))
    text = p.read_text() if p.is_file() else str(text_or_path)
    d = json.loads(text)
    if "tasks" in d:
        d["tasks_"] = d.pop("tasks")
    return SweepSpec(**d)


@dataclass
class SweepReport:
    axis: str
    levels: list
    tasks_: list
    cells: dict            # "level|task" -> cell record
    failures: dict         # "level|task" -> error text
    # invocation provenance, not part of the persistent report
    executed: list = field(default_factory=list)
    skipped: list = field(default_factory=list)

    def accuracy(self, level, task: str) -> float:
        return self.cells[f"{level}|{task}"]["accuracy"]

    def grid(self) -> list:
        """Rows of (level, task, accuracy|None) in spec order."""
        out = []
        for level in self.levels:
            for task in self.tasks_:
                cell = self.cells.get(f"{level}|{task}")
                out.append((level, task, None if cell is None else cell["accuracy"]))
        return out

    def to_json(self) -> str:
        return json.dumps({"axis": self.axis, "levels": self.levels,
                           "tasks": self.tasks_, "cells": self.cells,
                           "failures": self.failures},
                          indent=1, sort_keys=True)


def report_from_json(text_or_path) -> SweepReport:
    p = Path(str(text_or_path))
    text = p.read_text() if p.is_file() else str(text_or_path)
    d = json.loads(text)
    return SweepReport(axis=d["axis"], levels=d["levels"], tasks_=d["tasks"],
                       cells=d["cells"], failures=d["failures"])


# --------------------------------------------------------------------------
# execution
# --------------------------------------------------------------------------

def build_level_models(spec: SweepSpec, level) -> tuple[list, list]:
    """(train models, test models) for one level — disjoint by construction
    and shared by every task at that level."""
    group = spec.level_group(level)
    out = []
    for part, count in (("train", spec.train_models), ("test", spec.test_models)):
        models = []
        for i in range(count):
            rng = substream(spec.seed, "sweep", spec.axis, str(level), part, str(i))
            n = geometry.sample_group_count(rng, group)
            m = geometry.generate_model(rng, n)
            m.model_id = f"{spec.axis}/{level}/{part}/{i}"
            models.append(m)
        out.append(models)
    return out[0], out[1]


def _cell_path(out_dir, level, task: str) -> Path:
    safe = str(level).replace("/", "_")
    return Path(out_dir) / "cells" / safe / f"{task}.json"


def run_cell(spec: SweepSpec, level, task: str, out_dir,
             level_models=None) -> dict:
    """Train and score one (level, task) cell; returns its record.

    Self-contained: everything derives from the sweep spec and the cell
    coordinates, so cells can run in any order or in separate processes.
    """
    train_models, test_models = (level_models if level_models is not None
                                 else build_level_models(spec, level))
    cfg = spec.cell_train_config(level, task)
    cell_seed = spec.cell_seed(level, task)
    train_bank = tasks.build_bank(train_models, task, seed=cell_seed,
                                  size=spec.image_size)
    test_bank = tasks.build_bank(
        test_models, task, seed=derive_seed(cell_seed, "test-bank") % (2 ** 31),
        size=spec.image_size, exclude_ids=[m.model_id for m in train_models])
    net, _ = train.finetune(train_bank, cfg)
    result = train.evaluate(net, test_bank)
    record = {
        "axis": spec.axis, "level": level, "task": task, "seed": cell_seed,
        "accuracy": result.accuracy,
        "train_bank": train.bank_id(train_bank),
        "test_bank": train.bank_id(test_bank),
        "learning_rate": cfg.learning_rate, "batch_size": cfg.batch_size,
        "epochs": cfg.epochs, "init": cfg.init,
        "fingerprint": cfg.network.fingerprint(),
    }
    path = _cell_path(out_dir, level, task)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(record, indent=1, sort_keys=True))
    tmp.replace(path)
    return record


def run_sweep(spec: SweepSpec, out_dir) -> SweepReport:
    """Run every missing cell, then assemble the report from the on-disk
    markers. Failed cells are recorded and leave no marker, so a rerun
    retries exactly those."""
    out_dir = Path(out_dir)
    cells: dict = {}
    failures: dict = {}
    executed: list = []
    skipped: list = []
    for level in spec.levels:
        level_models = None
        for task in spec.tasks_:
            key = f"{level}|{task}"
            marker = _cell_path(out_dir, level, task)
            if marker.is_file():
                cells[key] = json.loads(marker.read_text())
                skipped.append(key)
                continue
            if level_models is None:
                level_models = build_level_models(spec, level)
            try:
                cells[key] = run_cell(spec, level, task, out_dir, level_models)
                executed.append(key)
            except Exception as err:  # noqa: BLE001 — partial-failure report
                failures[key] = "".join(traceback.format_exception_only(err)).strip()
    return SweepReport(axis=spec.axis, levels=list(spec.levels),
                       tasks_=list(spec.tasks_), cells=cells, failures=failures,
                       executed=executed, skipped=skipped)


# --------------------------------------------------------------------------
# report emission
# --------------------------------------------------------------------------

def emit_report(report: SweepReport, out_dir) -> dict:
    """Write report.csv, report.json, plotdata/<task>.csv and one accuracy
    figure per axis; returns the written paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {}

    csv_path = out_dir / "report.csv"
    with open(csv_path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["level", "task", "accuracy"])
        for level, task, acc in report.grid():
            writer.writerow([level, task, "" if acc is None else f"{acc:.6f}"])
    paths["csv"] = csv_path

    json_path = out_dir / "report.json"
    json_path.write_text(report.to_json())
    paths["json"] = json_path

    plot_dir = out_dir / "plotdata"
    plot_dir.mkdir(exist_ok=True)
    for task in report.tasks_:
        task_path = plot_dir / f"{task}.csv"
        with open(task_path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["level", "accuracy"])
            for level in report.levels:
                cell = report.cells.get(f"{level}|{task}")
                writer.writerow([level, "" if cell is None
                                 else f"{cell['accuracy']:.6f}"])
        paths[f"plotdata/{task}"] = task_path

    fig, ax = plt.subplots(figsize=(6, 4))
    x = range(len(report.levels))
    for task in report.tasks_:
        ys = [report.cells.get(f"{level}|{task}", {}).get("accuracy")
              for level in report.levels]
        ax.plot(list(x), ys, marker="o", label=task.upper())
    ax.set_xticks(list(x))
    ax.set_xticklabels([str(l) for l in report.levels])
    ax.set_xlabel(report.axis)
    ax.set_ylabel("test accuracy")
    ax.set_ylim(0.0, 1.0)
    ax.legend()
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig_path = out_dir / f"figure_{report.axis}.png"
    fig.savefig(fig_path, dpi=100)
    plt.close(fig)
    paths["figure"] = fig_path
    return paths
