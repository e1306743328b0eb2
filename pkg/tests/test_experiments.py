"""Sweep harness: spec derivations, resumable execution, report emission."""

import json

import pytest
import torch

from triview import experiments, nets, tasks, train
from triview.seeding import derive_seed

torch.set_num_threads(1)


def tiny_sweep(**kw):
    defaults = dict(axis="structure", levels=["scratch+early", "scratch+late"],
                    tasks_=["i2p"], train_models=4, test_models=2,
                    seed=0, epochs=0, image_size=32, backbone_family="vgg13",
                    width_last=16, embed_dim=16, mlp_width=16, use_dropout=False)
    defaults.update(kw)
    return experiments.SweepSpec(**defaults)


# --------------------------------------------------------------------------
# spec derivations
# --------------------------------------------------------------------------

class TestSweepSpec:
    def test_default_levels_and_tasks_per_axis(self):
        spec = experiments.SweepSpec(axis="complexity")
        assert spec.levels == ["3-5", "8", "12", "16", "20", "24", "30"]
        assert spec.tasks_ == ["t2i", "i2p"]
        assert experiments.SweepSpec(axis="structure").tasks_ == ["t2i", "i2p", "p2i"]
        assert experiments.SweepSpec(axis="width").levels == [384, 448, 512, 1024]

    def test_invalid_specs_rejected(self):
        with pytest.raises(ValueError):
            experiments.SweepSpec(axis="flavor")
        with pytest.raises(ValueError):
            experiments.SweepSpec(axis="complexity", tasks_=[])
        with pytest.raises(ValueError):
            experiments.SweepSpec(axis="complexity", levels=[])
        with pytest.raises(ValueError):
            experiments.SweepSpec(axis="structure", levels=["warm+sideways"])
        with pytest.raises(ValueError):
            experiments.SweepSpec(axis="depth", levels=["vgg11"])
        with pytest.raises(ValueError):
            experiments.SweepSpec(axis="complexity", tasks_=["t2x"])

    def test_tuned_hyperparameters_by_axis_and_task(self):
        complexity = experiments.SweepSpec(axis="complexity")
        cfg = complexity.cell_train_config("8", "t2i")
        assert (cfg.learning_rate, cfg.batch_size) == (1e-5, 16)
        capacity = experiments.SweepSpec(axis="width")
        cfg = capacity.cell_train_config(384, "i2p")
        assert (cfg.learning_rate, cfg.batch_size) == (5e-5, 70)
        assert capacity.cell_train_config(384, "t2i").batch_size == 6
        structure = experiments.SweepSpec(axis="structure")
        cfg = structure.cell_train_config("scratch+late", "p2i")
        assert (cfg.learning_rate, cfg.batch_size) == (5e-5, 16)

    def test_overrides_replace_tuned_values(self):
        spec = tiny_sweep(train_overrides={"learning_rate": 1e-3, "batch_size": 2})
        cfg = spec.cell_train_config("scratch+late", "i2p")
        assert (cfg.learning_rate, cfg.batch_size) == (1e-3, 2)

    def test_axis_shapes_the_network(self):
        width = experiments.SweepSpec(axis="width")
        assert width.cell_network(384, "t2i").backbone.width_last == 384
        assert width.cell_network(384, "t2i").fusion == "early"
        depth = experiments.SweepSpec(axis="depth")
        assert depth.cell_network("vgg19", "i2p").backbone.family == "vgg19"
        structure = experiments.SweepSpec(axis="structure")
        early = structure.cell_network("scratch+early", "i2p")
        assert early.fusion == "early" and early.backbone.in_channels == 12
        late = structure.cell_network("warm+late", "i2p")
        assert late.fusion == "late" and late.backbone.in_channels == 3
        variant = experiments.SweepSpec(axis="variant")
        assert variant.cell_network("share_weight", "i2p").share_weights
        assert variant.cell_network("separate_fc", "p2i").separate_fc
        assert not variant.cell_network("no_dropout", "i2p").backbone.use_dropout
        assert not variant.cell_network("no_pooling", "i2p").backbone.use_pooling

    def test_cell_seeds_depend_on_coordinates_not_order(self):
        spec = tiny_sweep()
        a = spec.cell_seed("scratch+early", "i2p")
        assert a == tiny_sweep().cell_seed("scratch+early", "i2p")
        assert a != spec.cell_seed("scratch+late", "i2p")
        assert a != spec.cell_seed("scratch+early", "t2i")

    def test_spec_json_roundtrip(self, tmp_path):
        spec = tiny_sweep(init_bundles={"late": "x.zip"})
        path = tmp_path / "sweep.json"
        spec.to_json(path)
        back = experiments.spec_from_json(path)
        assert back == spec
        assert json.loads(path.read_text())["tasks"] == ["i2p"]


# --------------------------------------------------------------------------
# execution and resume
# --------------------------------------------------------------------------

class TestRunSweep:
    def test_grid_is_complete_and_markers_written(self, tmp_path):
        spec = tiny_sweep()
        report = experiments.run_sweep(spec, tmp_path)
        assert sorted(report.cells) == ["scratch+early|i2p", "scratch+late|i2p"]
        assert report.failures == {}
        assert sorted(report.executed) == sorted(report.cells)
        for level, task, acc in report.grid():
            assert 0.0 <= acc <= 1.0
            assert experiments._cell_path(tmp_path, level, task).is_file()
        record = report.cells["scratch+late|i2p"]
        assert record["seed"] == spec.cell_seed("scratch+late", "i2p")
        assert record["train_bank"].startswith("i2p/")
        assert record["fingerprint"]["fusion"] == "late"

    def test_rerun_after_completion_executes_nothing(self, tmp_path):
        spec = tiny_sweep()
        first = experiments.run_sweep(spec, tmp_path)
        second = experiments.run_sweep(spec, tmp_path)
        assert second.executed == []
        assert sorted(second.skipped) == sorted(first.cells)
        assert second.to_json() == first.to_json()

    def test_cells_independent_of_execution_order(self, tmp_path):
        forward = experiments.run_sweep(tiny_sweep(), tmp_path / "fwd")
        reversed_spec = tiny_sweep(levels=["scratch+late", "scratch+early"])
        backward = experiments.run_sweep(reversed_spec, tmp_path / "bwd")
        for key, cell in forward.cells.items():
            assert backward.cells[key]["accuracy"] == cell["accuracy"]

    def test_failed_cells_reported_and_retried(self, tmp_path, monkeypatch):
        spec = tiny_sweep()
        poisoned = spec.cell_seed("scratch+early", "i2p")
        real = train.finetune

        def sabotaged(bank, cfg, log_path=None):
            if cfg.seed == poisoned:
                raise RuntimeError("injected cell failure")
            return real(bank, cfg, log_path)

        monkeypatch.setattr(experiments.train, "finetune", sabotaged)
        report = experiments.run_sweep(spec, tmp_path)
        assert list(report.failures) == ["scratch+early|i2p"]
        assert "injected cell failure" in report.failures["scratch+early|i2p"]
        assert "scratch+early|i2p" not in report.cells
        monkeypatch.setattr(experiments.train, "finetune", real)
        retry = experiments.run_sweep(spec, tmp_path)
        assert retry.failures == {}
        assert retry.executed == ["scratch+early|i2p"]  # only the failed cell

    def test_warm_level_uses_donor_bundle(self, tmp_path):
        donor_spec = nets.NetworkSpec(
            backbone=nets.BackboneSpec(family="vgg13", width_last=16,
                                       use_dropout=False),
            fusion="late", head="i2p_multiclass", mlp_width=16, embed_dim=16)
        donor = nets.save_bundle(nets.build_network(donor_spec, seed=42))
        path = tmp_path / "donor.zip"
        nets.write_bundle(donor, path)
        spec = tiny_sweep(levels=["warm+late"], init_bundles={"late": str(path)})
        report = experiments.run_sweep(spec, tmp_path / "out")
        record = report.cells["warm+late|i2p"]
        assert record["init"] == str(path)

        # epochs=0 means the cell accuracy equals evaluating the warm net
        _, test_models = experiments.build_level_models(spec, "warm+late")
        cell_seed = spec.cell_seed("warm+late", "i2p")
        test_bank = tasks.build_bank(
            test_models, "i2p", seed=derive_seed(cell_seed, "test-bank") % (2 ** 31),
            size=spec.image_size)
        net = nets.build_network(spec.cell_network("warm+late", "i2p"),
                                 seed=cell_seed)
        nets.warm_start(net, donor)
        assert train.evaluate(net, test_bank).accuracy == record["accuracy"]


# --------------------------------------------------------------------------
# report emission
# --------------------------------------------------------------------------

@pytest.fixture(scope="module")
def emitted(tmp_path_factory):
    root = tmp_path_factory.mktemp("sweep")
    spec = tiny_sweep()
    report = experiments.run_sweep(spec, root)
    paths = experiments.emit_report(report, root)
    return spec, report, paths


class TestEmitReport:
    def test_csv_row_count_is_grid_size(self, emitted):
        spec, report, paths = emitted
        lines = paths["csv"].read_text().splitlines()
        assert lines[0] == "level,task,accuracy"
        assert len(lines) == 1 + len(spec.levels) * len(spec.tasks_)

    def test_json_roundtrips(self, emitted):
        _, report, paths = emitted
        back = experiments.report_from_json(paths["json"])
        assert back.cells == report.cells
        assert back.levels == report.levels
        assert back.to_json() == report.to_json()

    def test_plotdata_follows_level_order(self, emitted):
        spec, _, paths = emitted
        lines = paths["plotdata/i2p"].read_text().splitlines()
        assert lines[0] == "level,accuracy"
        assert [row.split(",")[0] for row in lines[1:]] == \
            [str(l) for l in spec.levels]

    def test_figure_written(self, emitted):
        _, _, paths = emitted
        assert paths["figure"].name == "figure_structure.png"
        assert paths["figure"].stat().st_size > 1000
