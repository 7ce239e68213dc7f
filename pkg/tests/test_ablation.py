import json

import numpy as np
import pytest

from signa import cli
from signa.ablation import (
    AXES, AblationGrid, ablation_table, run_ablation, signa_for, train_and_evaluate, width_at,
)
from signa.data import Scene, SynthSpec, save_dataset, synthesize_dataset
from signa.model import BackboneConfig, TrainConfig


def tiny_dataset(seed=1):
    spec = SynthSpec(["a", "b", "c", "d"],
                     [Scene("s1", ["a", "b"], {"c": 0.5}, 30), Scene("s2", ["d"], {"b": 0.3, "c": 0.2}, 20)],
                     image_size=(3, 16, 16), seed=seed)
    return synthesize_dataset(spec)


@pytest.fixture(scope="module")
def ds():
    return tiny_dataset()


TC = TrainConfig(epochs=1, batch_size=16)


class TestGrid:
    def test_default_axes(self):
        assert AXES == {"heads": (1, 2, 4, 6, 8), "layer": (1, 2, 3, 4), "gnn": ("gcn", "sage", "gat")}
        assert AblationGrid("layer").values == (1, 2, 3, 4)

    def test_unknown_axis(self):
        with pytest.raises(ValueError):
            AblationGrid("depth")

    def test_width_follows_layer(self):
        bb = BackboneConfig()
        assert [width_at(bb, k) for k in (1, 2, 3, 4)] == [16, 32, 64, 128]
        assert signa_for(bb, 8, insertion_layer=3).D == 64

    def test_single_cell_matches_single_run(self, ds):
        grid = run_ablation(AblationGrid("heads", values=(2,), seeds=(5,)), ds, TC)
        single = train_and_evaluate(ds, signa_for(BackboneConfig(input_shape=(3, 16, 16), num_classes=4), 4,
                                                  heads=2), TrainConfig(epochs=1, seed=5))
        assert grid.results[2].per_seed == [single.report.F1_e]

    def test_mean_over_seeds(self, ds):
        grid = run_ablation(AblationGrid("gnn", values=("gat",), seeds=(0, 1)), ds, TC)
        cell = grid.results["gat"]
        assert len(cell.per_seed) == 2
        assert abs(cell.mean - (cell.per_seed[0] + cell.per_seed[1]) / 2) <= 1e-12

    def test_invalid_cell_reported(self, ds):
        grid = run_ablation(AblationGrid("heads", values=(0, 1), seeds=(0,)), ds, TC)
        assert grid.results[0].error is not None and not grid.results[0].per_seed
        assert grid.results[1].error is None and len(grid.results[1].per_seed) == 1
        table = ablation_table(grid)
        assert table.count("\n") == 4 and "error" in table


class TestCli:
    def test_synth_train_eval(self, tmp_path, capsys):
        spec = tmp_path / "spec.json"
        spec.write_text(json.dumps({
            "labels": ["a", "b"], "scenes": [{"name": "s", "base": ["a"], "co": {"b": 0.5}, "count": 20}],
            "image_size": [3, 16, 16]}))
        assert cli.main(["data", "synth", "--spec", str(spec), "--out", str(tmp_path / "d")]) == 0
        assert (tmp_path / "d" / "manifest.json").exists()
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"epochs": 3, "heads": 1}))
        args = ["train", "--data", str(tmp_path / "d"), "--config", str(cfg), "--epochs", "1"]
        assert cli.main(args + ["--out", str(tmp_path / "r")]) == 0
        assert len((tmp_path / "r" / "history.csv").read_text().splitlines()) == 2  # flag beat the file
        manifest = json.loads((tmp_path / "r" / "manifest.json").read_text())
        assert manifest["config"]["heads"] == 1 and "best.ckpt" in manifest["artifacts"]
        assert cli.main(["eval", "--checkpoint", str(tmp_path / "r" / "best.ckpt"), "--data", str(tmp_path / "d"),
                         "--report", str(tmp_path / "ev")]) == 0
        assert (tmp_path / "ev" / "per_class.csv").exists()
        assert cli.main(["report", "--runs", str(tmp_path / "r")]) == 0
        assert "| r | 1 |" in capsys.readouterr().out

    def test_graph_build(self, tmp_path, capsys):
        p = tmp_path / "l.csv"
        p.write_text("image_id,x,y\n1,1,1\n2,1,0\n3,0,1\n")
        assert cli.main(["graph", "build", "--labels", str(p), "--out", str(tmp_path / "g")]) == 0
        summary = json.loads(capsys.readouterr().out)
        assert summary == {"C": 2, "Q": 0.4, "directed_edge_count": 2}

    def test_bad_labels_exit_code(self, tmp_path):
        p = tmp_path / "l.csv"
        p.write_text("image_id,x\n1,7\n")
        assert cli.main(["graph", "build", "--labels", str(p), "--out", str(tmp_path / "g")]) == 2

    def test_missing_required(self):
        with pytest.raises(SystemExit):
            cli.main(["train"])

    def test_unknown_config_key(self, tmp_path):
        cfg = tmp_path / "c.json"
        cfg.write_text('{"bogus": 1}')
        with pytest.raises(SystemExit):
            cli.main(["train", "--config", str(cfg), "--data", "x", "--out", "y"])

    def test_ablate(self, tmp_path, ds):
        save_dataset(ds, tmp_path / "d")
        assert cli.main(["ablate", "--axis", "gnn", "--seeds", "1", "--epochs", "1", "--data", str(tmp_path / "d"),
                         "--out", str(tmp_path / "a")]) == 0
        cells = json.loads((tmp_path / "a" / "ablation.json").read_text())["cells"]
        assert [c["value"] for c in cells] == ["gcn", "sage", "gat"]
        assert all(np.isfinite(c["mean_F1_e"]) for c in cells)
