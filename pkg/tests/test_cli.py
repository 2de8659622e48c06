import json

import numpy as np
import pytest
import yaml
from click.testing import CliRunner
from PIL import Image

from sparseseg.cli import main


@pytest.fixture
def runner():
    return CliRunner()


def write_yaml(path, payload):
    path.write_text(yaml.safe_dump(payload))
    return str(path)


def make_mask_dataset(root, n=3, size=24):
    (root / "images").mkdir(parents=True)
    (root / "masks").mkdir(parents=True)
    rng = np.random.default_rng(0)
    for i in range(n):
        dense = np.ones((size, size), dtype=np.uint8)
        y, x = rng.integers(4, size - 10, size=2)
        dense[y : y + 6, x : x + 6] = 2
        Image.fromarray(dense, mode="L").save(root / "masks" / f"img{i}.png")
        img = (dense == 2).astype(np.float32) + rng.normal(0, 0.1, (size, size))
        Image.fromarray((img * 100).clip(0, 255).astype(np.uint8)).save(
            root / "images" / f"img{i}.png"
        )
    return root


SYNTH_CFG = {
    "synthetic": {
        "families": [
            {"name": "disks", "shape": "disk", "n_images": 8},
            {"name": "rects", "shape": "rectangle", "n_images": 8},
        ],
        "heldout": {"name": "rings", "shape": "ring", "n_images": 8},
        "image_size": 32,
    },
    "experiment": {
        "method": "scratch",
        "shots": 2,
        "target": "rings",
        "folds": 3,
        "tune_epochs": 2,
        "meta_epochs": 2,
        "task_batch": 1,
        "widths": [2, 4, 8],
        "dropout": 0.0,
        "sparsify": {"style": "points", "n": 5},
    },
}


def synth_cfg(**experiment_overrides):
    cfg = json.loads(json.dumps(SYNTH_CFG))
    cfg["experiment"].update(experiment_overrides)
    return cfg


class TestSparsifyCommand:
    def test_empty_dataset_succeeds_with_no_outputs(self, runner, tmp_path):
        data = tmp_path / "data"
        data.mkdir()
        cfg = write_yaml(tmp_path / "sp.yaml", {"style": "points", "n": 5})
        out = tmp_path / "out"
        result = runner.invoke(main, ["sparsify", str(data), "--config", cfg, "--out", str(out)])
        assert result.exit_code == 0, result.output
        assert list(out.glob("*.png")) == []

    def test_invalid_style_is_usage_error(self, runner, tmp_path):
        data = tmp_path / "data"
        data.mkdir()
        cfg = write_yaml(tmp_path / "sp.yaml", {"style": "scribbles"})
        result = runner.invoke(
            main, ["sparsify", str(data), "--config", cfg, "--out", str(tmp_path / "o")]
        )
        assert result.exit_code == 2
        assert "invalid style" in result.output

    def test_writes_masks_and_sidecars(self, runner, tmp_path):
        data = make_mask_dataset(tmp_path / "data")
        cfg = write_yaml(tmp_path / "sp.yaml", {"style": "points", "n": 4})
        out = tmp_path / "out"
        result = runner.invoke(
            main, ["sparsify", str(data), "--config", cfg, "--out", str(out), "--seed", "3"]
        )
        assert result.exit_code == 0, result.output
        pngs = sorted(out.glob("*.png"))
        sidecars = sorted(out.glob("*.json"))
        assert len(pngs) == 3 and len(sidecars) == 3
        labels = np.asarray(Image.open(pngs[0]))
        assert set(np.unique(labels)) <= {0, 1, 2}
        assert 0 < (labels > 0).sum() <= 2 * 4
        side = json.loads(sidecars[0].read_text())
        assert side["seed"] == 3
        assert side["config"]["style"] == "points"
        assert "degenerate" in side

    def test_same_seed_reruns_are_byte_identical(self, runner, tmp_path):
        data = make_mask_dataset(tmp_path / "data")
        cfg = write_yaml(tmp_path / "sp.yaml", {"style": "grid", "s": 4})
        outs = []
        for name in ("a", "b"):
            out = tmp_path / name
            result = runner.invoke(
                main, ["sparsify", str(data), "--config", cfg, "--out", str(out), "--seed", "7"]
            )
            assert result.exit_code == 0, result.output
            outs.append(out)
        for png in sorted(outs[0].glob("*")):
            assert png.read_bytes() == (outs[1] / png.name).read_bytes()

    def test_per_mask_failure_exits_nonzero(self, runner, tmp_path):
        data = make_mask_dataset(tmp_path / "data", size=24)
        # grid spacing larger than the mask: every mask fails
        cfg = write_yaml(tmp_path / "sp.yaml", {"style": "grid", "s": 64})
        result = runner.invoke(
            main, ["sparsify", str(data), "--config", cfg, "--out", str(tmp_path / "o")]
        )
        assert result.exit_code == 1
        assert "error" in result.output


class TestTrainCommands:
    def test_metatrain_writes_checkpoint_and_log(self, runner, tmp_path):
        cfg = write_yaml(tmp_path / "cfg.yaml", synth_cfg(method="weasel"))
        out = tmp_path / "run"
        result = runner.invoke(main, ["metatrain", "--config", cfg, "--out", str(out)])
        assert result.exit_code == 0, result.output
        assert (out / "meta.pt").exists()
        log_lines = (out / "train_log.jsonl").read_text().splitlines()
        assert len(log_lines) == 2
        assert "losses" in json.loads(log_lines[0]) or "outer_losses" in json.loads(log_lines[0])

    def test_metatrain_protoseg(self, runner, tmp_path):
        cfg = write_yaml(tmp_path / "cfg.yaml", synth_cfg(method="protoseg"))
        out = tmp_path / "run"
        result = runner.invoke(main, ["metatrain", "--config", cfg, "--out", str(out)])
        assert result.exit_code == 0, result.output
        assert (out / "meta.pt").exists()

    def test_tune_missing_checkpoint_fails(self, runner, tmp_path):
        cfg = write_yaml(tmp_path / "cfg.yaml", synth_cfg())
        result = runner.invoke(
            main,
            [
                "tune",
                "--config",
                cfg,
                "--out",
                str(tmp_path / "o"),
                "--checkpoint",
                str(tmp_path / "nope.pt"),
            ],
        )
        assert result.exit_code == 1
        assert "missing checkpoint" in result.output

    def test_tune_from_metatrained_checkpoint(self, runner, tmp_path):
        cfg = write_yaml(tmp_path / "cfg.yaml", synth_cfg(method="weasel"))
        meta_out = tmp_path / "meta"
        result = runner.invoke(main, ["metatrain", "--config", cfg, "--out", str(meta_out)])
        assert result.exit_code == 0, result.output
        tune_out = tmp_path / "tuned"
        result = runner.invoke(
            main,
            [
                "tune",
                "--config",
                cfg,
                "--out",
                str(tune_out),
                "--checkpoint",
                str(meta_out / "meta.pt"),
            ],
        )
        assert result.exit_code == 0, result.output
        assert (tune_out / "tuned.pt").exists()

    def test_missing_dataset_section_is_usage_error(self, runner, tmp_path):
        cfg = write_yaml(tmp_path / "cfg.yaml", {"experiment": SYNTH_CFG["experiment"]})
        result = runner.invoke(main, ["metatrain", "--config", cfg, "--out", str(tmp_path / "o")])
        assert result.exit_code == 2
        assert "datasets" in result.output


class TestEvalAndReport:
    def run_eval(self, runner, tmp_path, **overrides):
        tmp_path.mkdir(parents=True, exist_ok=True)
        cfg = write_yaml(tmp_path / f"cfg{len(list(tmp_path.iterdir()))}.yaml", synth_cfg(**overrides))
        out = tmp_path / "reports"
        result = runner.invoke(main, ["eval", "--config", cfg, "--out", str(out)])
        assert result.exit_code == 0, result.output
        return next(out.glob("report_*.json"))

    def test_eval_writes_report(self, runner, tmp_path):
        path = self.run_eval(runner, tmp_path)
        payload = json.loads(path.read_text())
        assert payload["method"] == "scratch"
        assert len(payload["per_fold"]) == 3
        assert "mean" in payload

    def test_eval_determinism(self, runner, tmp_path):
        a = json.loads(self.run_eval(runner, tmp_path / "a").read_text())
        b = json.loads(self.run_eval(runner, tmp_path / "b").read_text())
        assert a == b

    def test_report_renders_charts(self, runner, tmp_path):
        r1 = self.run_eval(runner, tmp_path / "a", sparsify={"style": "points", "n": 5})
        r2 = self.run_eval(runner, tmp_path / "b", sparsify={"style": "points", "n": 10})
        out = tmp_path / "charts"
        result = runner.invoke(main, ["report", str(r1), str(r2), "--out", str(out)])
        assert result.exit_code == 0, result.output
        assert (out / "scores_by_setting.png").exists()
        # same method + target -> label-efficiency chart too
        assert (out / "inputs_vs_jaccard.png").exists()

    def test_report_with_dense_reference(self, runner, tmp_path):
        r1 = self.run_eval(runner, tmp_path / "a")
        out = tmp_path / "charts"
        result = runner.invoke(
            main, ["report", str(r1), "--out", str(out), "--dense-report", str(r1)]
        )
        assert result.exit_code == 0, result.output
        assert (out / "scores_by_setting.png").exists()
