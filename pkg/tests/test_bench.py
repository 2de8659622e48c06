import dataclasses

import numpy as np
import pytest
import torch

from sparseseg.bench import (
    PRESETS,
    ExperimentConfig,
    MetricReport,
    ShapeFamily,
    SynthSpec,
    build_distribution,
    build_few_shot,
    finetune_baseline,
    jaccard,
    label_efficiency_curve,
    predict_dense,
    run_experiment,
    score_query,
    synth_meta_dataset,
    train_from_scratch,
)
from sparseseg.data import SparseMask, FewShotTask
from sparseseg.sparsify import SparsifyConfig

TINY = dict(widths=(2, 4, 8), dropout=0.0)


def small_spec(n=12):
    return SynthSpec(
        families=[ShapeFamily("disks", "disk", n), ShapeFamily("rects", "rectangle", n)],
        heldout=ShapeFamily("rings", "ring", n),
        image_size=32,
    )


@pytest.fixture(scope="module")
def pools():
    return synth_meta_dataset(small_spec(), seed=0)


class TestJaccard:
    def test_identity(self):
        m = np.array([[1, 2], [2, 1]])
        assert jaccard(m, m, 2) == 1.0

    def test_half_overlap(self):
        gt = np.array([[2, 2, 1, 1]])
        pred = np.array([[2, 1, 1, 1]])
        assert jaccard(pred, gt, 2) == 0.5

    def test_disjoint(self):
        gt = np.array([[2, 1, 1, 1]])
        pred = np.array([[1, 1, 1, 2]])
        assert jaccard(pred, gt, 2) == 0.0

    def test_empty_union_is_one(self):
        m = np.ones((3, 3), dtype=int)
        assert jaccard(m, m, 2) == 1.0

    def test_one_side_empty_is_zero(self):
        gt = np.ones((3, 3), dtype=int)
        pred = np.full((3, 3), 2)
        assert jaccard(pred, gt, 2) == 0.0
        assert jaccard(gt, pred, 2) == 0.0

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            jaccard(np.ones((2, 2)), np.ones((3, 3)), 1)

    def test_bounds(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            pred = rng.integers(1, 3, size=(8, 8))
            gt = rng.integers(1, 3, size=(8, 8))
            assert 0.0 <= jaccard(pred, gt, 2) <= 1.0


class TestSynthDataset:
    def test_family_counts(self, pools):
        assert set(pools) == {"disks", "rects", "rings"}
        assert all(len(v) == 12 for v in pools.values())

    def test_determinism(self):
        a = synth_meta_dataset(small_spec(), seed=5)
        b = synth_meta_dataset(small_spec(), seed=5)
        for name in a:
            for sa, sb in zip(a[name], b[name]):
                assert np.array_equal(sa.image, sb.image)
                assert np.array_equal(sa.dense_mask, sb.dense_mask)

    def test_heldout_excluded_from_distribution(self, pools):
        dist = build_distribution(pools, "rings", fold=0, n_folds=3, seed=0)
        assert {t.name for t in dist.tasks} == {"disks", "rects"}

    def test_heldout_name_collision_rejected(self):
        with pytest.raises(ValueError, match="held-out"):
            SynthSpec(
                families=[ShapeFamily("disks", "disk", 4)],
                heldout=ShapeFamily("disks", "disk", 4),
            )

    def test_binary_masks(self, pools):
        for samples in pools.values():
            for s in samples:
                assert set(np.unique(s.dense_mask)) == {1, 2}


class TestConfig:
    def test_unknown_method(self):
        with pytest.raises(ValueError, match="unknown method"):
            ExperimentConfig(
                method="magic", shots=1, sparsify=SparsifyConfig(style="points"), target="t"
            )

    def test_finetune_needs_source(self):
        with pytest.raises(ValueError, match="source_task"):
            ExperimentConfig(
                method="finetune", shots=1, sparsify=SparsifyConfig(style="points"), target="t"
            )

    def test_preset_epochs(self):
        cfg = ExperimentConfig.with_preset(
            "medical",
            method="weasel",
            shots=1,
            sparsify=SparsifyConfig(style="points"),
            target="t",
        )
        assert cfg.meta_epochs == 2000 and cfg.tune_epochs == 80 and cfg.task_batch == 6
        cfg = ExperimentConfig.with_preset(
            "remote-sensing",
            method="weasel",
            shots=1,
            sparsify=SparsifyConfig(style="points"),
            target="t",
        )
        assert cfg.meta_epochs == 200 and cfg.tune_epochs == 40 and cfg.task_batch == 4

    def test_preset_table(self):
        assert PRESETS["medical"]["protoseg"] == (2000, 0)
        assert PRESETS["medical"]["finetune"] == (200, 80)
        assert PRESETS["medical"]["scratch"] == (0, 80)
        assert PRESETS["remote-sensing"]["scratch"] == (0, 100)
        assert PRESETS["remote-sensing"]["finetune"] == (100, 80)


class TestBaselines:
    def base_cfg(self, method, **kw):
        defaults = dict(
            method=method,
            shots=2,
            sparsify=SparsifyConfig(style="points", n=15),
            target="rings",
            folds=3,
            seed=0,
            source_task="disks" if method == "finetune" else None,
            **TINY,
        )
        defaults.update(kw)
        return ExperimentConfig(**defaults)

    def test_scratch_zero_epochs_returns_random_init(self, pools):
        cfg = self.base_cfg("scratch")
        fs = build_few_shot(pools, "rings", 0, 3, 2, cfg.sparsify, 0)
        model = train_from_scratch(fs, 0, cfg)
        torch.manual_seed(cfg.seed)
        from sparseseg.network import MiniUNet, NetworkSpec

        ref = MiniUNet(NetworkSpec(in_channels=1, classes=2, **TINY))
        for a, b in zip(model.state_dict().values(), ref.state_dict().values()):
            assert torch.equal(a, b)

    def test_scratch_determinism(self, pools):
        cfg = self.base_cfg("scratch")
        fs = build_few_shot(pools, "rings", 0, 3, 2, cfg.sparsify, 0)
        a = train_from_scratch(fs, 3, cfg)
        b = train_from_scratch(fs, 3, cfg)
        for pa, pb in zip(a.state_dict().values(), b.state_dict().values()):
            assert torch.equal(pa, pb)

    def test_finetune_rejects_same_task(self, pools):
        cfg = self.base_cfg("finetune")
        fs = build_few_shot(pools, "rings", 0, 3, 2, cfg.sparsify, 0)
        dist = build_distribution(pools, "disks", 0, 3, 0)
        rings_task = [t for t in dist.tasks if t.name == "rings"][0]
        bad = dataclasses.replace(rings_task, name="rings")
        with pytest.raises(ValueError, match="differ"):
            finetune_baseline(bad, fs, 1, 1, cfg)

    def test_finetune_zero_pre_epochs_matches_scratch_form(self, pools):
        cfg = self.base_cfg("finetune")
        fs = build_few_shot(pools, "rings", 0, 3, 2, cfg.sparsify, 0)
        dist = build_distribution(pools, "rings", 0, 3, 0)
        src = dist.tasks[0]
        tuned = finetune_baseline(src, fs, 0, 3, cfg)
        scratch = train_from_scratch(fs, 3, cfg)
        for a, b in zip(tuned.state_dict().values(), scratch.state_dict().values()):
            assert torch.equal(a, b)

    def test_scratch_learns_separable_task(self):
        # bright foreground on dark background: 5-shot training should beat
        # the untrained network by a wide margin (1px of boundary blur from
        # 2x2 upsampling caps small-disk IoU well below 1.0, so the bar is
        # a margin over random init, not near-perfect overlap)
        pools = synth_meta_dataset(
            SynthSpec(
                families=[ShapeFamily("src", "disk", 6, noise=0.05)],
                heldout=ShapeFamily("disks", "disk", 16, noise=0.05),
                image_size=32,
            ),
            seed=1,
        )
        cfg = ExperimentConfig(
            method="scratch",
            shots=5,
            sparsify=SparsifyConfig(style="points", n=200),
            target="disks",
            folds=3,
            seed=0,
            widths=(4, 8, 16),
            dropout=0.0,
        )
        fs = build_few_shot(pools, "disks", 0, 3, 5, cfg.sparsify, 0)
        untrained = train_from_scratch(fs, 0, cfg)
        base_score = score_query(predict_dense(untrained, fs.query), fs.query)
        model = train_from_scratch(fs, 150, cfg)
        score = score_query(predict_dense(model, fs.query), fs.query)
        assert score > 0.45
        assert score > base_score + 0.2


class TestRunExperiment:
    def cfg(self, **kw):
        defaults = dict(
            method="scratch",
            shots=2,
            sparsify=SparsifyConfig(style="points", n=10),
            target="rings",
            folds=3,
            tune_epochs=2,
            seed=0,
            **TINY,
        )
        defaults.update(kw)
        return ExperimentConfig(**defaults)

    def test_fold_bookkeeping(self, pools):
        report = run_experiment(self.cfg(), pools)
        assert len(report.per_fold) == 3
        assert len(report.user_inputs) == 3
        assert all(0.0 <= s <= 1.0 for s in report.per_fold)

    def test_points_input_counting(self, pools):
        report = run_experiment(self.cfg(), pools)
        assert all(u == 2 * 10 * 2 for u in report.user_inputs)

    def test_report_reproducibility(self, pools):
        a = run_experiment(self.cfg(), pools).to_json()
        b = run_experiment(self.cfg(), pools).to_json()
        assert a == b

    def test_unknown_target(self, pools):
        with pytest.raises(ValueError, match="target"):
            run_experiment(self.cfg(target="nothere"), pools)

    def test_degenerate_regions_records_zero(self, pools):
        # a support whose region sparsifier finds no pure foreground leads
        # to a missing prototype and a zero score for that fold
        import sparseseg.bench as bench_mod

        cfg = self.cfg(method="protoseg", meta_epochs=1, task_batch=1)

        def poisoned_few_shot(pools_, target, fold, n_folds, shots, sp, seed):
            fs = build_few_shot(pools_, target, fold, n_folds, shots, sp, seed)
            sup = []
            for s in fs.support:
                labels = np.where(s.dense_mask == 1, 1, 0)
                sup.append(
                    dataclasses.replace(
                        s, sparse_mask=SparseMask(labels=labels, degenerate=True)
                    )
                )
            return FewShotTask(
                support=sup, query=fs.query, target_class=2, name=fs.name, k=fs.k
            )

        orig = bench_mod.build_few_shot
        bench_mod.build_few_shot = poisoned_few_shot
        try:
            report = run_experiment(cfg, pools)
        finally:
            bench_mod.build_few_shot = orig
        assert all(s == 0.0 for s in report.per_fold)
        assert len(report.errors) == cfg.folds
        assert "class 2" in report.errors[0]


class TestLabelEfficiency:
    def report(self, inputs, mean, method="weasel", target="t"):
        return MetricReport(
            method=method,
            target=target,
            per_fold=[mean],
            user_inputs=[inputs],
            errors=[],
            provenance={},
        )

    def test_single_row(self):
        rows = label_efficiency_curve([self.report(40, 0.5)])
        assert len(rows) == 1 and rows[0]["inputs"] == 40

    def test_sorted_ascending(self):
        rows = label_efficiency_curve(
            [self.report(200, 0.7), self.report(10, 0.4), self.report(40, 0.6)]
        )
        assert [r["inputs"] for r in rows] == [10, 40, 200]

    def test_mixed_methods_rejected(self):
        with pytest.raises(ValueError, match="share"):
            label_efficiency_curve([self.report(10, 0.4), self.report(20, 0.5, method="scratch")])

    def test_points_rows_use_2n_formula(self, pools):
        cfg = ExperimentConfig(
            method="scratch",
            shots=2,
            sparsify=SparsifyConfig(style="points", n=7),
            target="rings",
            folds=3,
            tune_epochs=1,
            seed=0,
            **TINY,
        )
        report = run_experiment(cfg, pools)
        rows = label_efficiency_curve([report])
        assert rows[0]["inputs"] == 2 * 7 * 2
