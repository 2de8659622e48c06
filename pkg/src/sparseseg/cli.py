"""Batch command-line front door: sparsify, metatrain, tune, eval, report.

Every command is driven by a YAML config file plus explicit flags; all
randomness comes from declared seeds, never the wall clock.
"""

from __future__ import annotations

import json
import sys
from pathlib import Path

import click
import numpy as np
import yaml
from PIL import Image

from . import bench, protoseg, weasel
from .data import load_dataset
from .network import load_checkpoint, save_checkpoint
from .sparsify import STYLES, SparsifyConfig, apply_config


def _load_yaml(path):
    with open(path) as fh:
        return yaml.safe_load(fh) or {}


def _sparsify_config(cfg: dict, seed: int | None = None) -> SparsifyConfig:
    cfg = dict(cfg)
    if seed is not None:
        cfg["seed"] = seed
    try:
        return SparsifyConfig(**cfg)
    except (TypeError, ValueError) as exc:
        raise click.UsageError(f"invalid sparsify config: {exc}")


def _build_pools(cfg: dict, seed: int) -> dict:
    """Sample pools keyed by dataset/family name, from disk or synthetic."""
    if "synthetic" in cfg:
        syn = cfg["synthetic"]
        spec = bench.SynthSpec(
            families=[bench.ShapeFamily(**f) for f in syn["families"]],
            heldout=bench.ShapeFamily(**syn["heldout"]),
            image_size=syn.get("image_size", 64),
        )
        return bench.synth_meta_dataset(spec, seed=syn.get("seed", seed))
    if "datasets" not in cfg:
        raise click.UsageError("config needs a 'datasets' or 'synthetic' section")
    return {
        name: load_dataset(entry["root"], entry["manifest"])
        for name, entry in cfg["datasets"].items()
    }


def _experiment_config(cfg: dict, seed: int, order: str | None, preset: str | None, **overrides):
    exp = dict(cfg.get("experiment", {}))
    exp.update(overrides)
    exp["sparsify"] = _sparsify_config(exp.get("sparsify", {"style": "points"}))
    exp["seed"] = seed
    if order:
        exp["order"] = order
    if "widths" in exp:
        exp["widths"] = tuple(exp["widths"])
    try:
        if preset:
            return bench.ExperimentConfig.with_preset(preset, **exp)
        return bench.ExperimentConfig(**exp)
    except (TypeError, ValueError, KeyError) as exc:
        raise click.UsageError(f"invalid experiment config: {exc}")


@click.group()
def main():
    """Few-shot segmentation toolkit for sparse pixel annotations."""


@main.command()
@click.argument("dataset_dir", type=click.Path(exists=True, file_okay=False))
@click.option("--config", "config_path", required=True, type=click.Path(exists=True))
@click.option("--out", required=True, type=click.Path(file_okay=False))
@click.option("--seed", default=0, show_default=True, type=int)
def sparsify(dataset_dir, config_path, out, seed):
    """Write sparse masks plus provenance sidecars for every dense mask."""
    cfg = _load_yaml(config_path)
    style = cfg.get("style")
    if style not in STYLES:
        raise click.UsageError(f"invalid style {style!r}; expected one of {STYLES}")
    sp_cfg = _sparsify_config(cfg, seed=seed)
    masks_dir = Path(dataset_dir) / "masks"
    images_dir = Path(dataset_dir) / "images"
    out_dir = Path(out)
    out_dir.mkdir(parents=True, exist_ok=True)

    failures = 0
    for mask_path in sorted(masks_dir.glob("*.png")) if masks_dir.is_dir() else []:
        rng = np.random.default_rng((seed, hashable_id(mask_path.stem)))
        dense = np.asarray(Image.open(mask_path)).astype(np.int64)
        if not set(np.unique(dense)) <= {1, 2}:
            # raw binary masks: zero -> background, nonzero -> foreground
            dense = np.where(dense > 0, 2, 1)
        image = None
        if sp_cfg.style == "regions":
            candidates = list(images_dir.glob(mask_path.stem + ".*"))
            image = np.asarray(Image.open(candidates[0]), dtype=np.float32) if candidates else None
        try:
            sparse = apply_config(dense.astype(np.int64), sp_cfg, rng=rng, image=image)
        except ValueError as exc:
            click.echo(f"error: {mask_path.name}: {exc}", err=True)
            failures += 1
            continue
        Image.fromarray(sparse.labels.astype(np.uint8), mode="L").save(
            out_dir / mask_path.name
        )
        sidecar = {
            "source": mask_path.name,
            "seed": seed,
            "config": {k: v for k, v in sp_cfg.__dict__.items()},
            "degenerate": sparse.degenerate,
            "meta": sparse.meta,
        }
        (out_dir / (mask_path.stem + ".json")).write_text(json.dumps(sidecar, sort_keys=True))
    if failures:
        sys.exit(1)


def hashable_id(name: str) -> int:
    import zlib

    return zlib.crc32(name.encode())


common_options = [
    click.option("--config", "config_path", required=True, type=click.Path(exists=True)),
    click.option("--out", required=True, type=click.Path(file_okay=False)),
    click.option("--seed", default=0, show_default=True, type=int),
    click.option("--device", default="cpu", show_default=True),
    click.option("--order", type=click.Choice(["first", "second"]), default=None),
    click.option(
        "--preset",
        type=click.Choice(["medical", "remote-sensing", "synthetic"]),
        default=None,
    ),
]


def with_common_options(f):
    for opt in reversed(common_options):
        f = opt(f)
    return f


@main.command()
@with_common_options
@click.option("--fold", default=0, show_default=True, type=int)
def metatrain(config_path, out, seed, device, order, preset, fold):
    """Meta-train on the leave-one-task-out distribution for one fold."""
    cfg = _load_yaml(config_path)
    exp = _experiment_config(cfg, seed, order, preset)
    pools = _build_pools(cfg, seed)
    out_dir = Path(out)
    out_dir.mkdir(parents=True, exist_ok=True)
    dist = bench.build_distribution(pools, exp.target, fold, exp.folds, seed)
    in_channels = next(iter(pools.values()))[0].image.shape[-1]
    model = bench._fresh_model(exp, in_channels)
    meta_cfg = bench._meta_config(exp)
    try:
        if exp.method == "protoseg":
            protoseg.meta_train_proto(model, dist, meta_cfg, log_path=out_dir / "train_log.jsonl")
        else:
            weasel.meta_train(model, dist, meta_cfg, log_path=out_dir / "train_log.jsonl")
    except Exception as exc:
        click.echo(f"meta-training failed: {exc}", err=True)
        sys.exit(1)
    save_checkpoint(out_dir / "meta.pt", model)
    click.echo(f"checkpoint written to {out_dir / 'meta.pt'}")


@main.command()
@with_common_options
@click.option("--checkpoint", required=True, type=click.Path())
@click.option("--fold", default=0, show_default=True, type=int)
def tune(config_path, out, seed, device, order, preset, checkpoint, fold):
    """Fine-tune a meta-trained checkpoint on the few-shot sparse support."""
    if not Path(checkpoint).exists():
        click.echo(f"missing checkpoint: {checkpoint}", err=True)
        sys.exit(1)
    cfg = _load_yaml(config_path)
    exp = _experiment_config(cfg, seed, order, preset)
    pools = _build_pools(cfg, seed)
    out_dir = Path(out)
    out_dir.mkdir(parents=True, exist_ok=True)
    model = load_checkpoint(checkpoint)
    few_shot = bench.build_few_shot(
        pools, exp.target, fold, exp.folds, exp.shots, exp.sparsify, seed
    )
    try:
        weasel.fine_tune(
            model, few_shot, exp.tune_epochs, lr=exp.lr, weight_decay=exp.weight_decay, seed=seed
        )
    except Exception as exc:
        click.echo(f"tuning failed: {exc}", err=True)
        sys.exit(1)
    save_checkpoint(out_dir / "tuned.pt", model)
    click.echo(f"checkpoint written to {out_dir / 'tuned.pt'}")


@main.command()
@with_common_options
def eval(config_path, out, seed, device, order, preset):
    """Run the full leave-one-task-out experiment and write the report."""
    cfg = _load_yaml(config_path)
    exp = _experiment_config(cfg, seed, order, preset)
    pools = _build_pools(cfg, seed)
    out_dir = Path(out)
    out_dir.mkdir(parents=True, exist_ok=True)
    try:
        report = bench.run_experiment(exp, pools)
    except Exception as exc:
        click.echo(f"evaluation failed: {exc}", err=True)
        sys.exit(1)
    path = out_dir / f"report_{exp.method}_{exp.target}.json"
    path.write_text(report.to_json())
    click.echo(f"mean jaccard {report.mean:.3f} +/- {report.std:.3f} -> {path}")


@main.command()
@click.argument("report_files", nargs=-1, required=True, type=click.Path(exists=True))
@click.option("--out", required=True, type=click.Path(file_okay=False))
@click.option("--dense-report", type=click.Path(exists=True), default=None)
def report(report_files, out, dense_report):
    """Render score-by-setting and inputs-vs-score charts from report files."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out_dir = Path(out)
    out_dir.mkdir(parents=True, exist_ok=True)
    payloads = [json.loads(Path(p).read_text()) for p in report_files]
    dense = json.loads(Path(dense_report).read_text()) if dense_report else None

    fig, ax = plt.subplots(figsize=(7, 4))
    labels = [
        f"{p['method']}\n{p['provenance']['sparsify']['style']}" for p in payloads
    ]
    means = [p["mean"] for p in payloads]
    stds = [p["std"] for p in payloads]
    ax.bar(range(len(payloads)), means, yerr=stds, capsize=4)
    ax.set_xticks(range(len(payloads)), labels, fontsize=8)
    ax.set_ylabel("Jaccard")
    if dense:
        ax.axhline(dense["mean"], linestyle="--", color="gray", label="dense labels")
        ax.legend()
    fig.tight_layout()
    fig.savefig(out_dir / "scores_by_setting.png", dpi=150)
    plt.close(fig)

    # inputs-vs-score curve where reports share a single method/task
    methods = {p["method"] for p in payloads}
    targets = {p["target"] for p in payloads}
    if len(methods) == 1 and len(targets) == 1:
        rows = sorted(
            (
                {"inputs": p["mean_inputs"], "mean": p["mean"], "std": p["std"]}
                for p in payloads
            ),
            key=lambda r: r["inputs"],
        )
        fig, ax = plt.subplots(figsize=(6, 4))
        ax.errorbar(
            [r["inputs"] for r in rows],
            [r["mean"] for r in rows],
            yerr=[r["std"] for r in rows],
            marker="o",
        )
        if dense:
            ax.axhline(dense["mean"], linestyle="--", color="gray", label="dense labels")
            ax.legend()
        ax.set_xlabel("user inputs")
        ax.set_ylabel("Jaccard")
        fig.tight_layout()
        fig.savefig(out_dir / "inputs_vs_jaccard.png", dpi=150)
        plt.close(fig)
    click.echo(f"charts written to {out_dir}")


if __name__ == "__main__":
    main()
