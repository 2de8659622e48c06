"""Baselines, Jaccard metric, leave-one-task-out runs, synthetic tasks.

The bench drives the full protocol: per fold it assembles the meta-task
distribution (target task excluded), trains the requested method, tunes
on the sparse few-shot support and scores the query set. The synthetic
shape meta-dataset keeps end-to-end runs at desk scale.
"""

from __future__ import annotations

import dataclasses
import json
import logging
from dataclasses import asdict, dataclass

import numpy as np
import torch

from . import protoseg, weasel
from .batching import image_batch
from .data import (
    BACKGROUND,
    FOREGROUND,
    FewShotTask,
    Sample,
    SegTask,
    TaskDistribution,
    make_support,
    split_folds,
)
from .losses import MissingPrototypeError
from .network import MiniUNet, NetworkSpec
from .sparsify import SparsifyConfig, apply_config, count_user_inputs
from .weasel import MetaTrainConfig

log = logging.getLogger(__name__)

METHODS = ("weasel", "protoseg", "finetune", "scratch")

# per-method (pre/meta-training epochs, tuning epochs) plus the task batch
PRESETS = {
    "medical": {
        "weasel": (2000, 80),
        "protoseg": (2000, 0),
        "finetune": (200, 80),
        "scratch": (0, 80),
        "task_batch": 6,
    },
    "remote-sensing": {
        "weasel": (200, 40),
        "protoseg": (200, 0),
        "finetune": (100, 80),
        "scratch": (0, 100),
        "task_batch": 4,
    },
    "synthetic": {
        "weasel": (100, 40),
        "protoseg": (100, 0),
        "finetune": (100, 40),
        "scratch": (0, 40),
        "task_batch": 3,
    },
}


def jaccard(pred: np.ndarray, gt: np.ndarray, class_id: int) -> float:
    """Intersection over union of the class-id pixel sets.

    Both sets empty -> 1.0 (class absent and correctly not predicted).
    """
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs gt {gt.shape}")
    p, g = pred == class_id, gt == class_id
    union = int((p | g).sum())
    if union == 0:
        return 1.0
    return float((p & g).sum()) / union


@dataclass
class ExperimentConfig:
    method: str
    shots: int
    sparsify: SparsifyConfig
    target: str  # held-out (dataset) task name
    folds: int = 5
    meta_epochs: int = 100
    tune_epochs: int = 40
    pre_epochs: int = 100  # finetune baseline source training
    task_batch: int = 3
    inner_batch: int = 5
    alpha: float = 1e-3
    lr: float = 1e-3
    weight_decay: float = 5e-4
    order: str = "second"
    source_task: str | None = None  # finetune baseline source
    seed: int = 0
    widths: tuple[int, int, int] = (32, 64, 128)
    dropout: float = 0.1

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; expected one of {METHODS}")
        if self.method == "finetune" and not self.source_task:
            raise ValueError("finetune baseline needs a source_task")

    @classmethod
    def with_preset(cls, preset: str, **kwargs) -> "ExperimentConfig":
        table = PRESETS[preset]
        method = kwargs["method"]
        pre, tune = table[method]
        defaults = dict(
            meta_epochs=pre if method in ("weasel", "protoseg") else kwargs.get("meta_epochs", 0),
            pre_epochs=pre if method == "finetune" else 0,
            tune_epochs=tune,
            task_batch=table["task_batch"],
        )
        defaults.update(kwargs)
        return cls(**defaults)


@dataclass
class MetricReport:
    method: str
    target: str
    per_fold: list[float]
    user_inputs: list[int]
    errors: list[str]
    provenance: dict

    @property
    def mean(self) -> float:
        return float(np.mean(self.per_fold))

    @property
    def std(self) -> float:
        return float(np.std(self.per_fold))

    @property
    def mean_inputs(self) -> float:
        return float(np.mean(self.user_inputs)) if self.user_inputs else float("nan")

    def to_json(self) -> str:
        payload = asdict(self)
        payload.update(mean=self.mean, std=self.std, mean_inputs=self.mean_inputs)
        return json.dumps(payload, sort_keys=True)


# --------------------------------------------------------------------------
# synthetic shape meta-dataset


@dataclass
class ShapeFamily:
    name: str
    shape: str  # disk | rectangle | ring
    n_images: int = 40
    fg_level: float = 1.0
    bg_level: float = 0.0
    noise: float = 0.25


@dataclass
class SynthSpec:
    families: list[ShapeFamily]
    heldout: ShapeFamily
    image_size: int = 64

    def __post_init__(self):
        names = [f.name for f in self.families]
        if len(set(names)) != len(names):
            raise ValueError("duplicate family names")
        if self.heldout.name in names:
            raise ValueError("held-out family must not appear among the sources")
        allowed = {"disk", "rectangle", "ring"}
        for fam in self.families + [self.heldout]:
            if fam.shape not in allowed:
                raise ValueError(f"unknown shape {fam.shape!r}; expected one of {sorted(allowed)}")


def _shape_mask(shape: str, size: int, rng: np.random.Generator) -> np.ndarray:
    yy, xx = np.mgrid[:size, :size]
    cy, cx = rng.integers(size // 4, 3 * size // 4, size=2)
    r = int(rng.integers(size // 8, size // 4))
    if shape == "disk":
        return (yy - cy) ** 2 + (xx - cx) ** 2 <= r**2
    if shape == "ring":
        dist2 = (yy - cy) ** 2 + (xx - cx) ** 2
        inner = max(2, r // 2)
        return (dist2 <= r**2) & (dist2 >= inner**2)
    h, w = int(rng.integers(size // 8, size // 4)), int(rng.integers(size // 8, size // 4))
    return (np.abs(yy - cy) <= h) & (np.abs(xx - cx) <= w)


def _family_samples(fam: ShapeFamily, size: int, rng: np.random.Generator) -> list[Sample]:
    samples = []
    for i in range(fam.n_images):
        fg = _shape_mask(fam.shape, size, rng)
        if not fg.any() or fg.all():  # degenerate draw; retry deterministically
            fg = _shape_mask(fam.shape, size, rng)
        image = fam.bg_level + fam.noise * rng.standard_normal((size, size))
        image = image + (fam.fg_level - fam.bg_level) * fg
        dense = np.where(fg, FOREGROUND, BACKGROUND).astype(np.int64)
        samples.append(
            Sample(image=image[..., None].astype(np.float32), dense_mask=dense, id=f"{fam.name}/{i:03d}")
        )
    return samples


def synth_meta_dataset(spec: SynthSpec, seed: int = 0) -> dict[str, list[Sample]]:
    """Deterministic per-family sample pools keyed by family name
    (held-out family included; exclusion happens at distribution build)."""
    rng = np.random.default_rng(seed)
    pools = {}
    for fam in spec.families + [spec.heldout]:
        pools[fam.name] = _family_samples(fam, spec.image_size, rng)
    return pools


def build_distribution(
    pools: dict[str, list[Sample]],
    target: str,
    fold: int,
    n_folds: int,
    seed: int,
) -> TaskDistribution:
    """Leave-one-task-out distribution for one fold: the target family is
    excluded entirely; each source contributes one task with its fold's
    train partition as support and validation partition as query."""
    tasks = []
    for name, samples in sorted(pools.items()):
        if name == target:
            continue
        train, val = split_folds(samples, n_folds, seed)[fold]
        tasks.append(SegTask(support=train, query=val, target_class=FOREGROUND, name=name))
    return TaskDistribution(tasks=tasks, sampler_seed=seed * 1000 + fold)


def build_few_shot(
    pools: dict[str, list[Sample]],
    target: str,
    fold: int,
    n_folds: int,
    shots: int,
    sparsify: SparsifyConfig,
    seed: int,
) -> FewShotTask:
    train, val = split_folds(pools[target], n_folds, seed)[fold]
    base = SegTask(support=train, query=val, target_class=FOREGROUND, name=target)
    rng = np.random.default_rng(seed * 7919 + fold)

    def sparsifier(sample: Sample):
        return apply_config(sample.dense_mask, sparsify, rng=rng, image=sample.image)

    return make_support(base, shots, rng, sparsifier=sparsifier)


# --------------------------------------------------------------------------
# baselines and method runners


def _fresh_model(config: ExperimentConfig, in_channels: int, seed_offset: int = 0) -> MiniUNet:
    torch.manual_seed(config.seed + seed_offset)
    spec = NetworkSpec(
        in_channels=in_channels, classes=2, widths=config.widths, dropout=config.dropout
    )
    return MiniUNet(spec)


def train_from_scratch(few_shot: FewShotTask, epochs: int, config: ExperimentConfig) -> MiniUNet:
    """Random init, then selective-cross-entropy training on the support."""
    model = _fresh_model(config, few_shot.support[0].image.shape[-1])
    return weasel.fine_tune(
        model, few_shot, epochs, lr=config.lr, weight_decay=config.weight_decay, seed=config.seed
    )


def _supervised_train(model: MiniUNet, task: SegTask, epochs: int, config: ExperimentConfig):
    """Dense supervised training on a source task's support partition."""
    from .losses import cross_entropy
    from .batching import dense_batch

    optimizer = weasel.make_optimizer(model, config.lr, config.weight_decay)
    images = image_batch(task.support)
    dense = dense_batch(task.support)
    rng = np.random.default_rng(config.seed)
    model.train()
    for _ in range(epochs):
        order = rng.permutation(len(task.support))
        for start in range(0, len(order), config.inner_batch):
            idx = order[start : start + config.inner_batch]
            optimizer.zero_grad()
            loss = cross_entropy(model(images[idx]), dense[idx])
            loss.backward()
            optimizer.step()
    return model


def finetune_baseline(
    source: SegTask, few_shot: FewShotTask, pre_epochs: int, tune_epochs: int, config: ExperimentConfig
) -> MiniUNet:
    """Dense pre-training on one source task, then sparse tuning."""
    if source.name == few_shot.name:
        raise ValueError("finetune source must differ from the few-shot task")
    model = _fresh_model(config, few_shot.support[0].image.shape[-1])
    _supervised_train(model, source, pre_epochs, config)
    return weasel.fine_tune(
        model, few_shot, tune_epochs, lr=config.lr, weight_decay=config.weight_decay, seed=config.seed
    )


@torch.no_grad()
def predict_dense(model: MiniUNet, samples: list[Sample]) -> np.ndarray:
    """Per-pixel argmax class maps (values 1..K) from the segmenter head."""
    model.eval()
    logits = model(image_batch(samples))
    return logits.argmax(dim=1).numpy() + 1


def score_query(pred_masks: np.ndarray, query: list[Sample], class_id: int = FOREGROUND) -> float:
    """Mean Jaccard over the query images for one class."""
    scores = [jaccard(pred_masks[i], s.dense_mask, class_id) for i, s in enumerate(query)]
    return float(np.mean(scores))


def _meta_config(config: ExperimentConfig) -> MetaTrainConfig:
    return MetaTrainConfig(
        alpha=config.alpha,
        beta=config.lr,
        meta_epochs=config.meta_epochs,
        task_batch=config.task_batch,
        inner_batch=config.inner_batch,
        order=config.order,
        weight_decay=config.weight_decay,
        seed=config.seed,
        sparsify=config.sparsify,
    )


def run_fold(
    config: ExperimentConfig,
    pools: dict[str, list[Sample]],
    fold: int,
) -> tuple[float, int, str | None]:
    """Train, predict and score one fold; returns (jaccard, inputs, error)."""
    few_shot = build_few_shot(
        pools, config.target, fold, config.folds, config.shots, config.sparsify, config.seed
    )
    try:
        inputs = count_user_inputs(
            [s.sparse_mask for s in few_shot.support], config.sparsify.style, n=config.sparsify.n
        )
    except ValueError:
        inputs = 0  # contours/skeletons: not countable

    in_channels = few_shot.support[0].image.shape[-1]
    error = None
    try:
        if config.method == "scratch":
            model = train_from_scratch(few_shot, config.tune_epochs, config)
            pred = predict_dense(model, few_shot.query)
        elif config.method == "finetune":
            dist = build_distribution(pools, config.target, fold, config.folds, config.seed)
            by_name = {t.name: t for t in dist.tasks}
            source = by_name[config.source_task]
            model = finetune_baseline(
                source, few_shot, config.pre_epochs, config.tune_epochs, config
            )
            pred = predict_dense(model, few_shot.query)
        elif config.method == "weasel":
            dist = build_distribution(pools, config.target, fold, config.folds, config.seed)
            model = _fresh_model(config, in_channels)
            weasel.meta_train(model, dist, _meta_config(config))
            weasel.fine_tune(
                model,
                few_shot,
                config.tune_epochs,
                lr=config.lr,
                weight_decay=config.weight_decay,
                seed=config.seed,
            )
            pred = predict_dense(model, few_shot.query)
        else:  # protoseg
            dist = build_distribution(pools, config.target, fold, config.folds, config.seed)
            model = _fresh_model(config, in_channels)
            protoseg.meta_train_proto(model, dist, _meta_config(config))
            pred = protoseg.predict(model, few_shot)
    except MissingPrototypeError as exc:
        # the degenerate-support pathway: the class cannot be predicted
        return 0.0, inputs, str(exc)
    return score_query(pred, few_shot.query), inputs, error


def run_experiment(config: ExperimentConfig, pools: dict[str, list[Sample]]) -> MetricReport:
    """Leave-one-task-out evaluation across all folds."""
    if config.target not in pools:
        raise ValueError(f"target {config.target!r} not among datasets {sorted(pools)}")
    per_fold, inputs, errors = [], [], []
    for fold in range(config.folds):
        score, n_inputs, error = run_fold(config, pools, fold)
        per_fold.append(score)
        inputs.append(n_inputs)
        if error:
            errors.append(f"fold {fold}: {error}")
        log.info("%s fold %d: jaccard %.3f", config.method, fold, score)
    provenance = asdict(config)
    provenance["sparsify"] = asdict(config.sparsify)
    return MetricReport(
        method=config.method,
        target=config.target,
        per_fold=per_fold,
        user_inputs=inputs,
        errors=errors,
        provenance=provenance,
    )


def label_efficiency_curve(reports: list[MetricReport]) -> list[dict]:
    """Rows of (inputs, mean jaccard, deviation), ascending by inputs."""
    if not reports:
        return []
    methods = {r.method for r in reports}
    targets = {r.target for r in reports}
    if len(methods) > 1 or len(targets) > 1:
        raise ValueError("label-efficiency rows must share one method and one task")
    rows = [
        {"inputs": r.mean_inputs, "mean_jaccard": r.mean, "std_jaccard": r.std}
        for r in reports
    ]
    return sorted(rows, key=lambda row: row["inputs"])
