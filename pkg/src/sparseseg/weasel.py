"""Bilevel meta-training: sparse-loss inner step, dense-loss outer step.

The inner update is one plain gradient-descent step on the selective
cross-entropy of a task's sparse support; the outer step backpropagates
the dense query loss through that update (second-order by default) and
applies Adam. Fine-tuning afterwards touches only the few-shot support.
"""

from __future__ import annotations

import json
import logging
import warnings
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .batching import dense_batch, image_batch, sparse_batch
from .data import FewShotTask, TaskDistribution, sample_task_batch
from .losses import AllUnknownError, cross_entropy, selective_cross_entropy
from .network import MiniUNet, forward_segment, save_checkpoint
from .sparsify import SparsifyConfig, apply_config

log = logging.getLogger(__name__)

ADAM_BETA1 = 0.9  # first-moment coefficient ("momentum")
WEIGHT_DECAY = 5e-4


@dataclass
class MetaTrainConfig:
    alpha: float = 1e-3  # inner step size
    beta: float = 1e-3  # outer (Adam) learning rate
    meta_epochs: int = 100
    task_batch: int = 4
    inner_batch: int = 5
    order: str = "second"
    weight_decay: float = WEIGHT_DECAY
    seed: int = 0
    checkpoint_every: int = 0  # epochs; 0 disables
    sparsify: SparsifyConfig = field(default_factory=lambda: SparsifyConfig(style="points"))

    def __post_init__(self):
        if self.alpha < 0 or self.beta <= 0:
            raise ValueError("step sizes must be positive (alpha may be 0 in tests)")
        if self.task_batch < 1:
            raise ValueError("task_batch must be >= 1")
        if self.order not in ("second", "first"):
            raise ValueError("order must be 'second' or 'first'")


def gradient_step(
    params: dict[str, torch.Tensor], loss: torch.Tensor, lr: float, create_graph: bool
) -> dict[str, torch.Tensor]:
    """One explicit gradient-descent step, optionally keeping the graph so
    later gradients flow through the update."""
    names = list(params)
    grads = torch.autograd.grad(loss, [params[n] for n in names], create_graph=create_graph)
    return {n: params[n] - lr * g for n, g in zip(names, grads)}


def inner_adapt(
    model: MiniUNet,
    params: dict[str, torch.Tensor],
    support_images: torch.Tensor,
    support_sparse: torch.Tensor,
    alpha: float,
    second_order: bool = True,
) -> dict[str, torch.Tensor]:
    """Task adaptation: one selective-cross-entropy step on the support."""
    loss = selective_cross_entropy(forward_segment(model, params, support_images), support_sparse)
    return gradient_step(params, loss, alpha, create_graph=second_order)


def meta_step(model: MiniUNet, optimizer, task_batches, config: MetaTrainConfig):
    """One meta-update over a batch of (support, query) tensor tuples.

    Each tuple is (support_images, support_sparse, query_images, query_dense).
    Returns per-task outer losses; degenerate tasks are skipped.
    """
    params = dict(model.named_parameters())
    second = config.order == "second"
    total = None
    outer_losses = []
    for sup_x, sup_sparse, qry_x, qry_dense in task_batches:
        try:
            adapted = inner_adapt(model, params, sup_x, sup_sparse, config.alpha, second)
        except AllUnknownError:
            warnings.warn("skipping task with all-unknown support in meta step")
            outer_losses.append(float("nan"))
            continue
        qry_loss = cross_entropy(forward_segment(model, adapted, qry_x), qry_dense)
        outer_losses.append(float(qry_loss.detach()))
        total = qry_loss if total is None else total + qry_loss
    if total is not None:
        optimizer.zero_grad()
        grads = torch.autograd.grad(total, [params[n] for n in params])
        for (name, p), g in zip(params.items(), grads):
            p.grad = g
        optimizer.step()
    return outer_losses


def make_optimizer(model: torch.nn.Module, lr: float, weight_decay: float = WEIGHT_DECAY):
    return torch.optim.Adam(
        model.parameters(), lr=lr, betas=(ADAM_BETA1, 0.999), weight_decay=weight_decay
    )


def _epoch_sparse_masks(task, samples, config: MetaTrainConfig, epoch: int, task_idx: int):
    """Fresh sparse supports each epoch under a derived, reproducible seed."""
    key = f"{config.seed}|{config.sparsify.seed}|{epoch}|{task_idx}|{task.name}".encode()
    seed = zlib.crc32(key)  # stable across processes, unlike hash()
    rng = np.random.default_rng(seed)
    masks = []
    for s in samples:
        masks.append(apply_config(s.dense_mask, config.sparsify, rng=rng, image=s.image).labels)
    return torch.from_numpy(np.stack(masks)).long()


def meta_train(
    model: MiniUNet,
    dist: TaskDistribution,
    config: MetaTrainConfig,
    log_path: str | Path | None = None,
    checkpoint_dir: str | Path | None = None,
) -> MiniUNet:
    """Run the full meta-training loop over the task distribution."""
    if not dist.tasks:
        raise ValueError("empty task distribution")
    optimizer = make_optimizer(model, config.beta, config.weight_decay)
    rng = np.random.default_rng(dist.sampler_seed)
    records = []
    batch = min(config.task_batch, len(dist.tasks))
    for epoch in range(config.meta_epochs):
        tasks = sample_task_batch(dist, batch, rng)
        batches = []
        for ti, task in enumerate(tasks):
            sup_idx = rng.choice(
                len(task.support), size=min(config.inner_batch, len(task.support)), replace=False
            )
            sup = [task.support[i] for i in sup_idx]
            qry_idx = rng.choice(
                len(task.query), size=min(config.inner_batch, len(task.query)), replace=False
            )
            qry = [task.query[i] for i in qry_idx]
            batches.append(
                (
                    image_batch(sup),
                    _epoch_sparse_masks(task, sup, config, epoch, ti),
                    image_batch(qry),
                    dense_batch(qry),
                )
            )
        losses = meta_step(model, optimizer, batches, config)
        records.append({"epoch": epoch, "tasks": [t.name for t in tasks], "outer_losses": losses})
        if checkpoint_dir and config.checkpoint_every and (epoch + 1) % config.checkpoint_every == 0:
            save_checkpoint(Path(checkpoint_dir) / f"meta_epoch{epoch + 1:05d}.pt", model)
        if epoch % max(1, config.meta_epochs // 10) == 0:
            log.info("meta epoch %d mean outer loss %.4f", epoch, float(np.nanmean(losses)))
    if log_path:
        with open(log_path, "w") as fh:
            for rec in records:
                fh.write(json.dumps(rec) + "\n")
    model.training_log = records
    return model


def fine_tune(
    model: MiniUNet,
    few_shot: FewShotTask,
    epochs: int,
    lr: float = 1e-3,
    weight_decay: float = WEIGHT_DECAY,
    batch_size: int = 5,
    seed: int = 0,
) -> MiniUNet:
    """Adapt to the few-shot task on its sparse support only.

    The query set is never read here; epochs=0 is a no-op.
    """
    if epochs == 0:
        return model
    images = image_batch(few_shot.support)
    sparse = sparse_batch(few_shot.support)
    if not (sparse > 0).any():
        raise AllUnknownError("few-shot support has no labeled pixels")
    optimizer = make_optimizer(model, lr, weight_decay)
    rng = np.random.default_rng(seed)
    model.train()
    for _ in range(epochs):
        order = rng.permutation(len(few_shot.support))
        for start in range(0, len(order), batch_size):
            idx = order[start : start + batch_size]
            sel_sparse = sparse[idx]
            if not (sel_sparse > 0).any():
                continue
            optimizer.zero_grad()
            loss = selective_cross_entropy(model(images[idx]), sel_sparse)
            loss.backward()
            optimizer.step()
    return model
