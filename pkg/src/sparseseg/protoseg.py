"""Episodic prototype training and prototype-based inference.

Each episode builds per-class prototypes from sparse support embeddings,
scores query pixels by distance softmax and takes one optimizer step on
the query loss. Inference needs no adaptation: prototypes from the
few-shot support directly classify query pixels.
"""

from __future__ import annotations

import json
import logging
import warnings
from pathlib import Path

import numpy as np
import torch

from .batching import dense_batch, image_batch, sparse_batch
from .data import FewShotTask, SegTask, TaskDistribution, sample_task_batch
from .losses import (
    MissingPrototypeError,
    compute_prototypes,
    proto_loss_from_features,
    proto_probabilities,
)
from .network import MiniUNet, save_checkpoint
from .weasel import MetaTrainConfig, _epoch_sparse_masks, make_optimizer

log = logging.getLogger(__name__)


def episode_step(
    model: MiniUNet,
    optimizer,
    support_images: torch.Tensor,
    support_sparse: torch.Tensor,
    query_images: torch.Tensor,
    query_masks: torch.Tensor,
    classes: list[int] | None = None,
) -> float:
    """One training episode; raises MissingPrototypeError when the sparse
    support leaves a declared class without labeled pixels."""
    if classes is None:
        classes = list(range(1, model.spec.classes + 1))
    model.train()
    support_feat = model.embed(support_images)
    protos = compute_prototypes(support_feat, support_sparse, classes=classes)
    query_feat = model.embed(query_images)
    loss = proto_loss_from_features(query_feat, protos, query_masks)
    optimizer.zero_grad()
    loss.backward()
    optimizer.step()
    return float(loss.detach())


def meta_train_proto(
    model: MiniUNet,
    dist: TaskDistribution,
    config: MetaTrainConfig,
    log_path: str | Path | None = None,
    checkpoint_dir: str | Path | None = None,
) -> MiniUNet:
    """Episodic loop over the task distribution; no tuning stage exists."""
    if not dist.tasks:
        raise ValueError("empty task distribution")
    optimizer = make_optimizer(model, config.beta, config.weight_decay)
    rng = np.random.default_rng(dist.sampler_seed)
    records = []
    skipped = 0
    batch = min(config.task_batch, len(dist.tasks))
    for epoch in range(config.meta_epochs):
        tasks = sample_task_batch(dist, batch, rng)
        losses = []
        for ti, task in enumerate(tasks):
            sup_idx = rng.choice(
                len(task.support), size=min(config.inner_batch, len(task.support)), replace=False
            )
            sup = [task.support[i] for i in sup_idx]
            qry_idx = rng.choice(
                len(task.query), size=min(config.inner_batch, len(task.query)), replace=False
            )
            qry = [task.query[i] for i in qry_idx]
            sparse = _epoch_sparse_masks(task, sup, config, epoch, ti)
            try:
                loss = episode_step(
                    model, optimizer, image_batch(sup), sparse, image_batch(qry), dense_batch(qry)
                )
            except MissingPrototypeError as exc:
                warnings.warn(f"skipping degenerate episode for {task.name!r}: {exc}")
                skipped += 1
                loss = float("nan")
            losses.append(loss)
        records.append({"epoch": epoch, "tasks": [t.name for t in tasks], "losses": losses})
        if checkpoint_dir and config.checkpoint_every and (epoch + 1) % config.checkpoint_every == 0:
            save_checkpoint(Path(checkpoint_dir) / f"proto_epoch{epoch + 1:05d}.pt", model)
        if epoch % max(1, config.meta_epochs // 10) == 0:
            finite = [l for l in losses if np.isfinite(l)]
            log.info("proto epoch %d mean loss %.4f", epoch, float(np.mean(finite)) if finite else float("nan"))
    if log_path:
        with open(log_path, "w") as fh:
            for rec in records:
                fh.write(json.dumps(rec) + "\n")
    model.training_log = records
    model.skipped_episodes = skipped
    return model


@torch.no_grad()
def predict(model: MiniUNet, few_shot: FewShotTask | SegTask) -> np.ndarray:
    """Argmax class maps (values 1..K) for the query, from support prototypes.

    Read-only: no parameter is updated. Raises MissingPrototypeError if a
    class lacks support labels, which the bench maps to a zero score.
    """
    model.eval()
    classes = list(range(1, model.spec.classes + 1))
    support_feat = model.embed(image_batch(few_shot.support))
    protos = compute_prototypes(support_feat, sparse_batch(few_shot.support), classes=classes)
    query_feat = model.embed(image_batch(few_shot.query))
    probs = proto_probabilities(query_feat, protos)
    pred_idx = probs.argmax(dim=1).numpy()
    class_arr = np.asarray(protos.classes)
    return class_arr[pred_idx]
