"""Segmentation losses and prototype arithmetic.

Mask convention: class ids 1..K, 0 = unknown. Logit/feature tensors are
channel-first (N x K x H x W / N x C x H x W). All softmax paths go
through log-sum-exp for stability.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F


class AllUnknownError(ValueError):
    """No labeled pixel is available to compute a selective loss."""


class MissingPrototypeError(ValueError):
    """A declared class has no labeled pixel to build its prototype from."""

    def __init__(self, class_id: int):
        super().__init__(f"no labeled pixels for class {class_id}; prototype undefined")
        self.class_id = class_id


@dataclass
class PrototypeSet:
    """Per-class mean embeddings c_k with their supporting pixel counts."""

    vectors: dict[int, torch.Tensor]
    counts: dict[int, int]

    @property
    def classes(self) -> list[int]:
        return sorted(self.vectors)

    def stacked(self) -> torch.Tensor:
        return torch.stack([self.vectors[k] for k in self.classes])


def _as_class_index(masks: torch.Tensor) -> torch.Tensor:
    return masks.long() - 1


def cross_entropy(logits: torch.Tensor, dense_masks: torch.Tensor) -> torch.Tensor:
    """Pixel-mean cross-entropy per image, averaged over the batch."""
    if logits.shape[0] != dense_masks.shape[0] or logits.shape[-2:] != dense_masks.shape[-2:]:
        raise ValueError(f"shape mismatch: logits {tuple(logits.shape)} vs masks {tuple(dense_masks.shape)}")
    if (dense_masks == 0).any():
        raise ValueError("dense masks must not contain unknown (0) pixels")
    per_pixel = F.cross_entropy(logits, _as_class_index(dense_masks), reduction="none")
    return per_pixel.flatten(1).mean(dim=1).mean()


def selective_cross_entropy(logits: torch.Tensor, sparse_masks: torch.Tensor) -> torch.Tensor:
    """Cross-entropy over labeled pixels only, divided by their total count.

    Unknown pixels contribute exactly zero to the value and the gradient.
    """
    if logits.shape[0] != sparse_masks.shape[0] or logits.shape[-2:] != sparse_masks.shape[-2:]:
        raise ValueError(f"shape mismatch: logits {tuple(logits.shape)} vs masks {tuple(sparse_masks.shape)}")
    labeled = sparse_masks > 0
    n = int(labeled.sum())
    if n == 0:
        raise AllUnknownError("selective cross-entropy needs at least one labeled pixel")
    log_probs = F.log_softmax(logits, dim=1)
    flat = log_probs.permute(0, 2, 3, 1)[labeled]  # n x K
    targets = _as_class_index(sparse_masks[labeled])
    return -flat.gather(1, targets.unsqueeze(1)).sum() / n


def compute_prototypes(
    features: torch.Tensor | list[torch.Tensor],
    masks: torch.Tensor | list[torch.Tensor],
    classes: list[int] | None = None,
) -> PrototypeSet:
    """Global masked average pooling across the whole support set.

    Feature vectors of class-k pixels are summed over every image first
    and divided by the global pixel count N_k, not averaged per image.
    """
    if isinstance(features, torch.Tensor):
        features = [features]
    if isinstance(masks, torch.Tensor):
        masks = [masks]
    if len(features) != len(masks):
        raise ValueError("features and masks must align one-to-one")

    present: set[int] = set()
    for m in masks:
        present |= {int(v) for v in torch.unique(m).tolist() if v > 0}
    wanted = sorted(present if classes is None else classes)

    dim = features[0].shape[1]
    sums = {k: torch.zeros(dim, dtype=features[0].dtype, device=features[0].device) for k in wanted}
    counts = {k: 0 for k in wanted}
    for feat, mask in zip(features, masks):
        if feat.shape[0] != mask.shape[0] or feat.shape[-2:] != mask.shape[-2:]:
            raise ValueError("feature/mask spatial shapes disagree")
        flat_feat = feat.permute(0, 2, 3, 1).reshape(-1, dim)
        flat_mask = mask.reshape(-1)
        for k in wanted:
            sel = flat_mask == k
            n_k = int(sel.sum())
            if n_k:
                sums[k] = sums[k] + flat_feat[sel].sum(dim=0)
                counts[k] += n_k
    for k in wanted:
        if counts[k] == 0:
            raise MissingPrototypeError(k)
    vectors = {k: sums[k] / counts[k] for k in wanted}
    return PrototypeSet(vectors=vectors, counts=counts)


def _neg_sq_distances(features: torch.Tensor, protos: PrototypeSet) -> torch.Tensor:
    """-||f - c_k||^2 per pixel and class, shape N x K x H x W."""
    stacked = protos.stacked()  # K x C
    diffs = features.unsqueeze(1) - stacked.view(1, len(protos.classes), -1, 1, 1)
    return -(diffs**2).sum(dim=2)


def proto_probabilities(features: torch.Tensor, protos: PrototypeSet) -> torch.Tensor:
    """Softmax over negative squared distances to each prototype."""
    return F.softmax(_neg_sq_distances(features, protos), dim=1)


def proto_log_probabilities(features: torch.Tensor, protos: PrototypeSet) -> torch.Tensor:
    return F.log_softmax(_neg_sq_distances(features, protos), dim=1)


def _selective_nll(log_probs: torch.Tensor, masks: torch.Tensor, classes: list[int]) -> torch.Tensor:
    """Per-image sum of -log p(true class) at labeled pixels, batch-averaged."""
    labeled = masks > 0
    if not bool(labeled.any()):
        raise AllUnknownError("prototype loss needs at least one labeled query pixel")
    class_pos = {k: i for i, k in enumerate(classes)}
    index = torch.zeros_like(masks, dtype=torch.long)
    for k, i in class_pos.items():
        index[masks == k] = i
    picked = log_probs.gather(1, index.unsqueeze(1)).squeeze(1)
    per_image = -(picked * labeled.to(picked.dtype)).flatten(1).sum(dim=1)
    return per_image.mean()


def proto_loss(probs: torch.Tensor, query_masks: torch.Tensor, classes: list[int] | None = None) -> torch.Tensor:
    """Episodic objective on precomputed probabilities (dense or sparse masks)."""
    if classes is None:
        classes = list(range(1, probs.shape[1] + 1))
    return _selective_nll(torch.log(probs.clamp_min(torch.finfo(probs.dtype).tiny)), query_masks, classes)


def proto_loss_from_features(
    features: torch.Tensor, protos: PrototypeSet, query_masks: torch.Tensor
) -> torch.Tensor:
    """Numerically stable fused path used during episodic training."""
    return _selective_nll(proto_log_probabilities(features, protos), query_masks, protos.classes)
