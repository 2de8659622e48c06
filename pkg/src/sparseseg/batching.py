"""Numpy sample <-> torch batch conversion helpers."""

from __future__ import annotations

import numpy as np
import torch

from .data import Sample


def image_batch(samples: list[Sample], dtype=torch.float32) -> torch.Tensor:
    """Stack sample images into an N x B x H x W tensor."""
    arr = np.stack([s.image for s in samples])
    return torch.from_numpy(arr).permute(0, 3, 1, 2).to(dtype)


def dense_batch(samples: list[Sample]) -> torch.Tensor:
    return torch.from_numpy(np.stack([s.dense_mask for s in samples])).long()


def sparse_batch(samples: list[Sample]) -> torch.Tensor:
    for s in samples:
        if s.sparse_mask is None:
            raise ValueError(f"sample {s.id!r} carries no sparse mask")
    return torch.from_numpy(np.stack([s.sparse_mask.labels for s in samples])).long()
