"""Compact encoder-decoder segmentation network with skip connections.

Three encoder blocks (each ending in 2x2 max-pool), a center block and
three decoder blocks; convolutions are zero-padded so only pooling and
transposed convolutions change spatial size. The embedding variant stops
before the final 1x1 classification convolution.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import torch
from torch import nn


@dataclass(frozen=True)
class NetworkSpec:
    in_channels: int
    classes: int
    widths: tuple[int, int, int] = (32, 64, 128)
    dropout: float = 0.1

    @property
    def embed_dim(self) -> int:
        return self.widths[0]


def _conv_block(cin: int, cout: int) -> list[nn.Module]:
    return [
        nn.Conv2d(cin, cout, 3, padding=1),
        nn.BatchNorm2d(cout, track_running_stats=False),
        nn.ReLU(inplace=True),
        nn.Conv2d(cout, cout, 3, padding=1),
        nn.BatchNorm2d(cout, track_running_stats=False),
        nn.ReLU(inplace=True),
    ]


class MiniUNet(nn.Module):
    """Segmentation model; ``embed`` exposes the pre-classifier features."""

    def __init__(self, spec: NetworkSpec):
        super().__init__()
        self.spec = spec
        w1, w2, w3 = spec.widths
        drop = nn.Dropout2d(spec.dropout)

        self.enc1 = nn.Sequential(*_conv_block(spec.in_channels, w1))
        self.enc2 = nn.Sequential(*_conv_block(w1, w2))
        self.enc3 = nn.Sequential(*_conv_block(w2, w3))
        self.pool = nn.MaxPool2d(2)
        self.center = nn.Sequential(
            drop, *_conv_block(w3, w3), nn.ConvTranspose2d(w3, w3, 2, stride=2)
        )
        self.dec3 = nn.Sequential(
            nn.Dropout2d(spec.dropout),
            *_conv_block(2 * w3, w2),
            nn.ConvTranspose2d(w2, w2, 2, stride=2),
        )
        self.dec2 = nn.Sequential(
            nn.Dropout2d(spec.dropout),
            *_conv_block(2 * w2, w1),
            nn.ConvTranspose2d(w1, w1, 2, stride=2),
        )
        self.dec1 = nn.Sequential(nn.Dropout2d(spec.dropout), *_conv_block(w1, w1))
        self.classifier = nn.Conv2d(w1, spec.classes, 1)
        self._init_weights()

    def _init_weights(self):
        for m in self.modules():
            if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
                nn.init.kaiming_uniform_(m.weight, nonlinearity="relu")
                if m.bias is not None:
                    nn.init.zeros_(m.bias)
            elif isinstance(m, nn.BatchNorm2d):
                nn.init.ones_(m.weight)
                nn.init.zeros_(m.bias)

    def _check_size(self, x: torch.Tensor):
        h, w = x.shape[-2:]
        if h % 8 or w % 8:
            raise ValueError(f"spatial size {h}x{w} must be divisible by 8")
        if x.shape[1] != self.spec.in_channels:
            raise ValueError(
                f"expected {self.spec.in_channels} input channels, got {x.shape[1]}"
            )

    def embed(self, x: torch.Tensor) -> torch.Tensor:
        self._check_size(x)
        e1 = self.enc1(x)
        e2 = self.enc2(self.pool(e1))
        e3 = self.enc3(self.pool(e2))
        c = self.center(self.pool(e3))
        d3 = self.dec3(torch.cat([c, e3], dim=1))
        d2 = self.dec2(torch.cat([d3, e2], dim=1))
        return self.dec1(d2)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.classifier(self.embed(x))


def forward_segment(model: MiniUNet, params: dict | None, x: torch.Tensor) -> torch.Tensor:
    """Class logits; uses ``params`` in place of the model's own when given."""
    if params is None:
        return model(x)
    return torch.func.functional_call(model, params, (x,))


class _EmbedCall(nn.Module):
    """Adapter so functional_call can route through MiniUNet.embed."""

    def __init__(self, model: MiniUNet):
        super().__init__()
        self.model = model

    def forward(self, x):
        return self.model.embed(x)


def forward_embed(model: MiniUNet, params: dict | None, x: torch.Tensor) -> torch.Tensor:
    """Pre-classifier feature maps (N x embed_dim x H x W)."""
    if params is None:
        return model.embed(x)
    prefixed = {f"model.{name}": value for name, value in params.items()}
    return torch.func.functional_call(_EmbedCall(model), prefixed, (x,))


def save_checkpoint(path, model: MiniUNet):
    torch.save({"spec": asdict(model.spec), "state": model.state_dict()}, path)


def load_checkpoint(path) -> MiniUNet:
    payload = torch.load(path, weights_only=False)
    spec_dict = dict(payload["spec"])
    spec_dict["widths"] = tuple(spec_dict["widths"])
    spec = NetworkSpec(**spec_dict)
    model = MiniUNet(spec)
    reference = model.state_dict()
    for name, tensor in payload["state"].items():
        if name not in reference:
            raise ValueError(f"unexpected parameter {name!r} in checkpoint")
        if tuple(tensor.shape) != tuple(reference[name].shape):
            raise ValueError(
                f"shape mismatch for {name!r}: checkpoint {tuple(tensor.shape)}, "
                f"expected {tuple(reference[name].shape)}"
            )
    model.load_state_dict(payload["state"])
    return model
