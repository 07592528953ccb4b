"""Encoders, predictor and the Siamese wrapper that holds both.

``SiameseNet`` bundles the encoder f (backbone + projection head) and the predictor h.
Its floating-point state is the ParameterSet exchanged during federated training.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import torch
from torch import nn


class ConvBackbone(nn.Module):
    """Stack of conv3x3-BN-ReLU-maxpool blocks followed by global average pooling."""

    def __init__(self, in_channels: int = 3, widths: Sequence[int] = (32, 64, 128, 256)):
        super().__init__()
        layers = []
        c = in_channels
        for w in widths:
            layers += [nn.Conv2d(c, w, 3, padding=1, bias=False), nn.BatchNorm2d(w),
                       nn.ReLU(inplace=True), nn.MaxPool2d(2)]
            c = w
        self.body = nn.Sequential(*layers)
        self.out_dim = c

    def forward(self, x):
        return self.body(x).mean(dim=(2, 3))


def resnet18_backbone(in_channels: int = 3) -> nn.Module:
    """CIFAR-style ResNet-18: 3x3 stem, no max-pool, classifier removed."""
    from torchvision.models import resnet18

    net = resnet18(num_classes=10)
    net.conv1 = nn.Conv2d(in_channels, 64, 3, 1, 1, bias=False)
    net.maxpool = nn.Identity()
    net.out_dim = net.fc.in_features
    net.fc = nn.Identity()
    return net


class MLPBackbone(nn.Module):
    """Normalisation-free tanh MLP used as a tiny stub in tests."""

    def __init__(self, in_dim: int, hidden: int):
        super().__init__()
        self.fc = nn.Linear(in_dim, hidden)
        self.out_dim = hidden

    def forward(self, x):
        return torch.tanh(self.fc(x.flatten(1)))


class Encoder(nn.Module):
    """f: backbone followed by a projection head. ``features`` exposes the backbone output."""

    def __init__(self, backbone: nn.Module, projector: nn.Module, output_dim: int):
        super().__init__()
        self.backbone = backbone
        self.projector = projector
        self.output_dim = output_dim

    def features(self, x):
        return self.backbone(x)

    def forward(self, x):
        return self.projector(self.backbone(x))


def projection_head(in_dim: int, hidden: int, out_dim: int, layers: int = 2,
                    batch_norm: bool = True) -> nn.Module:
    mods: list[nn.Module] = []
    d = in_dim
    for _ in range(layers - 1):
        mods.append(nn.Linear(d, hidden, bias=not batch_norm))
        if batch_norm:
            mods.append(nn.BatchNorm1d(hidden))
        mods.append(nn.ReLU(inplace=True))
        d = hidden
    mods.append(nn.Linear(d, out_dim, bias=not batch_norm))
    if batch_norm:
        mods.append(nn.BatchNorm1d(out_dim))
    return nn.Sequential(*mods)


def predictor_head(dim: int, bottleneck: Optional[int] = None, batch_norm: bool = True) -> nn.Module:
    """h: d -> d/4 -> d bottleneck MLP."""
    hidden = bottleneck or max(1, dim // 4)
    mods: list[nn.Module] = [nn.Linear(dim, hidden, bias=not batch_norm)]
    if batch_norm:
        mods.append(nn.BatchNorm1d(hidden))
    mods += [nn.ReLU(inplace=True), nn.Linear(hidden, dim)]
    return nn.Sequential(*mods)


class SiameseNet(nn.Module):
    def __init__(self, encoder: Encoder, predictor: nn.Module):
        super().__init__()
        self.encoder = encoder
        self.predictor = predictor

    @property
    def output_dim(self) -> int:
        return self.encoder.output_dim

    def forward(self, x):
        z = self.encoder(x)
        return z, self.predictor(z)


@dataclass
class ModelConfig:
    """Architecture hyperparameters; also the checkpoint manifest."""

    arch: str = "conv4"                      # conv4 | resnet18 | mlp
    in_channels: int = 3
    widths: list = field(default_factory=lambda: [32, 64, 128, 256])
    in_dim: int = 8                          # mlp only
    hidden: int = 16                         # mlp only
    proj_dim: int = 128
    proj_hidden: int = 512
    proj_layers: int = 2
    pred_hidden: Optional[int] = None        # default proj_dim // 4
    batch_norm: bool = True
    dtype: str = "float32"

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


def build_model(cfg: ModelConfig, seed: Optional[int] = None) -> SiameseNet:
    if seed is not None:
        torch.manual_seed(seed)
    if cfg.arch == "conv4":
        backbone = ConvBackbone(cfg.in_channels, cfg.widths)
    elif cfg.arch == "resnet18":
        backbone = resnet18_backbone(cfg.in_channels)
    elif cfg.arch == "mlp":
        backbone = MLPBackbone(cfg.in_dim, cfg.hidden)
    else:
        raise ValueError(f"unknown arch {cfg.arch!r}")
    projector = projection_head(backbone.out_dim, cfg.proj_hidden, cfg.proj_dim,
                                cfg.proj_layers, cfg.batch_norm)
    net = SiameseNet(Encoder(backbone, projector, cfg.proj_dim),
                     predictor_head(cfg.proj_dim, cfg.pred_hidden, cfg.batch_norm))
    return net.to(getattr(torch, cfg.dtype))


def desk_model_config() -> ModelConfig:
    return ModelConfig()


def paper_model_config() -> ModelConfig:
    # ResNet-18 backbone; projection width follows the small-image SimSiam setup
    return ModelConfig(arch="resnet18", proj_dim=2048, proj_hidden=2048, pred_hidden=512)


def stub_model_config(in_dim: int = 6, hidden: int = 8, proj_dim: int = 4,
                      batch_norm: bool = False) -> ModelConfig:
    """Tiny double-precision model for gradient and equivalence checks."""
    return ModelConfig(arch="mlp", in_dim=in_dim, hidden=hidden, proj_dim=proj_dim,
                       proj_hidden=hidden, proj_layers=2, pred_hidden=max(2, proj_dim // 2),
                       batch_norm=batch_norm, dtype="float64")
