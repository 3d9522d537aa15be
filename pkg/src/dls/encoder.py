"""Spectrogram encoders producing unit-norm embeddings, and classifier heads for fine-tuning."""

from __future__ import annotations

import copy
from dataclasses import asdict, dataclass
from typing import Callable

import torch
import torch.nn as nn
import torch.nn.functional as F

ARCHITECTURES: dict[str, Callable[..., "Backbone"]] = {}


@dataclass(frozen=True)
class EncoderSpec:
    architecture: str = "tiny-cnn"
    embedding_dim: int = 128
    input_channels: int = 3
    width: int = 16

    def __post_init__(self):
        if self.embedding_dim < 1:
            raise ValueError(f"embedding_dim must be positive, got {self.embedding_dim}")
        if self.input_channels not in (3, 6):
            raise ValueError(f"input_channels must be 3 (mono) or 6 (stereo), got {self.input_channels}")
        if self.architecture not in ARCHITECTURES:
            raise ValueError(
                f"unknown architecture {self.architecture!r}; known: {sorted(ARCHITECTURES)}"
            )

    def to_dict(self) -> dict:
        return asdict(self)


def register_architecture(name: str):
    """Register a backbone factory ``f(input_channels, width) -> Backbone`` under ``name``."""

    def deco(factory):
        ARCHITECTURES[name] = factory
        return factory

    return deco


class Backbone(nn.Module):
    """Maps ``[B, C, F, T]`` spectrograms to pooled ``[B, out_features]`` features."""

    out_features: int


def _conv_block(cin, cout, stride):
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, stride=stride, padding=1, bias=False),
        nn.BatchNorm2d(cout),
        nn.ReLU(inplace=True),
    )


@register_architecture("tiny-cnn")
class TinyCNN(Backbone):
    def __init__(self, input_channels: int = 3, width: int = 16):
        super().__init__()
        widths = [width, 2 * width, 4 * width, 8 * width]
        blocks, cin = [], input_channels
        for w in widths:
            blocks.append(_conv_block(cin, w, stride=2))
            cin = w
        self.blocks = nn.Sequential(*blocks)
        self.out_features = cin

    def forward(self, x):
        return self.blocks(x).mean(dim=(2, 3))


class _BasicBlock(nn.Module):
    def __init__(self, cin, cout, stride):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, 1, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(cout)
        self.short = None
        if stride != 1 or cin != cout:
            self.short = nn.Sequential(nn.Conv2d(cin, cout, 1, stride, bias=False), nn.BatchNorm2d(cout))

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return F.relu(out + (x if self.short is None else self.short(x)))


@register_architecture("residual-large")
class ResidualBackbone(Backbone):
    """ResNet-18-shaped backbone; a plug-in for runs with real benchmark data."""

    def __init__(self, input_channels: int = 3, width: int = 64):
        super().__init__()
        self.stem = nn.Sequential(
            nn.Conv2d(input_channels, width, 7, 2, 3, bias=False),
            nn.BatchNorm2d(width),
            nn.ReLU(inplace=True),
            nn.MaxPool2d(3, 2, 1),
        )
        layers, cin = [], width
        for i, mult in enumerate((1, 2, 4, 8)):
            cout = width * mult
            stride = 1 if i == 0 else 2
            layers += [_BasicBlock(cin, cout, stride), _BasicBlock(cout, cout, 1)]
            cin = cout
        self.layers = nn.Sequential(*layers)
        self.out_features = cin

    def forward(self, x):
        return self.layers(self.stem(x)).mean(dim=(2, 3))


def _he_init(module: nn.Module, generator: torch.Generator) -> None:
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.Linear)):
            fan_in = m.weight[0].numel()
            with torch.no_grad():
                m.weight.copy_(torch.randn(m.weight.shape, generator=generator) * (2.0 / fan_in) ** 0.5)
                if m.bias is not None:
                    m.bias.zero_()
        elif isinstance(m, nn.BatchNorm2d):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)


class Encoder(nn.Module):
    """Backbone, linear projection to ``embedding_dim``, then L2 normalization."""

    def __init__(self, spec: EncoderSpec, seed: int = 0):
        super().__init__()
        self.spec = spec
        self.backbone = ARCHITECTURES[spec.architecture](spec.input_channels, spec.width)
        self.projection = nn.Linear(self.backbone.out_features, spec.embedding_dim)
        _he_init(self, torch.Generator().manual_seed(seed))

    def features(self, x: torch.Tensor) -> torch.Tensor:
        return self.backbone(x)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.ndim != 4 or x.shape[1] != self.spec.input_channels:
            raise ValueError(
                f"expected input [B, {self.spec.input_channels}, F, T], got {tuple(x.shape)}"
            )
        return F.normalize(self.projection(self.backbone(x)), dim=1)


class Classifier(nn.Module):
    """Encoder backbone with a linear classification head on the pooled features."""

    def __init__(self, backbone: Backbone, num_classes: int, spec: EncoderSpec):
        super().__init__()
        self.spec = spec
        self.backbone = backbone
        self.head = nn.Linear(backbone.out_features, num_classes)

    @property
    def num_classes(self) -> int:
        return self.head.out_features

    def forward(self, x):
        if x.ndim != 4 or x.shape[1] != self.spec.input_channels:
            raise ValueError(
                f"expected input [B, {self.spec.input_channels}, F, T], got {tuple(x.shape)}"
            )
        return self.head(self.backbone(x))


def build_encoder(spec: EncoderSpec | None = None, seed: int = 0) -> Encoder:
    return Encoder(spec or EncoderSpec(), seed=seed)


def replace_head(encoder: Encoder, num_classes: int, seed: int = 0) -> Classifier:
    """Drop the projection and attach a fresh ``num_classes``-way linear head.

    The backbone is copied, so ``encoder`` itself is left untouched. Every
    parameter of the result is trainable.
    """
    if num_classes < 2:
        raise ValueError(f"num_classes must be >= 2, got {num_classes}")
    clf = Classifier(copy.deepcopy(encoder.backbone), num_classes, encoder.spec)
    g = torch.Generator().manual_seed(seed)
    fan_in = clf.head.in_features
    bound = fan_in**-0.5
    with torch.no_grad():
        clf.head.weight.copy_((torch.rand(clf.head.weight.shape, generator=g) * 2 - 1) * bound)
        clf.head.bias.zero_()
    clf.to(next(encoder.parameters()).dtype)
    for p in clf.parameters():
        p.requires_grad_(True)
    return clf
