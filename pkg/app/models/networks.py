"""
Network architectures.

Encoders return a global embedding plus the per-stage feature maps used as
U-Net skip connections. Modules are created with torch's default
initialization; ``app.services.network_service`` re-initializes them from
explicit generators.
"""

from typing import List, Optional, Sequence, Tuple

import torch
import torch.nn.functional as F
from torch import nn
from torchvision.models import resnet50

from app.models.schemas import DecoderConfig, EncoderConfig, EncoderVariant, HeadConfig

ENCODER_PREFIX = "encoder."
PROJECTOR_PREFIX = "projector."
PREDICTOR_PREFIX = "predictor."
DECODER_PREFIX = "decoder."
SEG_HEAD_PREFIX = "segmentation_head."


class TinyStage(nn.Module):
    """Strided 3x3 conv followed by a 3x3 conv, each with batch norm and ReLU."""

    def __init__(self, in_channels: int, out_channels: int):
        super().__init__()
        self.conv1 = nn.Conv2d(in_channels, out_channels, 3, stride=2, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(out_channels)
        self.conv2 = nn.Conv2d(out_channels, out_channels, 3, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(out_channels)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = F.relu(self.bn1(self.conv1(x)))
        return F.relu(self.bn2(self.conv2(x)))


class TinyEncoder(nn.Module):
    """Desk-scale encoder: one stride-2 stage per width."""

    first_conv_name = "stages.0.conv1.weight"

    def __init__(self, in_channels: int, widths: Sequence[int]):
        super().__init__()
        channels = [in_channels] + list(widths)
        self.stages = nn.ModuleList(
            TinyStage(c_in, c_out) for c_in, c_out in zip(channels[:-1], channels[1:])
        )
        self.feature_channels = list(widths)

    def forward(self, x: torch.Tensor) -> Tuple[torch.Tensor, List[torch.Tensor]]:
        features = []
        for stage in self.stages:
            x = stage(x)
            features.append(x)
        return x.mean(dim=(2, 3)), features


class ResNet50Encoder(nn.Module):
    """
    ResNet-50 trunk with torchvision parameter names (``conv1``, ``bn1``,
    ``layer1`` ... ``layer4``), classifier removed.
    """

    first_conv_name = "conv1.weight"

    def __init__(self, in_channels: int):
        super().__init__()
        backbone = resnet50(weights=None)
        if in_channels != 3:
            backbone.conv1 = nn.Conv2d(in_channels, 64, 7, stride=2, padding=3, bias=False)
        self.conv1 = backbone.conv1
        self.bn1 = backbone.bn1
        self.maxpool = backbone.maxpool
        self.layer1 = backbone.layer1
        self.layer2 = backbone.layer2
        self.layer3 = backbone.layer3
        self.layer4 = backbone.layer4
        self.feature_channels = [64, 256, 512, 1024, 2048]

    def forward(self, x: torch.Tensor) -> Tuple[torch.Tensor, List[torch.Tensor]]:
        x = F.relu(self.bn1(self.conv1(x)))
        features = [x]
        x = self.maxpool(x)
        for layer in (self.layer1, self.layer2, self.layer3, self.layer4):
            x = layer(x)
            features.append(x)
        return x.mean(dim=(2, 3)), features


def create_encoder(cfg: EncoderConfig) -> nn.Module:
    """Instantiate the encoder module for a config (default torch init)."""
    if cfg.variant == EncoderVariant.RESNET50:
        return ResNet50Encoder(cfg.in_channels)
    return TinyEncoder(cfg.in_channels, cfg.stage_channel_widths)


class MLPHead(nn.Module):
    """Linear -> BatchNorm1d -> ReLU -> Linear."""

    def __init__(self, in_dim: int, hidden_dim: int, out_dim: int):
        super().__init__()
        self.fc1 = nn.Linear(in_dim, hidden_dim)
        self.bn = nn.BatchNorm1d(hidden_dim)
        self.fc2 = nn.Linear(hidden_dim, out_dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(F.relu(self.bn(self.fc1(x))))


def create_heads(embedding_dim: int, cfg: HeadConfig) -> Tuple[MLPHead, MLPHead]:
    """Projector g and predictor q."""
    projector = MLPHead(embedding_dim, cfg.projector[0], cfg.projector[1])
    predictor = MLPHead(cfg.projector[1], cfg.predictor[0], cfg.predictor[1])
    return projector, predictor


class ByolOnline(nn.Module):
    """Online branch: encoder f, projector g and predictor q."""

    def __init__(self, encoder: nn.Module, projector: nn.Module, predictor: nn.Module):
        super().__init__()
        self.encoder = encoder
        self.projector = projector
        self.predictor = predictor

    def forward(self, x: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        embedding, _ = self.encoder(x)
        z = self.projector(embedding)
        return z, self.predictor(z)


class ByolTarget(nn.Module):
    """Target branch: encoder and projector only (no predictor)."""

    def __init__(self, encoder: nn.Module, projector: nn.Module):
        super().__init__()
        self.encoder = encoder
        self.projector = projector

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        embedding, _ = self.encoder(x)
        return self.projector(embedding)


class DecoderBlock(nn.Module):
    """Nearest-neighbour x2 upsampling, optional skip concat, two 3x3 convs."""

    def __init__(self, in_channels: int, skip_channels: int, out_channels: int):
        super().__init__()
        self.conv1 = nn.Conv2d(in_channels + skip_channels, out_channels, 3, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(out_channels)
        self.conv2 = nn.Conv2d(out_channels, out_channels, 3, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(out_channels)

    def forward(self, x: torch.Tensor, skip: Optional[torch.Tensor]) -> torch.Tensor:
        x = F.interpolate(x, scale_factor=2, mode="nearest")
        if skip is not None:
            x = torch.cat([x, skip], dim=1)
        x = F.relu(self.bn1(self.conv1(x)))
        return F.relu(self.bn2(self.conv2(x)))


def default_decoder_channels(cfg: EncoderConfig) -> List[int]:
    if cfg.variant == EncoderVariant.RESNET50:
        return [256, 128, 64, 32, 16]
    return list(reversed(cfg.stage_channel_widths))


class UNetDecoder(nn.Module):
    """One block per encoder feature map, deepest first."""

    def __init__(self, feature_channels: Sequence[int], stage_channels: Sequence[int]):
        super().__init__()
        skip_channels = list(feature_channels[-2::-1]) + [0]
        in_channels = [feature_channels[-1]] + list(stage_channels[:-1])
        self.blocks = nn.ModuleList(
            DecoderBlock(c_in, c_skip, c_out)
            for c_in, c_skip, c_out in zip(in_channels, skip_channels, stage_channels)
        )

    def forward(self, features: List[torch.Tensor]) -> torch.Tensor:
        skips = list(features[-2::-1]) + [None]
        x = features[-1]
        for block, skip in zip(self.blocks, skips):
            x = block(x, skip)
        return x


class UNet(nn.Module):
    """Encoder, decoder and a 3x3 convolution producing per-class logits."""

    def __init__(self, encoder: nn.Module, dec_cfg: DecoderConfig, stage_channels: Sequence[int]):
        super().__init__()
        self.encoder = encoder
        self.decoder = UNetDecoder(encoder.feature_channels, stage_channels)
        self.segmentation_head = nn.Conv2d(stage_channels[-1], dec_cfg.out_classes, 3, padding=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        _, features = self.encoder(x)
        return self.segmentation_head(self.decoder(features))
