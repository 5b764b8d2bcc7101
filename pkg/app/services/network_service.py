"""
Network construction, initialization and weight transfer.

All builders take an explicit torch generator and return NetworkWeights
snapshots; the ``*_module`` helpers rebuild live modules from snapshots for
the training services.
"""

import math
from collections import OrderedDict
from typing import Dict, List, Mapping, Sequence, Tuple

import torch
from torch import nn

from app.core.exceptions import ArgumentError, TransferError
from app.core.logging import get_logger
from app.models.networks import (
    DECODER_PREFIX,
    ENCODER_PREFIX,
    PREDICTOR_PREFIX,
    PROJECTOR_PREFIX,
    ByolOnline,
    ByolTarget,
    MLPHead,
    ResNet50Encoder,
    TinyEncoder,
    UNet,
    create_encoder,
    create_heads,
    default_decoder_channels,
)
from app.models.schemas import DecoderConfig, EncoderConfig, EncoderVariant, HeadConfig
from app.models.weights import NetworkWeights

logger = get_logger(__name__)

# Prefixes found in public ResNet-50 checkpoints (torchvision, timm, DataParallel
# wrappers and BYOL training repositories), stripped before canonical naming.
EXTERNAL_PREFIXES = (
    "module.",
    "online_network.encoder.",
    "online_network.",
    "backbone.",
    "encoder.",
    "model.",
)
EXTERNAL_DROPPED = ("fc.", "head.", "classifier.", "projector.", "predictor.", "projection.")


def kaiming_uniform_init(
    shape: Sequence[int],
    fan_in: int,
    generator: torch.Generator,
    dtype: torch.dtype = torch.float32,
) -> torch.Tensor:
    """
    Sample i.i.d. from U[-b, b] with b = sqrt(6 / fan_in).

    Args:
        shape: Output tensor shape.
        fan_in: Number of inputs feeding one output unit.
        generator: Seeded torch generator.
        dtype: Floating dtype of the result.

    Raises:
        ArgumentError: If fan_in < 1.
    """
    if fan_in < 1:
        raise ArgumentError(f"fan_in must be >= 1, got {fan_in}")
    bound = math.sqrt(6.0 / fan_in)
    return (torch.rand(tuple(shape), generator=generator, dtype=dtype) * 2.0 - 1.0) * bound


def kaiming_bound(weight: torch.Tensor) -> float:
    """Bound b used for a conv or linear weight of this shape."""
    fan_in = int(weight[0].numel())
    return math.sqrt(6.0 / fan_in)


@torch.no_grad()
def initialize_module(module: nn.Module, generator: torch.Generator) -> None:
    """
    Re-initialize every conv/linear/batch-norm layer in registration order.

    Weights are Kaiming-uniform, biases zero, batch-norm scale 1 and shift 0
    with reset running statistics.
    """
    for layer in module.modules():
        if isinstance(layer, (nn.Conv2d, nn.Linear)):
            fan_in = int(layer.weight[0].numel())
            layer.weight.copy_(kaiming_uniform_init(layer.weight.shape, fan_in, generator))
            if layer.bias is not None:
                layer.bias.zero_()
        elif isinstance(layer, (nn.BatchNorm1d, nn.BatchNorm2d)):
            layer.reset_running_stats()
            layer.weight.fill_(1.0)
            layer.bias.zero_()


def _encoder_meta(cfg: EncoderConfig, **extra) -> Dict:
    meta = {"encoder": cfg.model_dump(mode="json"), "input_channels": cfg.in_channels}
    meta.update(extra)
    return meta


def _check_encoder_config(cfg: EncoderConfig) -> None:
    if cfg.in_channels not in (1, 3):
        raise ArgumentError(f"in_channels must be 1 or 3, got {cfg.in_channels}")
    if cfg.variant == EncoderVariant.TINY and len(cfg.stage_channel_widths) < 3:
        raise ArgumentError("TINY encoder needs at least 3 downsampling stages")


def first_conv_key(cfg: EncoderConfig) -> str:
    """Canonical name of the input convolution kernel."""
    cls = ResNet50Encoder if cfg.variant == EncoderVariant.RESNET50 else TinyEncoder
    return ENCODER_PREFIX + cls.first_conv_name


def encoder_config_from_weights(weights: NetworkWeights) -> EncoderConfig:
    """Recover the EncoderConfig recorded in a snapshot's meta."""
    if "encoder" not in weights.meta:
        raise TransferError("Weights carry no encoder configuration in meta")
    data = dict(weights.meta["encoder"])
    data["in_channels"] = weights.input_channels
    return EncoderConfig.model_validate(data)


def build_encoder(cfg: EncoderConfig, generator: torch.Generator) -> NetworkWeights:
    """
    Build a freshly initialized encoder snapshot.

    Raises:
        ArgumentError: If in_channels is not 1 or 3, or TINY has < 3 stages.
    """
    _check_encoder_config(cfg)
    module = create_encoder(cfg)
    initialize_module(module, generator)
    return NetworkWeights.from_module(module, ENCODER_PREFIX, _encoder_meta(cfg, stage="init", epoch=0))


def load_encoder_module(weights: NetworkWeights) -> nn.Module:
    """Live encoder module holding the snapshot's encoder entries."""
    cfg = encoder_config_from_weights(weights)
    module = create_encoder(cfg)
    try:
        module.load_state_dict(weights.state_dict_for(ENCODER_PREFIX), strict=True)
    except RuntimeError as e:
        raise TransferError(f"Encoder weights do not fit {cfg.variant.value}: {e}")
    return module


def expected_encoder_shapes(cfg: EncoderConfig) -> "OrderedDict[str, torch.Size]":
    module = create_encoder(cfg)
    return OrderedDict((ENCODER_PREFIX + k, v.shape) for k, v in module.state_dict().items())


def name_mismatch(expected: Mapping, actual: Mapping, limit: int = 10) -> Tuple[List[str], List[str]]:
    missing = [n for n in expected if n not in actual][:limit]
    unexpected = [n for n in actual if n not in expected][:limit]
    return missing, unexpected


def adapt_input_layer(weights: NetworkWeights) -> NetworkWeights:
    """
    Convert a 3-channel input convolution to 1 channel by summing its kernel
    over the channel axis; every other entry is kept bit-identical.
    """
    if weights.input_channels == 1:
        logger.warning("adapt_input_layer called on single-channel weights; no-op")
        return weights

    cfg = encoder_config_from_weights(weights)
    key = first_conv_key(cfg)
    kernel = weights.params.get(key)
    if kernel is None or kernel.ndim != 4 or kernel.shape[1] != 3:
        raise TransferError(f"Expected a (out, 3, k, k) kernel at '{key}'")

    params = OrderedDict(weights.params)
    params[key] = kernel.sum(dim=1, keepdim=True)
    meta = dict(weights.meta)
    meta["input_channels"] = 1
    meta["encoder"] = cfg.model_copy(update={"in_channels": 1}).model_dump(mode="json")

    logger.debug("Adapted input layer to single channel", extra={"kernel": key})
    return NetworkWeights(params=params, meta=meta)


def transfer_encoder_weights(src: NetworkWeights, dst_cfg: EncoderConfig) -> NetworkWeights:
    """
    Carry the encoder of ``src`` into a stage configured by ``dst_cfg``.

    Only ``encoder.*`` entries are returned; heads and decoders are built
    fresh by their owners. 3-channel sources are channel-adapted when the
    destination is single-channel.

    Raises:
        TransferError: On variant, channel or name/shape incompatibility.
    """
    _check_encoder_config(dst_cfg)
    src_cfg = encoder_config_from_weights(src)
    encoder = src.subset(ENCODER_PREFIX)

    if src_cfg.variant != dst_cfg.variant:
        missing, unexpected = name_mismatch(expected_encoder_shapes(dst_cfg), encoder.params)
        raise TransferError(
            f"Cannot transfer {src_cfg.variant.value} weights into {dst_cfg.variant.value}; "
            f"missing={missing} unexpected={unexpected}"
        )

    if src.input_channels == 3 and dst_cfg.in_channels == 1:
        encoder = adapt_input_layer(encoder)
    elif src.input_channels != dst_cfg.in_channels:
        raise TransferError(
            f"Cannot transfer {src.input_channels}-channel weights into a "
            f"{dst_cfg.in_channels}-channel encoder"
        )

    expected = expected_encoder_shapes(dst_cfg)
    missing, unexpected = name_mismatch(expected, encoder.params)
    wrong_shape = [
        n for n, shape in expected.items()
        if n in encoder.params and encoder.params[n].shape != shape
    ][:10]
    if missing or unexpected or wrong_shape:
        raise TransferError(
            f"Encoder layout mismatch: missing={missing} unexpected={unexpected} "
            f"wrong_shape={wrong_shape}"
        )

    params = OrderedDict((name, encoder.params[name].clone()) for name in expected)
    meta = dict(src.meta)
    meta.update(_encoder_meta(dst_cfg))
    return NetworkWeights(params=params, meta=meta)


def _decoder_channels(enc_cfg: EncoderConfig, dec_cfg: DecoderConfig) -> List[int]:
    channels = dec_cfg.stage_channels or default_decoder_channels(enc_cfg)
    n_skips = len(enc_cfg.stage_channel_widths) if enc_cfg.variant == EncoderVariant.TINY else 5
    if len(channels) != n_skips:
        raise ArgumentError(
            f"Decoder has {len(channels)} stages but the encoder provides {n_skips} feature maps"
        )
    return list(channels)


def create_unet_module(
    encoder_weights: NetworkWeights,
    dec_cfg: DecoderConfig,
    generator: torch.Generator,
) -> UNet:
    """Live U-Net with the given encoder and a freshly initialized decoder."""
    enc_cfg = encoder_config_from_weights(encoder_weights)
    channels = _decoder_channels(enc_cfg, dec_cfg)
    unet = UNet(load_encoder_module(encoder_weights), dec_cfg, channels)
    initialize_module(unet.decoder, generator)
    initialize_module(unet.segmentation_head, generator)
    return unet


def build_unet(
    encoder_weights: NetworkWeights,
    dec_cfg: DecoderConfig,
    generator: torch.Generator,
) -> NetworkWeights:
    """
    Combined segmentation network snapshot.

    Raises:
        ArgumentError: If the decoder stage count does not match the encoder skips.
    """
    unet = create_unet_module(encoder_weights, dec_cfg, generator)
    return snapshot_unet(unet, encoder_weights, dec_cfg)


def snapshot_unet(
    unet: UNet,
    encoder_weights: NetworkWeights,
    dec_cfg: DecoderConfig,
    **meta_updates,
) -> NetworkWeights:
    """Snapshot a live U-Net with the meta ``unet_from_weights`` needs."""
    enc_cfg = encoder_config_from_weights(encoder_weights)
    meta = dict(encoder_weights.meta)
    meta["decoder"] = dec_cfg.model_copy(
        update={"stage_channels": _decoder_channels(enc_cfg, dec_cfg)}
    ).model_dump(mode="json")
    meta.update(meta_updates)
    return NetworkWeights.from_module(unet, "", meta)


def match_input_channels(batch: torch.Tensor, in_channels: int) -> torch.Tensor:
    """Replicate a single-channel B x 1 x H x W batch for 3-channel encoders."""
    if batch.shape[1] == in_channels:
        return batch
    return batch.expand(-1, in_channels, -1, -1)


def unet_from_weights(weights: NetworkWeights) -> UNet:
    """Rebuild a live U-Net from a ``build_unet`` style snapshot."""
    if "decoder" not in weights.meta:
        raise TransferError("Weights carry no decoder configuration in meta")
    dec_cfg = DecoderConfig.model_validate(weights.meta["decoder"])
    unet = UNet(create_encoder(encoder_config_from_weights(weights)), dec_cfg, dec_cfg.stage_channels)
    unet.load_state_dict(weights.state_dict_for(""), strict=True)
    return unet


def build_byol_heads(
    embedding_dim: int,
    head_cfg: HeadConfig,
    generator: torch.Generator,
) -> Tuple[NetworkWeights, NetworkWeights]:
    """Fresh projector and predictor snapshots, initialized in that order."""
    if embedding_dim < 1:
        raise ArgumentError(f"embedding_dim must be >= 1, got {embedding_dim}")
    projector, predictor = create_heads(embedding_dim, head_cfg)
    initialize_module(projector, generator)
    initialize_module(predictor, generator)
    meta = {"heads": head_cfg.model_dump(mode="json"), "embedding_dim": embedding_dim}
    return (
        NetworkWeights.from_module(projector, PROJECTOR_PREFIX, meta),
        NetworkWeights.from_module(predictor, PREDICTOR_PREFIX, meta),
    )


def load_head_module(weights: NetworkWeights, prefix: str) -> MLPHead:
    """Live MLP head from a ``build_byol_heads`` snapshot."""
    fc1 = weights.params[prefix + "fc1.weight"]
    fc2 = weights.params[prefix + "fc2.weight"]
    head = MLPHead(fc1.shape[1], fc1.shape[0], fc2.shape[0])
    head.load_state_dict(weights.state_dict_for(prefix), strict=True)
    return head


def create_byol_branches(
    encoder_weights: NetworkWeights,
    head_cfg: HeadConfig,
    generator: torch.Generator,
) -> Tuple[ByolOnline, ByolTarget]:
    """
    Online and target branches for SSL. The target starts as a copy of the
    online encoder and projector.
    """
    enc_cfg = encoder_config_from_weights(encoder_weights)
    projector_w, predictor_w = build_byol_heads(enc_cfg.resolved_embedding_dim, head_cfg, generator)
    online = ByolOnline(
        load_encoder_module(encoder_weights),
        load_head_module(projector_w, PROJECTOR_PREFIX),
        load_head_module(predictor_w, PREDICTOR_PREFIX),
    )
    target = ByolTarget(
        load_encoder_module(encoder_weights),
        load_head_module(projector_w, PROJECTOR_PREFIX),
    )
    for param in target.parameters():
        param.requires_grad_(False)
    return online, target


def convert_external_state_dict(
    state_dict: Mapping[str, torch.Tensor],
) -> "OrderedDict[str, torch.Tensor]":
    """
    Map a public ResNet-50 state dict onto canonical ``encoder.*`` names.

    Wrapper prefixes are stripped and classifier / SSL head entries dropped.
    """
    converted = OrderedDict()
    for name, tensor in state_dict.items():
        stripped = name
        for prefix in EXTERNAL_PREFIXES:
            if stripped.startswith(prefix):
                stripped = stripped[len(prefix):]
        if stripped.startswith(EXTERNAL_DROPPED):
            continue
        converted[ENCODER_PREFIX + stripped] = tensor
    return converted


def describe_external_mapping() -> str:
    """Human-readable summary of ``convert_external_state_dict``."""
    lines = ["External ResNet-50 checkpoints map onto canonical names as follows:"]
    lines += [f"  strip prefix '{p}'" for p in EXTERNAL_PREFIXES]
    lines += [f"  drop entries under '{p}'" for p in EXTERNAL_DROPPED]
    lines.append(f"  prepend '{ENCODER_PREFIX}' to the remaining torchvision names")
    lines.append("  input_channels is taken from the conv1.weight kernel (3 for ImageNet)")
    return "\n".join(lines)


def count_parameters(weights: NetworkWeights) -> Dict[str, int]:
    """Trainable parameter counts per component prefix."""
    return {
        "encoder": weights.n_parameters(ENCODER_PREFIX),
        "decoder": weights.n_parameters(DECODER_PREFIX),
    }
