"""
Checkpoint storage.

A checkpoint is a single torch archive holding a manifest (variant,
input channels, stage, epoch, seed, content digest and free-form meta) and
the ordered name -> tensor map. Loading recomputes the digest.
"""

from collections import OrderedDict
from pathlib import Path
from typing import Any, Dict

import torch

from app.core.exceptions import CorruptCheckpointError
from app.core.logging import get_logger
from app.models.weights import NetworkWeights

logger = get_logger(__name__)

FORMAT_VERSION = 1


def build_manifest(weights: NetworkWeights) -> Dict[str, Any]:
    encoder = weights.meta.get("encoder", {})
    return {
        "format_version": FORMAT_VERSION,
        "variant": encoder.get("variant"),
        "input_channels": weights.input_channels,
        "stage": weights.meta.get("stage"),
        "epoch": weights.meta.get("epoch"),
        "seed": weights.meta.get("seed"),
        "digest": weights.digest(),
        "meta": weights.meta,
    }


def save_checkpoint(weights: NetworkWeights, path: Path) -> str:
    """
    Write a checkpoint archive.

    Returns:
        The content digest recorded in the manifest.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    manifest = build_manifest(weights)
    payload = {"manifest": manifest, "params": OrderedDict(weights.params)}
    tmp_path = path.with_name(path.name + ".tmp")
    torch.save(payload, tmp_path)
    tmp_path.replace(path)
    logger.debug(
        "Saved checkpoint",
        extra={"path": str(path), "digest": manifest["digest"], "n_params": len(weights.params)},
    )
    return manifest["digest"]


def load_checkpoint(path: Path) -> NetworkWeights:
    """
    Read a checkpoint archive and verify its digest.

    Raises:
        CorruptCheckpointError: If the file is missing, unreadable, truncated
            or its content does not match the manifest digest.
    """
    path = Path(path)
    if not path.is_file():
        raise CorruptCheckpointError(f"Checkpoint not found: {path}")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
        manifest = payload["manifest"]
        params = OrderedDict(payload["params"])
    except Exception as e:
        raise CorruptCheckpointError(f"Unreadable checkpoint {path}: {e}")

    meta = dict(manifest.get("meta") or {})
    meta.setdefault("input_channels", manifest.get("input_channels", 1))
    weights = NetworkWeights(params=params, meta=meta)
    digest = weights.digest()
    if digest != manifest.get("digest"):
        raise CorruptCheckpointError(
            f"Checkpoint {path} digest mismatch: manifest {manifest.get('digest')} != content {digest}"
        )
    return weights


def read_manifest(path: Path) -> Dict[str, Any]:
    """Manifest of a checkpoint without digest verification."""
    try:
        return torch.load(Path(path), map_location="cpu", weights_only=True)["manifest"]
    except Exception as e:
        raise CorruptCheckpointError(f"Unreadable checkpoint {path}: {e}")
