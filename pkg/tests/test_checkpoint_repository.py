from collections import OrderedDict
from pathlib import Path

import pytest
import torch

from app.core.exceptions import CorruptCheckpointError
from app.repositories.checkpoint_repository import load_checkpoint, read_manifest, save_checkpoint
from app.services.network_service import encoder_config_from_weights


def test_round_trip_preserves_names_order_and_bits(tmp_path: Path, tiny_encoder) -> None:
    weights = tiny_encoder.with_meta(stage="byol", epoch=3, seed=11)
    digest = save_checkpoint(weights, tmp_path / "ckpt" / "encoder.pt")
    restored = load_checkpoint(tmp_path / "ckpt" / "encoder.pt")
    assert digest == weights.digest() == restored.digest()
    assert restored.names == weights.names
    assert restored.equals(weights)
    assert encoder_config_from_weights(restored) == encoder_config_from_weights(weights)


def test_manifest_describes_the_snapshot(tmp_path: Path, rgb_encoder) -> None:
    save_checkpoint(rgb_encoder.with_meta(stage="import", epoch=0, seed=2), tmp_path / "w.pt")
    manifest = read_manifest(tmp_path / "w.pt")
    assert manifest["variant"] == "TINY"
    assert manifest["input_channels"] == 3
    assert manifest["stage"] == "import"
    assert manifest["seed"] == 2
    assert manifest["digest"] == rgb_encoder.with_meta().digest()


def test_tampered_content_fails_digest_check(tmp_path: Path, tiny_encoder) -> None:
    path = tmp_path / "w.pt"
    save_checkpoint(tiny_encoder, path)
    payload = torch.load(path, weights_only=True)
    params = OrderedDict(payload["params"])
    first = next(iter(params))
    params[first] = params[first] + 1.0
    torch.save({"manifest": payload["manifest"], "params": params}, path)
    with pytest.raises(CorruptCheckpointError, match="digest"):
        load_checkpoint(path)


def test_truncated_file_is_corrupt(tmp_path: Path, tiny_encoder) -> None:
    path = tmp_path / "w.pt"
    save_checkpoint(tiny_encoder, path)
    data = path.read_bytes()
    path.write_bytes(data[: len(data) // 2])
    with pytest.raises(CorruptCheckpointError):
        load_checkpoint(path)


def test_missing_file_is_corrupt(tmp_path: Path) -> None:
    with pytest.raises(CorruptCheckpointError, match="not found"):
        load_checkpoint(tmp_path / "absent.pt")
