"""
Pretraining pipeline orchestration.

A pipeline is one or two pretraining stages (external ImageNet import and/or
domain BYOL) producing the encoder handed to downstream segmentation. Only
encoder weights cross stage boundaries; every stage builds its own heads.
"""

import json
import platform
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional

import numpy as np
import torch

from app.core.exceptions import ConfigurationError, CorruptCheckpointError, WeightsImportError
from app.core.logging import get_logger
from app.core.seeding import torch_generator
from app.models.dataset import SemiSupervisedDataset
from app.models.networks import ENCODER_PREFIX
from app.models.records import Provenance
from app.models.schemas import AugmentConfig, EncoderConfig, EncoderVariant, PipelineKind, PipelineSpec
from app.models.weights import NetworkWeights
from app.repositories.checkpoint_repository import load_checkpoint, save_checkpoint
from app.repositories.metrics_repository import JsonlMetricsSink
from app.repositories.record_repository import atomic_write_text
from app.services.byol_service import pretrain
from app.services.network_service import (
    build_encoder,
    convert_external_state_dict,
    expected_encoder_shapes,
    name_mismatch,
    transfer_encoder_weights,
)

logger = get_logger(__name__)

CHECKPOINT_NAME = "checkpoint.pt"
PROVENANCE_NAME = "provenance.json"


def environment_info(data_root: Optional[Path] = None) -> Dict[str, Any]:
    """Library versions (and the data root when one is in use) for provenance."""
    info: Dict[str, Any] = {
        "python": platform.python_version(),
        "torch": torch.__version__,
        "numpy": np.__version__,
    }
    if data_root is not None:
        info["data_root"] = str(data_root)
    return info


# ----- External weights -----


def _external_encoder_config(
    params: "OrderedDict[str, torch.Tensor]",
    variant: EncoderVariant,
    meta: Dict[str, Any],
) -> EncoderConfig:
    if "encoder" in meta:
        data = dict(meta["encoder"])
    else:
        data = {"variant": variant.value}
    first = params.get(ENCODER_PREFIX + "conv1.weight")
    if first is None:
        first = next((t for n, t in params.items() if n.endswith("conv1.weight") and t.ndim == 4), None)
    if first is not None:
        data["in_channels"] = int(first.shape[1])
    elif "input_channels" in meta:
        data["in_channels"] = int(meta["input_channels"])
    try:
        return EncoderConfig.model_validate(data)
    except ValueError as e:
        raise WeightsImportError(f"External weights describe an invalid encoder: {e}")


def import_external_weights(path: Path, expected_variant: EncoderVariant) -> NetworkWeights:
    """
    Import ImageNet-pretrained encoder weights.

    Accepts a checkpoint in this project's format or a public ResNet-50
    state dict (mapped through ``convert_external_state_dict``).

    Raises:
        WeightsImportError: If the file is unreadable, belongs to another
            variant, or its names do not match the expected encoder layout
            (first 10 missing and unexpected names are listed).
    """
    path = Path(path)
    if not path.is_file():
        raise WeightsImportError(f"External weights file not found: {path}")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as e:
        raise WeightsImportError(f"Unreadable external weights {path}: {e}")

    if isinstance(payload, dict) and "manifest" in payload:
        try:
            weights = load_checkpoint(path)
        except CorruptCheckpointError as e:
            raise WeightsImportError(e.detail)
        params = weights.subset(ENCODER_PREFIX).params
        meta = dict(weights.meta)
        variant = meta.get("encoder", {}).get("variant", payload["manifest"].get("variant"))
        if variant is not None and variant != expected_variant.value:
            missing, unexpected = name_mismatch(
                expected_encoder_shapes(EncoderConfig(variant=expected_variant, in_channels=3)),
                params,
            )
            raise WeightsImportError(
                f"{path} holds {variant} weights, expected {expected_variant.value}; "
                f"missing={missing} unexpected={unexpected}"
            )
    elif isinstance(payload, dict):
        state_dict = payload.get("state_dict", payload)
        params = convert_external_state_dict(state_dict)
        meta = {}
    else:
        raise WeightsImportError(f"{path} does not contain a state dict")

    cfg = _external_encoder_config(params, expected_variant, meta)
    expected = expected_encoder_shapes(cfg)
    missing, unexpected = name_mismatch(expected, params)
    wrong_shape = [n for n, s in expected.items() if n in params and params[n].shape != s][:10]
    if missing or unexpected or wrong_shape:
        raise WeightsImportError(
            f"{path} does not match the {cfg.variant.value} layout: missing={missing} "
            f"unexpected={unexpected} wrong_shape={wrong_shape}"
        )

    ordered = OrderedDict((name, params[name].clone()) for name in expected)
    weights = NetworkWeights(
        params=ordered,
        meta={
            "encoder": cfg.model_dump(mode="json"),
            "input_channels": cfg.in_channels,
            "stage": "import",
            "epoch": 0,
            "source": str(path),
        },
    )
    if not weights.is_finite():
        raise WeightsImportError(f"{path} contains non-finite values")
    logger.info(
        "Imported external weights",
        extra={"path": str(path), "variant": cfg.variant.value, "input_channels": cfg.in_channels},
    )
    return weights


# ----- Pipelines -----


@dataclass
class PipelineResult:
    """
    Output of a pipeline run.

    Attributes:
        encoder: Final single-channel encoder for downstream segmentation.
        provenance: Executed stages in order.
        stage_inputs: Encoder each stage started from (stage 1 first).
        stage_outputs: Encoder each stage produced.
    """

    encoder: NetworkWeights
    provenance: Provenance
    stage_inputs: List[NetworkWeights] = field(default_factory=list)
    stage_outputs: List[NetworkWeights] = field(default_factory=list)


def check_pipeline(spec: PipelineSpec) -> None:
    """
    Validate a pipeline before any compute.

    Raises:
        ConfigurationError: On missing fields or a missing weights file.
    """
    spec.check()
    if spec.kind.uses_imagenet and not Path(spec.external_weights_path).is_file():
        raise ConfigurationError(
            f"External weights for {spec.kind.value} not found: {spec.external_weights_path}"
        )


class PipelineRunner:
    """
    Executes pretraining pipelines and writes their output tree
    ``<output_dir>/<pipeline>/<seed>/stage-<n>/``.
    """

    def __init__(
        self,
        encoder_cfg: EncoderConfig,
        augment: AugmentConfig,
        output_dir: Optional[Path] = None,
        environment: Optional[Dict[str, Any]] = None,
    ):
        self.encoder_cfg = encoder_cfg.model_copy(update={"in_channels": 1})
        self.augment = augment
        self.output_dir = Path(output_dir) if output_dir is not None else None
        self.environment = environment or environment_info()

    def _stage_dir(self, spec: PipelineSpec, seed: int, index: int) -> Optional[Path]:
        if self.output_dir is None:
            return None
        path = self.output_dir / spec.kind.value / str(seed) / f"stage-{index}"
        path.mkdir(parents=True, exist_ok=True)
        return path

    def _finish_stage(
        self,
        result: PipelineResult,
        spec: PipelineSpec,
        seed: int,
        name: str,
        source: str,
        epochs: int,
        start: NetworkWeights,
        encoder: NetworkWeights,
    ) -> None:
        index = len(result.stage_outputs) + 1
        digest = encoder.digest()
        stage_dir = self._stage_dir(spec, seed, index)
        if stage_dir is not None:
            save_checkpoint(encoder, stage_dir / CHECKPOINT_NAME)
        result.stage_inputs.append(start)
        result.stage_outputs.append(encoder)
        result.provenance.add(name=name, source=source, epochs=epochs, seed=seed, digest=digest)
        logger.info(
            "Pipeline stage complete",
            extra={"pipeline": spec.kind.value, "stage": index, "stage_name": name, "digest": digest[:12]},
        )

    def _domain_ssl(
        self,
        result: PipelineResult,
        spec: PipelineSpec,
        dataset: SemiSupervisedDataset,
        seed: int,
        start: NetworkWeights,
        source: str,
    ) -> NetworkWeights:
        stage_dir = self._stage_dir(spec, seed, len(result.stage_outputs) + 1)
        sink = JsonlMetricsSink(stage_dir / "ssl_metrics.jsonl", truncate=True) if stage_dir is not None else None
        try:
            outcome = pretrain(
                dataset,
                spec.domain_ssl,
                self.augment,
                seed=seed,
                init_encoder=start,
                metrics_sink=sink,
                checkpoint_dir=stage_dir / "epochs" if stage_dir is not None else None,
                stage="byol_domain",
            )
        finally:
            if sink is not None:
                sink.close()
        self._finish_stage(
            result, spec, seed, "byol_domain", source, spec.domain_ssl.epochs, start, outcome.encoder
        )
        return outcome.encoder

    def run(self, spec: PipelineSpec, dataset: SemiSupervisedDataset, seed: int) -> PipelineResult:
        """
        Run ``spec`` on the unlabeled pool ``dataset``.

        RANDOM_INIT and the domain-only pipeline start from the same
        ``(seed, "encoder")`` Kaiming stream. ImageNet imports are adapted to a
        single input channel before the first stage that consumes MRI slices.

        Raises:
            ConfigurationError: If the spec is incomplete (checked before any
                compute).
            WeightsImportError: If the external weights cannot be imported.
        """
        check_pipeline(spec)
        result = PipelineResult(
            encoder=None,
            provenance=Provenance(pipeline=spec.kind.value, environment=dict(self.environment)),
        )
        logger.info("Running pipeline", extra={"pipeline": spec.kind.value, "seed": seed})

        if spec.kind.uses_imagenet:
            imported = import_external_weights(spec.external_weights_path, self.encoder_cfg.variant)
            encoder = transfer_encoder_weights(imported, self.encoder_cfg)
            encoder = encoder.with_meta(stage="import", epoch=0, seed=seed)
            source = "supervised_imagenet" if spec.kind.value.startswith("SUP") else "byol_imagenet"
            self._finish_stage(
                result, spec, seed, f"import_{source}", str(spec.external_weights_path), 0, imported, encoder
            )
        else:
            encoder = build_encoder(self.encoder_cfg, torch_generator(seed, "encoder")).with_meta(seed=seed)
            if not spec.kind.uses_domain_ssl:
                self._finish_stage(result, spec, seed, "random_init", "kaiming_uniform", 0, encoder, encoder)

        if spec.kind.uses_domain_ssl:
            source = result.provenance.stages[-1].name if result.provenance.stages else "kaiming_uniform"
            encoder = self._domain_ssl(result, spec, dataset, seed, encoder, source)

        result.encoder = encoder
        self._write_provenance(spec, seed, result.provenance)
        return result

    def _write_provenance(self, spec: PipelineSpec, seed: int, provenance: Provenance) -> None:
        if self.output_dir is None:
            return
        path = self.output_dir / spec.kind.value / str(seed) / PROVENANCE_NAME
        atomic_write_text(path, json.dumps(provenance.to_dict(), indent=2))


def run_pipeline(
    spec: PipelineSpec,
    unlabeled_dataset: SemiSupervisedDataset,
    seed: int,
    encoder_cfg: Optional[EncoderConfig] = None,
    augment: Optional[AugmentConfig] = None,
    output_dir: Optional[Path] = None,
) -> PipelineResult:
    """Convenience wrapper around ``PipelineRunner.run``."""
    runner = PipelineRunner(encoder_cfg or EncoderConfig(), augment or AugmentConfig(), output_dir)
    return runner.run(spec, unlabeled_dataset, seed)


def load_pipeline_encoder(output_dir: Path, kind: PipelineKind, seed: int) -> NetworkWeights:
    """Final encoder of a previously written pipeline run."""
    root = Path(output_dir) / kind.value / str(seed)
    stages = sorted(root.glob(f"stage-*/{CHECKPOINT_NAME}"), key=lambda p: int(p.parent.name.split("-")[1]))
    if not stages:
        raise ConfigurationError(f"No pipeline checkpoints under {root}")
    return load_checkpoint(stages[-1])
