"""
Pydantic schemas for experiment configuration.

Provides type-safe validation for every section of the experiment
configuration file. All sections reject unknown keys.
"""

import math
from enum import Enum
from pathlib import Path
from typing import List, Literal, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from app.core.exceptions import ConfigurationError


class StrictModel(BaseModel):
    """Base model for configuration sections; unknown keys are rejected."""

    model_config = ConfigDict(extra="forbid", frozen=True)


# ----- Augmentation -----


class AugmentConfig(StrictModel):
    """
    Stochastic augmentation chain shared by SSL views and segmentation.

    Default magnitudes are not given by the literature this reproduces;
    they are overridable configuration defaults.
    """

    output_size: int = Field(default=64, ge=1)
    crop_scale_range: Tuple[float, float] = (0.4, 1.0)
    hflip_prob: float = Field(default=0.5, ge=0.0, le=1.0)
    brightness_delta_max: float = Field(default=0.4, ge=0.0)
    contrast_factor_range: Tuple[float, float] = (0.6, 1.4)

    @field_validator("crop_scale_range")
    @classmethod
    def _check_scale(cls, value: Tuple[float, float]) -> Tuple[float, float]:
        lo, hi = value
        if not (0.0 < lo <= hi <= 1.0):
            raise ValueError("crop_scale_range must satisfy 0 < lo <= hi <= 1")
        return value

    @field_validator("contrast_factor_range")
    @classmethod
    def _check_contrast(cls, value: Tuple[float, float]) -> Tuple[float, float]:
        lo, hi = value
        if not (0.0 < lo <= hi):
            raise ValueError("contrast_factor_range must satisfy 0 < lo <= hi")
        return value

    @classmethod
    def identity(cls, output_size: int) -> "AugmentConfig":
        """Chain that only resizes."""
        return cls(
            output_size=output_size,
            crop_scale_range=(1.0, 1.0),
            hflip_prob=0.0,
            brightness_delta_max=0.0,
            contrast_factor_range=(1.0, 1.0),
        )


# ----- Networks -----


class EncoderVariant(str, Enum):
    """Supported encoder architectures."""

    TINY = "TINY"
    RESNET50 = "RESNET50"


class EncoderConfig(StrictModel):
    """
    Encoder architecture.

    Attributes:
        variant: TINY (strided CNN for CPU runs) or RESNET50.
        in_channels: 1 for MRI slices, 3 for natural-image weights.
        stage_channel_widths: Output width of each TINY stage.
        embedding_dim: Optional explicit embedding size; must agree with the
            architecture when given.
    """

    variant: EncoderVariant = EncoderVariant.TINY
    in_channels: int = 1
    stage_channel_widths: List[int] = Field(default_factory=lambda: [8, 16, 32])
    embedding_dim: Optional[int] = None

    @property
    def resolved_embedding_dim(self) -> int:
        if self.variant == EncoderVariant.RESNET50:
            return 2048
        return self.stage_channel_widths[-1]

    @model_validator(mode="after")
    def _check_embedding(self) -> "EncoderConfig":
        if self.embedding_dim is not None and self.embedding_dim != self.resolved_embedding_dim:
            raise ValueError(
                f"embedding_dim {self.embedding_dim} does not match "
                f"{self.variant.value} output width {self.resolved_embedding_dim}"
            )
        return self


class HeadConfig(StrictModel):
    """Projector and predictor MLPs as (hidden_dim, out_dim) pairs."""

    projector: Tuple[int, int] = (256, 64)
    predictor: Tuple[int, int] = (256, 64)

    @model_validator(mode="after")
    def _check_dims(self) -> "HeadConfig":
        if min(self.projector + self.predictor) < 1:
            raise ValueError("head dimensions must be >= 1")
        if self.predictor[1] != self.projector[1]:
            raise ValueError("predictor out_dim must equal projector out_dim")
        return self


class DecoderConfig(StrictModel):
    """
    U-Net decoder: nearest-neighbour upsampling followed by two 3x3
    convolutions per stage. ``stage_channels=None`` picks the default
    widths for the encoder variant.
    """

    stage_channels: Optional[List[int]] = None
    upsampling: Literal["nearest"] = "nearest"
    convs_per_stage: Literal[2] = 2
    out_classes: int = Field(default=4, ge=2)


# ----- Self-supervised pretraining -----


class TauSchedule(str, Enum):
    """EMA momentum schedules for the target branch."""

    CONSTANT = "CONSTANT"
    COSINE_TO_ONE = "COSINE_TO_ONE"


class ByolConfig(StrictModel):
    """
    BYOL pretraining stage.

    Optimizer is momentum SGD with a cosine-decayed learning rate; tau,
    learning rate and batch size are flagged defaults.
    """

    tau_base: float = Field(default=0.99, ge=0.0, le=1.0)
    tau_schedule: TauSchedule = TauSchedule.COSINE_TO_ONE
    learning_rate: float = Field(default=0.05, ge=0.0)
    momentum: float = Field(default=0.9, ge=0.0, lt=1.0)
    weight_decay: float = Field(default=1e-5, ge=0.0)
    epochs: int = Field(default=25, ge=0)
    batch_size: int = Field(default=32, ge=2)
    checkpoint_every_epoch: bool = False
    num_workers: int = Field(default=0, ge=0)
    head: HeadConfig = Field(default_factory=HeadConfig)


# ----- Downstream segmentation -----


class EncoderInit(str, Enum):
    """How the segmentation encoder is initialized."""

    RANDOM = "RANDOM"
    FROM_CHECKPOINT = "FROM_CHECKPOINT"


class SegConfig(StrictModel):
    """
    Downstream fine-tuning with a fixed step budget.

    ``total_steps=None`` resolves to the number of steps equivalent to
    ``epochs_equivalent`` epochs on the full labeled training set;
    ``anneal_period_steps=None`` resolves to a third of the budget.
    """

    total_steps: Optional[int] = Field(default=None, ge=1)
    epochs_equivalent: int = Field(default=150, ge=1)
    batch_size: int = Field(default=8, ge=1)
    lr_max: float = Field(default=1e-3, gt=0.0)
    lr_min: float = Field(default=1e-5, gt=0.0)
    anneal_period_steps: Optional[int] = Field(default=None, ge=1)
    eval_every_steps: int = Field(default=50, ge=1)
    encoder_init: EncoderInit = EncoderInit.FROM_CHECKPOINT
    freeze_batchnorm: bool = False
    weight_decay: float = Field(default=0.0, ge=0.0)
    jaccard_eps: float = Field(default=1e-7, gt=0.0)
    num_workers: int = Field(default=0, ge=0)
    decoder: DecoderConfig = Field(default_factory=DecoderConfig)

    @model_validator(mode="after")
    def _check_lr(self) -> "SegConfig":
        if self.lr_min > self.lr_max:
            raise ValueError("lr_min must be <= lr_max")
        return self

    def resolve(self, n_labeled: int) -> "SegConfig":
        """Fill in the step budget and annealing period for a labeled set size."""
        total = self.total_steps
        if total is None:
            total = max(1, math.ceil(self.epochs_equivalent * n_labeled / self.batch_size))
        period = self.anneal_period_steps or max(1, math.ceil(total / 3))
        return self.model_copy(update={"total_steps": total, "anneal_period_steps": period})


# ----- Pipelines -----


class PipelineKind(str, Enum):
    """Pretraining pipelines preceding downstream segmentation."""

    RANDOM_INIT = "RANDOM_INIT"
    SUP_IMAGENET = "SUP_IMAGENET"
    BYOL_IMAGENET = "BYOL_IMAGENET"
    BYOL_DOMAIN = "BYOL_DOMAIN"
    SUP_IMAGENET_THEN_BYOL_DOMAIN = "SUP_IMAGENET_THEN_BYOL_DOMAIN"
    BYOL_IMAGENET_THEN_BYOL_DOMAIN = "BYOL_IMAGENET_THEN_BYOL_DOMAIN"

    @property
    def uses_imagenet(self) -> bool:
        return "IMAGENET" in self.value

    @property
    def uses_domain_ssl(self) -> bool:
        return self.value.endswith("BYOL_DOMAIN")

    @property
    def label(self) -> str:
        return {
            "RANDOM_INIT": "Random init",
            "SUP_IMAGENET": "Supervised ImageNet",
            "BYOL_IMAGENET": "BYOL ImageNet",
            "BYOL_DOMAIN": "BYOL domain",
            "SUP_IMAGENET_THEN_BYOL_DOMAIN": "Supervised ImageNet + BYOL domain",
            "BYOL_IMAGENET_THEN_BYOL_DOMAIN": "BYOL ImageNet + BYOL domain",
        }[self.value]


class PipelineSpec(StrictModel):
    """One pretraining pipeline; see ``check`` for the required fields."""

    kind: PipelineKind
    external_weights_path: Optional[Path] = None
    domain_ssl: Optional[ByolConfig] = None

    def check(self) -> None:
        """
        Validate kind-dependent requirements.

        Raises:
            ConfigurationError: If ImageNet weights or a domain SSL config is missing.
        """
        if self.kind.uses_imagenet and self.external_weights_path is None:
            raise ConfigurationError(
                f"Pipeline {self.kind.value} requires external_weights_path"
            )
        if self.kind.uses_domain_ssl and self.domain_ssl is None:
            raise ConfigurationError(f"Pipeline {self.kind.value} requires domain_ssl")

    @classmethod
    def default_for(cls, kind: PipelineKind) -> "PipelineSpec":
        """Specialist SSL runs 400 epochs, hierarchical SSL 25."""
        domain_ssl = None
        if kind.uses_domain_ssl:
            epochs = 400 if kind == PipelineKind.BYOL_DOMAIN else 25
            domain_ssl = ByolConfig(epochs=epochs)
        return cls(kind=kind, domain_ssl=domain_ssl)


# ----- Harness -----


DEFAULT_SUBSET_FRACTIONS = [0.005, 0.01, 0.02, 0.05, 0.10, 0.25, 0.50, 1.0]


class SweepSpec(StrictModel):
    """
    Data-efficiency grid. Explicit ``subset_sizes`` take precedence over
    the fractional grid (which always includes the single-sample point).
    """

    name: str = "data-efficiency"
    subset_sizes: Optional[List[int]] = None
    subset_fractions: List[float] = Field(default_factory=lambda: list(DEFAULT_SUBSET_FRACTIONS))
    seeds: List[int] = Field(default_factory=lambda: list(range(10)))
    sweep_seed: int = 0
    pipelines: List[PipelineSpec] = Field(
        default_factory=lambda: [PipelineSpec.default_for(kind) for kind in PipelineKind]
    )

    @model_validator(mode="after")
    def _check_lists(self) -> "SweepSpec":
        if not self.seeds or not self.pipelines:
            raise ValueError("seeds and pipelines must be non-empty")
        if self.subset_sizes is not None and (
            not self.subset_sizes or min(self.subset_sizes) < 1
        ):
            raise ValueError("subset_sizes must be non-empty and >= 1")
        if self.subset_sizes is None and not self.subset_fractions:
            raise ValueError("subset_fractions must be non-empty")
        if any(not (0.0 < f <= 1.0) for f in self.subset_fractions):
            raise ValueError("subset_fractions must lie in (0, 1]")
        if len(set(self.seeds)) != len(self.seeds):
            raise ValueError("seeds must be distinct")
        kinds = [p.kind for p in self.pipelines]
        if len(set(kinds)) != len(kinds):
            raise ValueError("pipelines must have distinct kinds")
        return self


class AblationConfig(StrictModel):
    """Domain-pretraining-epoch ablation starting from a base pipeline's encoder."""

    name: str = "pretrain-epochs"
    base: PipelineSpec = Field(default_factory=lambda: PipelineSpec(kind=PipelineKind.RANDOM_INIT))
    epochs: int = Field(default=5, ge=0)
    seeds: List[int] = Field(default_factory=lambda: [0, 1])
    subset_size: Optional[int] = Field(default=None, ge=1)


# ----- Data -----


class DataConfig(StrictModel):
    """
    Data source. ``synthetic`` renders phantoms; ``directory`` reads a
    manifest-described directory (``root``, or the data-root setting).
    """

    source: Literal["synthetic", "directory"] = "synthetic"
    root: Optional[Path] = None
    n_patients: int = Field(default=20, ge=1)
    frames_per_cycle: int = Field(default=25, ge=2)
    slices_per_frame: int = Field(default=10, ge=1)
    image_size: int = Field(default=64, ge=16)
    seed: int = 0
    split_fractions: Tuple[float, float, float] = (0.70, 0.15, 0.15)

    @field_validator("split_fractions")
    @classmethod
    def _check_split(cls, value: Tuple[float, float, float]) -> Tuple[float, float, float]:
        if any(f < 0 for f in value) or not math.isclose(sum(value), 1.0, abs_tol=1e-6):
            raise ValueError("split_fractions must be non-negative and sum to 1")
        return value


class FinetuneSection(StrictModel):
    """Single fine-tuning run used by the ``finetune`` command."""

    encoder_checkpoint: Optional[Path] = None
    subset_size: Optional[int] = Field(default=None, ge=1)
    subset_seed: int = 0


# ----- Root -----


class ExperimentConfig(StrictModel):
    """Root of the experiment configuration file."""

    name: str = "experiment"
    seed: int = 0
    deterministic: bool = True
    output_dir: Path = Path("runs")
    jobs: int = Field(default=1, ge=1)
    data: DataConfig = Field(default_factory=DataConfig)
    augment: AugmentConfig = Field(default_factory=AugmentConfig)
    encoder: EncoderConfig = Field(default_factory=EncoderConfig)
    byol: ByolConfig = Field(default_factory=ByolConfig)
    seg: SegConfig = Field(default_factory=SegConfig)
    finetune: FinetuneSection = Field(default_factory=FinetuneSection)
    pipelines: List[PipelineSpec] = Field(
        default_factory=lambda: [
            PipelineSpec(kind=PipelineKind.RANDOM_INIT),
            PipelineSpec.default_for(PipelineKind.BYOL_DOMAIN),
        ]
    )
    sweep: SweepSpec = Field(default_factory=SweepSpec)
    ablation: AblationConfig = Field(default_factory=AblationConfig)
