"""
Shared fixtures: tiny synthetic datasets and desk-scale configurations.
"""

from typing import Dict

import pytest
import torch

from app.core.config import get_settings
from app.core.seeding import torch_generator
from app.models.dataset import SemiSupervisedDataset, SplitTag
from app.models.records import LearningCurve, RunRecord, RunStatus
from app.models.schemas import AugmentConfig, ByolConfig, EncoderConfig, HeadConfig, SegConfig
from app.models.weights import NetworkWeights
from app.services.data_service import generate_synthetic_dataset, split_by_patient
from app.services.network_service import build_encoder

IMAGE_SIZE = 32


@pytest.fixture(autouse=True)
def _fresh_settings(monkeypatch):
    for name in ("CARDIOSEG_DATA_ROOT", "CARDIOSEG_OUTPUT_DIR", "CARDIOSEG_JOBS", "CARDIOSEG_DETERMINISTIC"):
        monkeypatch.delenv(name, raising=False)
    get_settings.cache_clear()
    yield
    get_settings.cache_clear()


@pytest.fixture(scope="session")
def tiny_dataset() -> SemiSupervisedDataset:
    """4 patients x 4 frames x 2 slices at 32 x 32; 16 labeled slices."""
    return generate_synthetic_dataset(
        n_patients=4, frames_per_cycle=4, slices_per_frame=2, image_size=IMAGE_SIZE, seed=0
    )


@pytest.fixture(scope="session")
def tiny_splits(tiny_dataset) -> Dict[SplitTag, SemiSupervisedDataset]:
    """TRAIN holds 2 patients, VAL and TEST one each."""
    return split_by_patient(tiny_dataset, (0.5, 0.25, 0.25), seed=0)


@pytest.fixture
def encoder_cfg() -> EncoderConfig:
    return EncoderConfig()


@pytest.fixture
def augment_cfg() -> AugmentConfig:
    return AugmentConfig(output_size=IMAGE_SIZE)


@pytest.fixture
def byol_cfg() -> ByolConfig:
    return ByolConfig(epochs=1, batch_size=4, head=HeadConfig(projector=(16, 8), predictor=(16, 8)))


@pytest.fixture
def seg_cfg() -> SegConfig:
    return SegConfig(total_steps=6, batch_size=4, eval_every_steps=2)


@pytest.fixture
def tiny_encoder(encoder_cfg) -> NetworkWeights:
    return build_encoder(encoder_cfg, torch_generator(0, "encoder"))


@pytest.fixture
def rgb_encoder() -> NetworkWeights:
    """3-channel TINY encoder standing in for an ImageNet import."""
    return build_encoder(EncoderConfig(in_channels=3), torch_generator(0, "imagenet"))


@pytest.fixture
def double_precision():
    previous = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    yield
    torch.set_default_dtype(previous)


@pytest.fixture
def make_record():
    """Factory for DONE run records with a short linear learning curve."""

    def factory(pipeline: str, subset_size: int, seed: int, test_loss: float, slope: float = 0.1) -> RunRecord:
        curve = LearningCurve(
            steps=[10, 20, 30],
            train_loss=[0.9, 0.7, 0.6],
            eval_iou=[slope, 2 * slope, 3 * slope],
            eval_loss=[0.8, 0.6, 0.5],
        )
        return RunRecord(
            pipeline=pipeline,
            subset_size=subset_size,
            seed=seed,
            curve=curve,
            test_loss=test_loss,
            test_iou=1.0 - test_loss,
            wall_clock_seconds=1.0,
            status=RunStatus.DONE,
            subset_indices=list(range(subset_size)),
            weights_digest="0" * 64,
        )

    return factory
