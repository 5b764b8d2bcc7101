"""
Dataset service: synthetic phantom generation, patient-level splitting,
labeled-subset sampling and summary statistics.
"""

import math
from typing import Dict, List, Sequence, Tuple

import numpy as np

from app.core.exceptions import ArgumentError
from app.core.logging import get_logger
from app.models.dataset import (
    N_CLASSES,
    DatasetStats,
    FrameTag,
    SemiSupervisedDataset,
    SliceRecord,
    SplitTag,
    SubsetSpec,
)

logger = get_logger(__name__)

# Intensity levels roughly following cine-MRI contrast: bright blood pools,
# darker myocardium, low background.
BACKGROUND_LEVEL = 0.12
RV_LEVEL = 0.70
MYO_LEVEL = 0.35
LV_LEVEL = 0.85
NOISE_SIGMA = 0.03
QUANTIZATION = 65535.0


def es_frame_index(frames_per_cycle: int) -> int:
    """End-systole sits at peak contraction, half way through the cycle."""
    return frames_per_cycle // 2


def frame_tag_for(frame_index: int, frames_per_cycle: int) -> FrameTag:
    if frame_index == 0:
        return FrameTag.ED
    if frame_index == es_frame_index(frames_per_cycle):
        return FrameTag.ES
    return FrameTag.OTHER


def _render_phantom(
    size: int,
    center: Tuple[float, float],
    lv_axes: Tuple[float, float],
    myo_thickness: float,
    rv_thickness: float,
) -> np.ndarray:
    """Concentric ellipses: LV disk inside a MYO ring inside an RV ring."""
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    dy = ys - center[0]
    dx = xs - center[1]
    a, b = lv_axes

    def inside(extra: float) -> np.ndarray:
        return (dx / (a + extra)) ** 2 + (dy / (b + extra)) ** 2 <= 1.0

    mask = np.zeros((size, size), dtype=np.uint8)
    mask[inside(myo_thickness + rv_thickness)] = 1
    mask[inside(myo_thickness)] = 2
    mask[inside(0.0)] = 3
    return mask


def _render_image(mask: np.ndarray, gain: float, rng: np.random.Generator) -> np.ndarray:
    levels = np.array([BACKGROUND_LEVEL, RV_LEVEL, MYO_LEVEL, LV_LEVEL]) * gain
    image = levels[mask] + rng.normal(0.0, NOISE_SIGMA, size=mask.shape)
    image = np.clip(image, 0.0, 1.0)
    # 16-bit grid keeps the PNG round trip lossless
    return (np.round(image * QUANTIZATION) / QUANTIZATION).astype(np.float32)


def generate_synthetic_dataset(
    n_patients: int,
    frames_per_cycle: int,
    slices_per_frame: int,
    image_size: int,
    seed: int,
) -> SemiSupervisedDataset:
    """
    Render a cardiac-like cine dataset of concentric-ellipse phantoms.

    Each patient has one cycle of ``frames_per_cycle`` frames; frame 0 is ED
    and the peak-contraction frame is ES, and only those two are annotated.
    Geometry is jittered per patient, shrinks towards the apex across slices
    and contracts over the cycle.

    Raises:
        ArgumentError: On counts < 1, frames_per_cycle < 2 or image_size < 16.
    """
    if min(n_patients, frames_per_cycle, slices_per_frame) < 1:
        raise ArgumentError("n_patients, frames_per_cycle and slices_per_frame must be >= 1")
    if frames_per_cycle < 2:
        raise ArgumentError("frames_per_cycle must be >= 2 to hold ED and ES")
    if image_size < 16:
        raise ArgumentError("image_size must be >= 16")

    root = np.random.SeedSequence(seed)
    slices: List[SliceRecord] = []
    width = len(str(n_patients - 1))

    for patient_index, child in enumerate(root.spawn(n_patients)):
        rng = np.random.default_rng(child)
        patient_id = f"patient{patient_index:0{width}d}"
        center = (
            image_size * (0.5 + rng.uniform(-0.05, 0.05)),
            image_size * (0.5 + rng.uniform(-0.05, 0.05)),
        )
        lv_radius = image_size * rng.uniform(0.12, 0.16)
        aspect = rng.uniform(0.85, 1.15)
        myo = image_size * rng.uniform(0.06, 0.08)
        rv = image_size * rng.uniform(0.06, 0.08)
        gain = rng.uniform(0.9, 1.1)

        for frame_index in range(frames_per_cycle):
            contraction = 1.0 - 0.25 * math.sin(math.pi * frame_index / frames_per_cycle) ** 2
            tag = frame_tag_for(frame_index, frames_per_cycle)
            for slice_index in range(slices_per_frame):
                taper = 1.0 - 0.3 * slice_index / max(slices_per_frame - 1, 1)
                radius = lv_radius * taper * contraction
                mask = _render_phantom(
                    image_size, center, (radius, radius * aspect), myo * taper, rv * taper
                )
                image = _render_image(mask, gain, rng)
                slices.append(
                    SliceRecord(
                        image=image,
                        mask=mask if tag.is_labeled else None,
                        patient_id=patient_id,
                        frame_tag=tag,
                        slice_index=slice_index,
                        frame_index=frame_index,
                    )
                )

    dataset = SemiSupervisedDataset(slices=tuple(slices))
    logger.info(
        "Generated synthetic dataset",
        extra={"n_slices": len(dataset), "n_labeled": dataset.n_labeled, "seed": seed},
    )
    return dataset


def split_by_patient(
    dataset: SemiSupervisedDataset,
    fractions: Sequence[float] = (0.70, 0.15, 0.15),
    seed: int = 0,
) -> Dict[SplitTag, SemiSupervisedDataset]:
    """
    Seeded patient-disjoint split.

    VAL and TEST receive round(fraction * n_patients) patients each (at least
    one when three or more patients exist and the fraction is positive); TRAIN
    keeps the rest.
    """
    patients = dataset.patient_ids
    n = len(patients)
    order = list(np.random.default_rng(seed).permutation(n))
    counts = [0, 0]
    if n >= 3:
        counts = [max(1 if f > 0 else 0, math.floor(f * n + 0.5)) for f in fractions[1:]]
        while n - sum(counts) < 1:
            counts[int(np.argmax(counts))] -= 1
    n_val, n_test = counts
    shuffled = [patients[i] for i in order]
    groups = {
        SplitTag.VAL: shuffled[:n_val],
        SplitTag.TEST: shuffled[n_val:n_val + n_test],
        SplitTag.TRAIN: shuffled[n_val + n_test:],
    }
    return {tag: dataset.select_patients(ids, tag) for tag, ids in groups.items()}


def sample_labeled_subset(dataset: SemiSupervisedDataset, spec: SubsetSpec) -> List[int]:
    """
    Uniform sample without replacement from the labeled slices, ignoring
    patient boundaries. Fractions round up.

    Returns:
        Sorted dataset indices.

    Raises:
        ArgumentError: If more slices are requested than are labeled.
    """
    labeled = np.asarray(dataset.labeled_indices, dtype=np.int64)
    count = spec.resolve(len(labeled))
    if count > len(labeled):
        raise ArgumentError(f"Requested {count} labeled slices but only {len(labeled)} exist")
    rng = np.random.default_rng(spec.seed)
    chosen = rng.choice(labeled, size=count, replace=False)
    return sorted(int(i) for i in chosen)


def dataset_stats(*datasets: SemiSupervisedDataset) -> DatasetStats:
    """Counts per split, labeled fraction and class pixel frequencies."""
    n_slices = sum(len(ds) for ds in datasets)
    n_labeled = sum(ds.n_labeled for ds in datasets)
    per_split: Dict[str, int] = {}
    patients = set()
    pixel_counts = np.zeros(N_CLASSES, dtype=np.int64)

    for ds in datasets:
        key = ds.split_tag.value if ds.split_tag else "ALL"
        per_split[key] = per_split.get(key, 0) + len(ds)
        patients.update(ds.patient_ids)
        for index in ds.labeled_indices:
            pixel_counts += np.bincount(ds[index].mask.ravel(), minlength=N_CLASSES)[:N_CLASSES]

    total_pixels = pixel_counts.sum()
    frequencies = (
        tuple(float(c) / total_pixels for c in pixel_counts)
        if total_pixels
        else tuple(0.0 for _ in range(N_CLASSES))
    )
    return DatasetStats(
        n_slices=n_slices,
        n_labeled=n_labeled,
        n_patients=len(patients),
        labeled_fraction=n_labeled / n_slices if n_slices else 0.0,
        slices_per_split=per_split,
        class_frequencies=frequencies,
    )
