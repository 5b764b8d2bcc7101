"""
Domain models for the semi-supervised slice dataset.

A dataset is an ordered, immutable collection of 2D slices. Only slices of
annotated cardiac phases (ED and ES) carry a segmentation mask.
"""

import math
from dataclasses import dataclass, field
from enum import Enum
from fractions import Fraction
from typing import List, Optional, Tuple

import numpy as np

from app.core.exceptions import ArgumentError, DatasetIntegrityError

N_CLASSES = 4
CLASS_NAMES = ("background", "RV", "MYO", "LV")


def fraction_count(fraction: float, n: int) -> int:
    """
    ``ceil(fraction * n)`` evaluated on the decimal value of ``fraction``, so
    float noise such as ``0.07 * 100 == 7.000000000000001`` does not round up.
    """
    return math.ceil(Fraction(repr(float(fraction))) * n)


class FrameTag(str, Enum):
    """Cardiac phase of a frame; only ED and ES frames are annotated."""

    ED = "ED"
    ES = "ES"
    OTHER = "OTHER"

    @property
    def is_labeled(self) -> bool:
        return self in (FrameTag.ED, FrameTag.ES)


class SplitTag(str, Enum):
    """Patient-level dataset split."""

    TRAIN = "TRAIN"
    VAL = "VAL"
    TEST = "TEST"


@dataclass(frozen=True)
class SliceRecord:
    """
    A single 2D slice.

    Attributes:
        image: H x W float32 array in [0, 1].
        mask: H x W uint8 class-id array, present exactly for ED/ES frames.
        patient_id: Opaque patient identifier.
        frame_tag: Cardiac phase tag.
        slice_index: Position of the slice within its frame (>= 0).
        frame_index: Position of the frame within the cycle (>= 0).
    """

    image: np.ndarray
    mask: Optional[np.ndarray]
    patient_id: str
    frame_tag: FrameTag
    slice_index: int
    frame_index: int = 0

    def __post_init__(self) -> None:
        if self.image.ndim != 2 or self.image.size == 0:
            raise DatasetIntegrityError(
                f"Slice {self.key} image must be a non-empty 2D array"
            )
        if not np.isfinite(self.image).all() or self.image.min() < 0.0 or self.image.max() > 1.0:
            raise DatasetIntegrityError(
                f"Slice {self.key} image values must lie in [0, 1], "
                f"got [{float(np.nanmin(self.image)):.4g}, {float(np.nanmax(self.image)):.4g}]"
            )
        if (self.mask is not None) != self.frame_tag.is_labeled:
            raise DatasetIntegrityError(
                f"Slice {self.key} has frame tag {self.frame_tag.value} "
                f"but mask {'present' if self.mask is not None else 'absent'}"
            )
        if self.mask is not None:
            if self.mask.shape != self.image.shape:
                raise DatasetIntegrityError(
                    f"Slice {self.key} mask shape {self.mask.shape} "
                    f"!= image shape {self.image.shape}"
                )
            if self.mask.size and (self.mask.min() < 0 or self.mask.max() >= N_CLASSES):
                raise DatasetIntegrityError(f"Slice {self.key} mask has invalid class ids")
        if self.slice_index < 0 or self.frame_index < 0:
            raise DatasetIntegrityError(f"Slice {self.key} has negative indices")

    @property
    def key(self) -> Tuple[str, int, int]:
        return (self.patient_id, self.frame_index, self.slice_index)

    @property
    def is_labeled(self) -> bool:
        return self.mask is not None


@dataclass(frozen=True)
class SemiSupervisedDataset:
    """
    Immutable slice collection with its labeled subset.

    Attributes:
        slices: Ordered slices.
        split_tag: Split this dataset represents; ``None`` for a pooled,
            unsplit collection.
        labeled_indices: Sorted indices of slices carrying a mask (derived).
    """

    slices: Tuple[SliceRecord, ...]
    split_tag: Optional[SplitTag] = None
    labeled_indices: Tuple[int, ...] = field(init=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "slices", tuple(self.slices))
        labeled = tuple(i for i, s in enumerate(self.slices) if s.is_labeled)
        object.__setattr__(self, "labeled_indices", labeled)

    def __len__(self) -> int:
        return len(self.slices)

    def __getitem__(self, index: int) -> SliceRecord:
        return self.slices[index]

    @property
    def patient_ids(self) -> List[str]:
        return sorted({s.patient_id for s in self.slices})

    @property
    def n_labeled(self) -> int:
        return len(self.labeled_indices)

    def select_patients(self, patient_ids, split_tag: Optional[SplitTag]) -> "SemiSupervisedDataset":
        """Sub-dataset restricted to the given patients, order preserved."""
        wanted = set(patient_ids)
        return SemiSupervisedDataset(
            slices=tuple(s for s in self.slices if s.patient_id in wanted),
            split_tag=split_tag,
        )


@dataclass(frozen=True)
class SubsetSpec:
    """
    Size of a labeled subset: an absolute ``count`` or a ``fraction`` in (0, 1].

    Exactly one of the two must be set.
    """

    count: Optional[int] = None
    fraction: Optional[float] = None
    seed: int = 0

    def __post_init__(self) -> None:
        if (self.count is None) == (self.fraction is None):
            raise ArgumentError("SubsetSpec needs exactly one of count or fraction")
        if self.count is not None and self.count < 1:
            raise ArgumentError(f"Subset count must be >= 1, got {self.count}")
        if self.fraction is not None and not (0.0 < self.fraction <= 1.0):
            raise ArgumentError(f"Subset fraction must lie in (0, 1], got {self.fraction}")

    def resolve(self, n_labeled: int) -> int:
        """Number of slices this spec selects from ``n_labeled`` candidates."""
        if self.count is not None:
            return self.count
        return fraction_count(self.fraction, n_labeled)


@dataclass(frozen=True)
class DatasetStats:
    """Summary counts for one or more datasets."""

    n_slices: int
    n_labeled: int
    n_patients: int
    labeled_fraction: float
    slices_per_split: dict
    class_frequencies: Tuple[float, ...]
