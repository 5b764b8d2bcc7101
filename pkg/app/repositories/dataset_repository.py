"""
Directory dataset store.

Layout::

    <root>/manifest.txt
    <root>/<patient_id>/f<frame>_s<slice>.png        grayscale image (8 or 16 bit)
    <root>/<patient_id>/f<frame>_s<slice>_mask.png   raw class ids (8 bit), ED/ES only

The manifest holds one slice per line as whitespace-separated ``key=value``
pairs (``file``, ``patient_id``, ``frame_tag``, ``frame_index``,
``slice_index``, ``split`` and optionally ``mask``); ``#`` starts a comment.
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Union

import numpy as np
from PIL import Image

from app.core.exceptions import DatasetFormatError, DatasetIntegrityError, RefusalError
from app.core.logging import get_logger
from app.models.dataset import FrameTag, SemiSupervisedDataset, SliceRecord, SplitTag

logger = get_logger(__name__)

MANIFEST_NAME = "manifest.txt"
REQUIRED_KEYS = ("file", "patient_id", "frame_tag", "slice_index")
IO_WORKERS = 8


@dataclass(frozen=True)
class ManifestEntry:
    """One parsed manifest line."""

    file: str
    patient_id: str
    frame_tag: FrameTag
    frame_index: int
    slice_index: int
    split: SplitTag
    mask: Optional[str]
    line_number: int


def _parse_line(line: str, line_number: int) -> Optional[ManifestEntry]:
    content = line.split("#", 1)[0].strip()
    if not content:
        return None

    fields: Dict[str, str] = {}
    for token in content.split():
        key, sep, value = token.partition("=")
        if not sep or not key:
            raise DatasetFormatError(f"Manifest line {line_number}: malformed token '{token}'")
        fields[key] = value

    missing = [k for k in REQUIRED_KEYS if k not in fields]
    if missing:
        raise DatasetFormatError(f"Manifest line {line_number}: missing keys {missing}")

    try:
        return ManifestEntry(
            file=fields["file"],
            patient_id=fields["patient_id"],
            frame_tag=FrameTag(fields["frame_tag"].upper()),
            frame_index=int(fields.get("frame_index", 0)),
            slice_index=int(fields["slice_index"]),
            split=SplitTag(fields.get("split", SplitTag.TRAIN.value).upper()),
            mask=fields.get("mask") or None,
            line_number=line_number,
        )
    except ValueError as e:
        raise DatasetFormatError(f"Manifest line {line_number}: {e}")


def read_manifest(root: Path) -> List[ManifestEntry]:
    """
    Parse ``<root>/manifest.txt``.

    Raises:
        DatasetFormatError: If the manifest is missing or malformed.
    """
    path = Path(root) / MANIFEST_NAME
    if not path.is_file():
        raise DatasetFormatError(f"No {MANIFEST_NAME} found in {root}")
    entries = []
    for number, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        entry = _parse_line(line, number)
        if entry is not None:
            entries.append(entry)
    return entries


def read_grayscale(path: Path) -> np.ndarray:
    """
    8- or 16-bit grayscale PNG normalized to [0, 1] float32.

    Raises:
        DatasetFormatError: On colour images or 32-bit values outside the
            16-bit range.
    """
    with Image.open(path) as img:
        mode = img.mode
        array = np.asarray(img)
    if mode == "I" and (array.min() < 0 or array.max() > 65535):
        raise DatasetFormatError(
            f"{path}: pixel values [{int(array.min())}, {int(array.max())}] exceed the 16-bit range"
        )
    if mode in ("I;16", "I;16B", "I;16L", "I"):
        scale = 65535.0
    elif mode == "L":
        scale = 255.0
    else:
        raise DatasetFormatError(f"{path}: unsupported image mode {mode}, expected grayscale")
    return (array.astype(np.float64) / scale).astype(np.float32)


def read_mask(path: Path) -> np.ndarray:
    with Image.open(path) as img:
        if img.mode not in ("L", "P"):
            raise DatasetFormatError(f"{path}: mask must be an 8-bit PNG, got mode {img.mode}")
        return np.asarray(img, dtype=np.uint8).copy()


def _load_entry(root: Path, entry: ManifestEntry) -> SliceRecord:
    image_path = root / entry.file
    if not image_path.is_file():
        raise DatasetFormatError(f"Manifest line {entry.line_number}: missing file {image_path}")
    image = read_grayscale(image_path)

    mask = None
    if entry.mask is not None:
        mask_path = root / entry.mask
        if not mask_path.is_file():
            raise DatasetFormatError(f"Manifest line {entry.line_number}: missing mask {mask_path}")
        mask = read_mask(mask_path)
        if mask.shape != image.shape:
            raise DatasetIntegrityError(
                f"Mask {mask_path} has shape {mask.shape} but image {image_path} has {image.shape}"
            )

    try:
        return SliceRecord(
            image=image,
            mask=mask,
            patient_id=entry.patient_id,
            frame_tag=entry.frame_tag,
            slice_index=entry.slice_index,
            frame_index=entry.frame_index,
        )
    except DatasetIntegrityError as e:
        raise DatasetIntegrityError(f"{image_path}: {e.detail}")


def _warn_empty_patients(root: Path, entries: List[ManifestEntry]) -> None:
    listed = {entry.patient_id for entry in entries}
    for child in sorted(p for p in root.iterdir() if p.is_dir()):
        if not any(child.iterdir()):
            logger.warning("Skipping empty patient directory", extra={"patient_dir": str(child)})
        elif child.name not in listed:
            logger.warning("Patient directory not referenced by manifest", extra={"patient_dir": str(child)})


def _load_records(root: Path) -> List[tuple]:
    root = Path(root)
    if not root.is_dir():
        raise DatasetFormatError(f"Dataset root {root} does not exist")
    entries = read_manifest(root)
    _warn_empty_patients(root, entries)

    with ThreadPoolExecutor(max_workers=IO_WORKERS) as pool:
        records = list(pool.map(lambda e: _load_entry(root, e), entries))

    pairs = sorted(zip(entries, records), key=lambda pair: pair[1].key)
    keys = [record.key for _, record in pairs]
    if len(set(keys)) != len(keys):
        raise DatasetIntegrityError(f"Manifest in {root} lists duplicate (patient, frame, slice) keys")
    return [(entry.split, record) for entry, record in pairs]


def load_directory_splits(root: Path) -> Dict[SplitTag, SemiSupervisedDataset]:
    """
    Load a directory dataset keeping the manifest's patient split.

    Raises:
        DatasetFormatError: On a missing manifest or missing files.
        DatasetIntegrityError: On mask/image shape mismatch or a patient
            assigned to more than one split.
    """
    loaded = _load_records(root)
    splits: Dict[SplitTag, List[SliceRecord]] = {tag: [] for tag in SplitTag}
    patient_split: Dict[str, SplitTag] = {}
    for split, record in loaded:
        previous = patient_split.setdefault(record.patient_id, split)
        if previous != split:
            raise DatasetIntegrityError(
                f"Patient {record.patient_id} appears in splits {previous.value} and {split.value}"
            )
        splits[split].append(record)

    datasets = {
        tag: SemiSupervisedDataset(slices=tuple(records), split_tag=tag)
        for tag, records in splits.items()
    }
    logger.info(
        "Loaded directory dataset",
        extra={"root": str(root), "slices": {t.value: len(d) for t, d in datasets.items()}},
    )
    return datasets


def load_directory_dataset(root: Path) -> SemiSupervisedDataset:
    """Load every slice of a directory dataset as one pooled dataset."""
    loaded = _load_records(root)
    return SemiSupervisedDataset(slices=tuple(record for _, record in loaded))


def _slice_stem(record: SliceRecord) -> str:
    return f"{record.patient_id}/f{record.frame_index:03d}_s{record.slice_index:03d}"


def write_directory_dataset(
    datasets: Union[SemiSupervisedDataset, Mapping[SplitTag, SemiSupervisedDataset]],
    root: Path,
    force: bool = False,
) -> Path:
    """
    Write datasets in the layout ``load_directory_splits`` reads.

    A pooled dataset (``split_tag=None``) is written as TRAIN.

    Returns:
        Path of the written manifest.

    Raises:
        RefusalError: If ``root`` exists and is non-empty without ``force``.
    """
    root = Path(root)
    if root.exists() and any(root.iterdir()) and not force:
        raise RefusalError(f"Target {root} is not empty; pass --force to overwrite")
    root.mkdir(parents=True, exist_ok=True)

    if isinstance(datasets, SemiSupervisedDataset):
        datasets = {datasets.split_tag or SplitTag.TRAIN: datasets}

    lines = ["# cardioseg directory dataset manifest"]
    for split in SplitTag:
        dataset = datasets.get(split)
        if dataset is None:
            continue
        for record in dataset.slices:
            stem = _slice_stem(record)
            (root / record.patient_id).mkdir(parents=True, exist_ok=True)
            pixels = np.round(np.clip(record.image, 0.0, 1.0) * 65535.0).astype(np.uint16)
            Image.fromarray(pixels).save(root / f"{stem}.png")
            line = (
                f"file={stem}.png patient_id={record.patient_id} "
                f"frame_tag={record.frame_tag.value} frame_index={record.frame_index} "
                f"slice_index={record.slice_index} split={split.value}"
            )
            if record.mask is not None:
                Image.fromarray(record.mask.astype(np.uint8)).save(root / f"{stem}_mask.png")
                line += f" mask={stem}_mask.png"
            lines.append(line)

    manifest = root / MANIFEST_NAME
    manifest.write_text("\n".join(lines) + "\n", encoding="utf-8")
    logger.info("Wrote directory dataset", extra={"root": str(root), "slices": len(lines) - 1})
    return manifest
