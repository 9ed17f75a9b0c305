"""Dataset ingestion, half-scale downsampling and seeded random crops."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import HistopipeError
from .seeding import keyed_rng

#: Canonical class order; indices into probability vectors follow it.
CLASSES = ("normal", "benign", "in_situ", "invasive")

LABELS_HEADER = ["image_id", "filename", "label"]


class DatasetError(HistopipeError):
    """Malformed dataset layout or labels file."""


class MissingFile(DatasetError):
    pass


class UnreadableImage(DatasetError):
    pass


class UnknownLabel(DatasetError):
    pass


class DuplicateImageId(DatasetError):
    pass


class OddDimensions(HistopipeError):
    """Half-scale downsampling needs even width and height."""


class CropLargerThanImage(HistopipeError):
    pass


@dataclass
class ImageRecord:
    """One labeled image; pixels are decoded lazily from ``source_path``."""

    image_id: str
    label: str
    source_path: Path

    @property
    def pixels(self) -> np.ndarray:
        """Decode the image as an (H, W, 3) uint8 array. Not cached."""
        return load_image(self.source_path)


@dataclass
class DatasetManifest:
    records: list[ImageRecord]
    class_counts: dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        if not self.class_counts:
            counts = {c: 0 for c in CLASSES}
            for rec in self.records:
                counts[rec.label] += 1
            self.class_counts = counts

    def record_of(self, image_id: str) -> ImageRecord:
        for rec in self.records:
            if rec.image_id == image_id:
                return rec
        raise KeyError(image_id)

    @property
    def image_ids(self) -> list[str]:
        return [rec.image_id for rec in self.records]

    @property
    def label_of(self) -> dict[str, str]:
        return {rec.image_id: rec.label for rec in self.records}


def load_image(path: Path | str) -> np.ndarray:
    """Decode an 8-bit RGB image file to an (H, W, 3) uint8 array."""
    path = Path(path)
    if not path.exists():
        raise MissingFile(str(path))
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
    except (UnidentifiedImageError, OSError) as exc:
        raise UnreadableImage(f"{path}: {exc}") from exc
    return arr


def load_dataset(root: Path | str, labels_file: Path | str) -> DatasetManifest:
    """Read the labels CSV and build a manifest of verified records.

    The labels file is UTF-8 CSV with header ``image_id,filename,label``;
    filenames are resolved against ``root``. Every referenced file must
    exist and open as an image (headers are checked here, full decode is
    deferred to :attr:`ImageRecord.pixels`).
    """
    root = Path(root)
    labels_path = Path(labels_file)
    if not labels_path.exists():
        raise MissingFile(str(labels_path))

    records: list[ImageRecord] = []
    seen: set[str] = set()
    with open(labels_path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != LABELS_HEADER:
            raise DatasetError(
                f"labels file header must be {','.join(LABELS_HEADER)}, got {header}"
            )
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 3:
                raise DatasetError(f"{labels_path}:{lineno}: expected 3 fields, got {len(row)}")
            image_id, filename, label = (f.strip() for f in row)
            if image_id in seen:
                raise DuplicateImageId(f"{labels_path}:{lineno}: duplicate id {image_id!r}")
            if label not in CLASSES:
                raise UnknownLabel(
                    f"{labels_path}:{lineno}: label {label!r} not one of {'|'.join(CLASSES)}"
                )
            path = root / filename
            if not path.exists():
                raise MissingFile(f"{labels_path}:{lineno}: {path}")
            try:
                with Image.open(path):
                    pass
            except (UnidentifiedImageError, OSError) as exc:
                raise UnreadableImage(f"{path}: {exc}") from exc
            seen.add(image_id)
            records.append(ImageRecord(image_id=image_id, label=label, source_path=path))
    return DatasetManifest(records=records)


def downscale_half(img: np.ndarray) -> np.ndarray:
    """Halve both dimensions by 2x2 block means (rounded half-up).

    Block means are exact and alias-free for factor 2, unlike bilinear
    resampling with its boundary conventions.
    """
    h, w = img.shape[:2]
    if h % 2 or w % 2:
        raise OddDimensions(f"image dimensions must be even, got {w}x{h}")
    blocks = (
        img[0::2, 0::2].astype(np.uint16)
        + img[1::2, 0::2]
        + img[0::2, 1::2]
        + img[1::2, 1::2]
    )
    return ((blocks + 2) >> 2).astype(np.uint8)


@dataclass(frozen=True)
class CropSpec:
    """Which square crops to draw from every image."""

    sizes: tuple[int, ...] = (400, 650)
    crops_per_size: int = 20
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "sizes", tuple(int(s) for s in self.sizes))
        if self.crops_per_size < 1:
            raise ValueError("crops_per_size must be >= 1")
        if any(s < 1 for s in self.sizes):
            raise ValueError("crop sizes must be positive")


@dataclass
class Crop:
    pixels: np.ndarray
    origin: tuple[int, int]  # (x, y) in source coordinates
    size: int
    image_id: str
    augmentation_index: int
    ordinal: int


def crop_origin(
    seed: int,
    image_id: str,
    augmentation_index: int,
    size: int,
    ordinal: int,
    width: int,
    height: int,
) -> tuple[int, int]:
    """Uniform crop origin, keyed so every draw is independent of call order."""
    rng = keyed_rng(seed, "crop", image_id, augmentation_index, size, ordinal)
    x = int(rng.integers(0, width - size + 1))
    y = int(rng.integers(0, height - size + 1))
    return x, y


def extract_random_crops(
    img: np.ndarray,
    spec: CropSpec,
    image_id: str,
    augmentation_index: int = 0,
) -> list[Crop]:
    """Draw ``crops_per_size`` uniform square crops for every size in the spec.

    Origins are a pure function of (spec.seed, image_id, augmentation_index,
    size, ordinal), so extraction parallelized any which way reproduces the
    same crops.
    """
    h, w = img.shape[:2]
    crops: list[Crop] = []
    for size in spec.sizes:
        if size > w or size > h:
            raise CropLargerThanImage(f"crop size {size} exceeds image {w}x{h}")
        for ordinal in range(spec.crops_per_size):
            x, y = crop_origin(spec.seed, image_id, augmentation_index, size, ordinal, w, h)
            crops.append(
                Crop(
                    pixels=img[y : y + size, x : x + size].copy(),
                    origin=(x, y),
                    size=size,
                    image_id=image_id,
                    augmentation_index=augmentation_index,
                    ordinal=ordinal,
                )
            )
    return crops
