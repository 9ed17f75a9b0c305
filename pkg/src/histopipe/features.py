"""Descriptor extraction: crop encoders, p-norm pooling, descriptor stores.

Real encoders are pretrained convolutional networks consumed as ONNX
graphs with the fully connected head removed; each configured tap layer is
global-average-pooled and the pooled vectors concatenated. The stub
encoder replaces them in desk-scale runs: a fixed-seed random projection
of the bicubic-resized 32x32 crop through a rectifier, so the whole
pipeline is testable without hundred-megabyte weight files.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, replace
from functools import lru_cache
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import HistopipeError
from .patches import Crop, CropSpec, ImageRecord, downscale_half, extract_random_crops
from .seeding import keyed_rng
from . import stainlab


class EmptyFeatureMap(HistopipeError):
    pass


class ModelLoadError(HistopipeError):
    pass


class ShapeMismatch(HistopipeError):
    pass


class MixedProvenance(HistopipeError):
    """Descriptors from different (image, encoder, size, augmentation) pooled together."""


class NegativeFeature(HistopipeError):
    """Fractional-exponent pooling is undefined on negative features."""


class StoreFormatError(HistopipeError):
    """Descriptor store file fails magic/header/length validation."""


ENCODER_KINDS = ("resnet50", "inception_v3", "vgg16", "stub")
_KNOWN_LENGTHS = {"resnet50": 2048, "inception_v3": 2048, "vgg16": 1408}

#: Pixel scaling rules applied before a network consumes a crop.
PREPROCESS_PRESETS = {
    "raw": dict(scale=1.0, mean=(0.0, 0.0, 0.0), std=(1.0, 1.0, 1.0)),
    "unit": dict(scale=1 / 255.0, mean=(0.0, 0.0, 0.0), std=(1.0, 1.0, 1.0)),
    "imagenet_torch": dict(
        scale=1 / 255.0, mean=(0.485, 0.456, 0.406), std=(0.229, 0.224, 0.225)
    ),
    "imagenet_caffe": dict(
        scale=1.0, mean=(123.68, 116.779, 103.939), std=(1.0, 1.0, 1.0)
    ),
    "inception": dict(scale=1 / 127.5, mean=(1.0, 1.0, 1.0), std=(1.0, 1.0, 1.0)),
}

STUB_INPUT_SIDE = 32


@dataclass(frozen=True)
class EncoderSpec:
    """How to turn a crop into a fixed-length descriptor.

    ``encoder_id`` names the encoder kind; ``name`` (defaulting to the id)
    is the unique key under which descriptors and stores are filed, so
    several stub instances can coexist in one desk-scale configuration.
    """

    encoder_id: str
    name: str = ""
    model_path: str | None = None
    tap_layers: tuple[str, ...] = ()
    descriptor_len: int = 0
    input_preprocessing: str = "unit"

    def __post_init__(self):
        if self.encoder_id not in ENCODER_KINDS:
            raise ValueError(f"encoder_id must be one of {ENCODER_KINDS}")
        if not self.name:
            object.__setattr__(self, "name", self.encoder_id)
        object.__setattr__(self, "tap_layers", tuple(self.tap_layers))
        if self.encoder_id == "stub":
            if self.descriptor_len <= 0:
                object.__setattr__(self, "descriptor_len", 64)
        else:
            expected = _KNOWN_LENGTHS[self.encoder_id]
            if self.descriptor_len == 0:
                object.__setattr__(self, "descriptor_len", expected)
            elif self.descriptor_len != expected:
                raise ValueError(
                    f"{self.encoder_id} descriptors have length {expected}, "
                    f"got {self.descriptor_len}"
                )
            if not self.tap_layers:
                raise ValueError(f"{self.encoder_id} needs at least one tap layer")
        if self.input_preprocessing not in PREPROCESS_PRESETS:
            raise ValueError(
                f"unknown preprocessing {self.input_preprocessing!r}; "
                f"known: {sorted(PREPROCESS_PRESETS)}"
            )


@dataclass
class Descriptor:
    """Feature vector with full provenance."""

    values: np.ndarray
    image_id: str
    encoder_id: str
    crop_size: int
    augmentation_index: int
    crop_ordinal: int | None = None

    def provenance(self) -> tuple:
        return (self.encoder_id, self.values.shape[0], self.image_id,
                self.crop_size, self.augmentation_index)


@dataclass(frozen=True)
class PoolParams:
    p: float = 3.0

    def __post_init__(self):
        if self.p < 1:
            raise ValueError("pooling exponent must be >= 1")


def preprocess_pixels(pixels: np.ndarray, preset: str) -> np.ndarray:
    """Apply a preset scale/mean/std rule; returns float32 (H, W, 3)."""
    rule = PREPROCESS_PRESETS[preset]
    x = pixels.astype(np.float32) * np.float32(rule["scale"])
    x -= np.asarray(rule["mean"], dtype=np.float32)
    x /= np.asarray(rule["std"], dtype=np.float32)
    return x


def spatial_average_pool(fm: np.ndarray) -> np.ndarray:
    """Collapse an (H, W, C) feature map to its per-channel spatial mean."""
    fm = np.asarray(fm)
    if fm.ndim != 3:
        raise ValueError("feature map must be (height, width, channels)")
    if fm.shape[0] * fm.shape[1] == 0:
        raise EmptyFeatureMap("feature map has no spatial cells")
    return fm.mean(axis=(0, 1))


class StubEncoder:
    """Fixed random projection of the bicubic-resized 32x32 crop.

    The projection matrix is seeded from the encoder name and output
    length only, so every run of every process sees the same weights. The
    final rectifier keeps descriptors non-negative, which Eq.-style
    fractional-exponent pooling requires.
    """

    def __init__(self, spec: EncoderSpec):
        self.spec = spec
        rng = keyed_rng("stub-projection", spec.name, spec.descriptor_len)
        n_in = STUB_INPUT_SIDE * STUB_INPUT_SIDE * 3
        self.weights = (
            rng.standard_normal((spec.descriptor_len, n_in)) / np.sqrt(n_in)
        ).astype(np.float32)

    def _flatten(self, pixels: np.ndarray) -> np.ndarray:
        im = Image.fromarray(pixels).resize(
            (STUB_INPUT_SIDE, STUB_INPUT_SIDE), Image.BICUBIC
        )
        x = preprocess_pixels(np.asarray(im, dtype=np.uint8), self.spec.input_preprocessing)
        return x.reshape(-1)

    def encode_many(self, crops_pixels: list[np.ndarray]) -> np.ndarray:
        batch = np.stack([self._flatten(p) for p in crops_pixels])
        out = batch @ self.weights.T
        return np.maximum(out, 0.0, out)

    def encode(self, pixels: np.ndarray) -> np.ndarray:
        return self.encode_many([pixels])[0]


class OnnxEncoder:
    """Run crops through a serialized network and pool the tap outputs.

    The session is created lazily via onnxruntime (single intra-op thread
    for determinism); tests may inject any object with ``run`` and
    ``get_inputs`` instead.
    """

    def __init__(self, spec: EncoderSpec, session=None):
        self.spec = spec
        if session is None:
            if not spec.model_path:
                raise ModelLoadError(f"encoder {spec.name!r} has no model_path configured")
            path = Path(spec.model_path)
            if not path.exists():
                raise ModelLoadError(f"model file not found: {path}")
            try:
                import onnxruntime  # deliberate lazy import; optional extra
            except ImportError as exc:
                raise ModelLoadError(
                    "onnxruntime is required for ONNX encoders; "
                    "install histopipe[onnx]"
                ) from exc
            opts = onnxruntime.SessionOptions()
            opts.intra_op_num_threads = 1
            opts.inter_op_num_threads = 1
            try:
                session = onnxruntime.InferenceSession(
                    str(path), sess_options=opts, providers=["CPUExecutionProvider"]
                )
            except Exception as exc:
                raise ModelLoadError(f"{path}: {exc}") from exc
        self.session = session
        shape = self.session.get_inputs()[0].shape
        # Channel axis from the declared input shape; default NCHW.
        self.channels_first = not (len(shape) == 4 and shape[-1] == 3)
        self.input_name = self.session.get_inputs()[0].name

    def _pool_output(self, out: np.ndarray, layer: str) -> np.ndarray:
        if out.ndim != 4 or out.shape[0] != 1:
            raise ShapeMismatch(f"tap {layer!r}: expected a (1, ...) feature map, got {out.shape}")
        fm = out[0]
        if self.channels_first:
            fm = np.moveaxis(fm, 0, -1)
        return spatial_average_pool(fm)

    def encode(self, pixels: np.ndarray) -> np.ndarray:
        x = preprocess_pixels(pixels, self.spec.input_preprocessing)[np.newaxis]
        if self.channels_first:
            x = np.transpose(x, (0, 3, 1, 2))
        outputs = self.session.run(list(self.spec.tap_layers), {self.input_name: x})
        pooled = [
            self._pool_output(np.asarray(out), layer)
            for layer, out in zip(self.spec.tap_layers, outputs)
        ]
        vec = np.concatenate(pooled).astype(np.float32)
        if vec.shape[0] != self.spec.descriptor_len:
            raise ShapeMismatch(
                f"encoder {self.spec.name!r}: tap channels sum to {vec.shape[0]}, "
                f"spec says {self.spec.descriptor_len}"
            )
        return vec

    def encode_many(self, crops_pixels: list[np.ndarray]) -> np.ndarray:
        return np.stack([self.encode(p) for p in crops_pixels])


@lru_cache(maxsize=16)
def _cached_encoder(spec: EncoderSpec):
    if spec.encoder_id == "stub":
        return StubEncoder(spec)
    return OnnxEncoder(spec)


def make_encoder(spec: EncoderSpec):
    """Encoder instance for a spec; loaded once and shared (immutable after load)."""
    return _cached_encoder(spec)


def encode_crop(crop: Crop, spec: EncoderSpec) -> Descriptor:
    """Encode one crop into a descriptor with full provenance."""
    values = make_encoder(spec).encode(crop.pixels)
    return Descriptor(
        values=values,
        image_id=crop.image_id,
        encoder_id=spec.name,
        crop_size=crop.size,
        augmentation_index=crop.augmentation_index,
        crop_ordinal=crop.ordinal,
    )


def pnorm_pool(descriptors: list[Descriptor], params: PoolParams | None = None) -> Descriptor:
    """Combine N same-provenance descriptors elementwise:

        d_pool = ((1/N) * sum_i d_i**p) ** (1/p)

    p=1 is the arithmetic mean; p -> infinity approaches the elementwise
    max. Inputs are stacked in ascending crop-ordinal order before the
    reduction so the float result is bit-identical under any input
    permutation.
    """
    params = params or PoolParams()
    if not descriptors:
        raise ValueError("at least one descriptor required")
    prov = descriptors[0].provenance()
    for d in descriptors[1:]:
        if d.provenance() != prov:
            raise MixedProvenance(f"cannot pool {d.provenance()} with {prov}")

    ordinals = [d.crop_ordinal for d in descriptors]
    if all(o is not None for o in ordinals) and len(set(ordinals)) == len(ordinals):
        descriptors = sorted(descriptors, key=lambda d: d.crop_ordinal)
    stack = np.stack([np.asarray(d.values, dtype=np.float64) for d in descriptors])

    p = float(params.p)
    if stack.min() < 0 and p != round(p):
        raise NegativeFeature("negative features with a fractional pooling exponent")
    if p == 1.0:
        pooled = stack.mean(axis=0)
    else:
        powered = np.power(stack, p).mean(axis=0)
        # Odd integer p admits negative bases; take the signed root.
        pooled = np.copysign(np.power(np.abs(powered), 1.0 / p), powered)
    return Descriptor(
        values=pooled,
        image_id=descriptors[0].image_id,
        encoder_id=descriptors[0].encoder_id,
        crop_size=descriptors[0].crop_size,
        augmentation_index=descriptors[0].augmentation_index,
        crop_ordinal=None,
    )


def build_descriptor_set(
    record: ImageRecord,
    encoders: list[EncoderSpec],
    crop_spec: CropSpec,
    n_augmentations: int,
    stain_params: stainlab.MacenkoParams | None = None,
    seed: int = 0,
    *,
    scale_of: dict[int, str] | None = None,
    pool_params: PoolParams | None = None,
    affine: bool = True,
) -> list[Descriptor]:
    """Full per-image descriptor grid: n_augmentations x |sizes| x |encoders|.

    Each grid cell pools ``crops_per_size`` crop descriptors. ``scale_of``
    maps a crop size to "half" (default) or "original", selecting which
    scale of the augmented image that size is cut from.
    """
    stain_params = stain_params or stainlab.MacenkoParams()
    pool_params = pool_params or PoolParams()
    scale_of = scale_of or {}

    normalized = stainlab.normalize_stains(record.pixels, stain_params)
    conc = stainlab.separate_stains(
        normalized, stain_params.reference_stains, stain_params.i0
    )
    encoders_ordered = sorted(encoders, key=lambda s: s.name)
    out: list[Descriptor] = []
    for aug in range(n_augmentations):
        aug_params = stainlab.sample_augmentation(
            stainlab.augmentation_seed(seed, record.image_id, aug)
        )
        if not affine:
            aug_params = stainlab.strip_affine(aug_params)
        augmented = stainlab.apply_augmentation(
            conc, stain_params.reference_stains, aug_params, stain_params.i0
        )
        halved = None
        for size in crop_spec.sizes:
            if scale_of.get(size, "half") == "original":
                src = augmented
            else:
                if halved is None:
                    halved = downscale_half(augmented)
                src = halved
            crops = extract_random_crops(
                src,
                CropSpec(sizes=(size,), crops_per_size=crop_spec.crops_per_size,
                         seed=crop_spec.seed),
                record.image_id,
                aug,
            )
            for spec in encoders_ordered:
                encoder = make_encoder(spec)
                matrix = encoder.encode_many([c.pixels for c in crops])
                crop_descriptors = [
                    Descriptor(
                        values=matrix[i],
                        image_id=record.image_id,
                        encoder_id=spec.name,
                        crop_size=size,
                        augmentation_index=aug,
                        crop_ordinal=crops[i].ordinal,
                    )
                    for i in range(len(crops))
                ]
                out.append(pnorm_pool(crop_descriptors, pool_params))
    return out


# ---------------------------------------------------------------------------
# Descriptor store file format
#
#   8-byte magic "HPDESC01"
#   u32 little-endian header length
#   UTF-8 JSON header: encoder_id, crop_size, descriptor_len,
#                      image_ids (in row order), n_augmentations
#   row-major little-endian float32, rows ordered (image, augmentation)
# ---------------------------------------------------------------------------

STORE_MAGIC = b"HPDESC01"


def write_descriptor_store(
    path: Path | str,
    encoder_name: str,
    crop_size: int,
    image_ids: list[str],
    n_augmentations: int,
    rows: np.ndarray,
) -> None:
    rows = np.ascontiguousarray(rows, dtype="<f4")
    expected = len(image_ids) * n_augmentations
    if rows.shape[0] != expected:
        raise ValueError(f"{expected} rows expected, got {rows.shape[0]}")
    header = {
        "encoder_id": encoder_name,
        "crop_size": int(crop_size),
        "descriptor_len": int(rows.shape[1]),
        "image_ids": list(image_ids),
        "n_augmentations": int(n_augmentations),
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(STORE_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(rows.tobytes())


def read_descriptor_store(path: Path | str) -> tuple[dict, np.ndarray]:
    """Load and validate a store; returns (header, rows)."""
    path = Path(path)
    data = path.read_bytes()
    if len(data) < len(STORE_MAGIC) + 4 or data[: len(STORE_MAGIC)] != STORE_MAGIC:
        raise StoreFormatError(f"{path}: bad magic")
    (hlen,) = struct.unpack_from("<I", data, len(STORE_MAGIC))
    off = len(STORE_MAGIC) + 4
    if len(data) < off + hlen:
        raise StoreFormatError(f"{path}: truncated header")
    try:
        header = json.loads(data[off : off + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise StoreFormatError(f"{path}: unparseable header: {exc}") from exc
    n_rows = len(header["image_ids"]) * header["n_augmentations"]
    dim = header["descriptor_len"]
    body = data[off + hlen :]
    if len(body) != n_rows * dim * 4:
        raise StoreFormatError(
            f"{path}: expected {n_rows}x{dim} float32 body, got {len(body)} bytes"
        )
    rows = np.frombuffer(body, dtype="<f4").reshape(n_rows, dim)
    return header, rows


def store_row_index(header: dict, image_id: str) -> slice:
    """Slice of rows belonging to one image (rows ordered image-major)."""
    idx = header["image_ids"].index(image_id)
    n = header["n_augmentations"]
    return slice(idx * n, (idx + 1) * n)
