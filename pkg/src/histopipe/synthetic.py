"""Synthetic Beer-Lambert fixtures.

The real challenge images cannot be redistributed, so oracle tests and
desk-scale runs work on images synthesized through the exact forward
model the stain code inverts: draw per-pixel concentrations, mix through a
known stain matrix, and quantize to RGB. Ground-truth stains and
concentration statistics are then known by construction.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

from . import stainlab
from .patches import CLASSES
from .seeding import derive_seed

#: Per-class concentration statistics: fraction of nuclei-like (H-rich)
#: pixels and the eosin background level. Both survive percentile stain
#: normalization and multiplicative color augmentation, so a descriptor
#: of mean color separates the classes.
CLASS_FIELD_PARAMS = {
    "normal": dict(nuclei_fraction=0.10, eosin_level=0.50),
    "benign": dict(nuclei_fraction=0.30, eosin_level=0.95),
    "in_situ": dict(nuclei_fraction=0.55, eosin_level=0.35),
    "invasive": dict(nuclei_fraction=0.80, eosin_level=0.75),
}


def beer_lambert_image(
    conc: np.ndarray, stains: np.ndarray | None = None, i0: float = 255.0
) -> np.ndarray:
    """Forward-synthesize an RGB image from an (H, W, 2) concentration map."""
    stains = stainlab.RUIFROK_HE if stains is None else stains
    return stainlab.recompose(conc, stains, i0)


def oracle_concentrations(
    height: int,
    width: int,
    rng: np.random.Generator,
    pure_fraction: float = 0.02,
    h_max: float = 2.0,
    e_max: float = 1.0,
) -> np.ndarray:
    """Concentration map with known extremes for stain-recovery oracles.

    A ``pure_fraction`` share of pixels carries each stain alone, so the
    robust angular percentiles of a correct estimator land on the true
    stain directions (a fraction near twice the angle percentile puts the
    percentile at the pure cluster's median, cancelling quantization
    bias); the rest mixes both stains uniformly. ``h_max``/``e_max`` cap
    the ranges; tolerance tests that compare intensities use moderate caps
    because 8-bit quantization of near-opaque pixels (OD > 2) leaks +-3
    intensity levels through any deconvolution.
    """
    n = height * width
    conc = np.empty((n, 2))
    conc[:, 0] = rng.uniform(0.05, h_max, size=n)
    conc[:, 1] = rng.uniform(0.05, e_max, size=n)
    n_pure = int(round(pure_fraction * n))
    chosen = rng.choice(n, size=2 * n_pure, replace=False)
    pure_h, pure_e = chosen[:n_pure], chosen[n_pure:]
    conc[pure_h, 0] = rng.uniform(0.4 * h_max, h_max, size=n_pure)
    conc[pure_h, 1] = 0.0
    conc[pure_e, 1] = rng.uniform(0.5 * e_max, e_max, size=n_pure)
    conc[pure_e, 0] = 0.0
    return conc.reshape(height, width, 2)


def oracle_image(
    height: int = 128,
    width: int = 128,
    seed: int = 0,
    stains: np.ndarray | None = None,
    i0: float = 255.0,
    h_max: float = 2.0,
    e_max: float = 1.0,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(rgb, true_stains, true_concentrations) for recovery tests."""
    rng = np.random.default_rng(seed)
    stains = stainlab.RUIFROK_HE if stains is None else np.asarray(stains, dtype=np.float64)
    conc = oracle_concentrations(height, width, rng, h_max=h_max, e_max=e_max)
    return beer_lambert_image(conc, stains, i0), stains, conc


def _blob_mask(height: int, width: int, fraction: float, rng: np.random.Generator,
               cell: int = 8) -> np.ndarray:
    """Blocky random mask covering ~``fraction`` of pixels."""
    coarse = rng.random((height // cell + 1, width // cell + 1))
    grid = np.kron(coarse, np.ones((cell, cell)))[:height, :width]
    return grid >= np.quantile(grid, 1.0 - fraction)


def class_concentration_field(
    label: str, height: int, width: int, rng: np.random.Generator
) -> np.ndarray:
    """Concentration map whose statistics depend on the class label."""
    params = CLASS_FIELD_PARAMS[label]
    fraction = float(np.clip(params["nuclei_fraction"] + rng.normal(0.0, 0.02), 0.05, 0.9))
    nuclei = _blob_mask(height, width, fraction, rng)

    c_h = np.where(nuclei, rng.uniform(0.8, 1.2, size=(height, width)), 0.02)
    texture = 0.5 + 0.5 * np.kron(
        rng.random((height // 8 + 1, width // 8 + 1)), np.ones((8, 8))
    )[:height, :width]
    c_e = params["eosin_level"] * texture * np.where(nuclei, 0.3, 1.0)
    return np.stack([c_h, c_e], axis=-1)


def write_synthetic_dataset(
    root: Path | str,
    images_per_class: int,
    height: int = 64,
    width: int = 96,
    seed: int = 0,
) -> Path:
    """Write a labeled PNG dataset under ``root``; returns the labels path.

    Layout matches the ingestion contract: image files plus a
    ``labels.csv`` with header ``image_id,filename,label``.
    """
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    lines = ["image_id,filename,label"]
    counter = 0
    for label in CLASSES:
        for _ in range(images_per_class):
            image_id = f"img{counter:04d}"
            rng = np.random.default_rng(derive_seed(seed, "synthetic", image_id))
            conc = class_concentration_field(label, height, width, rng)
            rgb = beer_lambert_image(conc)
            filename = f"{image_id}.png"
            Image.fromarray(rgb).save(root / filename)
            lines.append(f"{image_id},{filename},{label}")
            counter += 1
    labels_path = root / "labels.csv"
    labels_path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return labels_path


def write_config_toml(
    path: Path | str,
    dataset_root: Path | str,
    labels_file: Path | str,
    output_dir: Path | str,
    *,
    n_augmentations: int = 4,
    k_folds: int = 10,
    seeds: tuple[int, ...] = (0, 1),
    master_seed: int = 0,
    crops_per_size: int = 4,
    crop_variants: tuple[tuple[int, str], ...] = ((16, "half"), (24, "half")),
    encoders: tuple[str, ...] = ("stub",),
    stub_len: int = 64,
    pool_p: float = 3.0,
    num_rounds: int = 30,
    max_leaves: int = 15,
    learning_rate: float = 0.15,
    min_samples_leaf: int = 5,
    num_bins: int = 63,
    feature_fraction: float = 0.8,
    bagging_fraction: float = 0.8,
) -> Path:
    """Render a desk-scale pipeline config as TOML."""
    lines = [
        f'dataset_root = "{Path(dataset_root).as_posix()}"',
        f'labels_file = "{Path(labels_file).as_posix()}"',
        f'output_dir = "{Path(output_dir).as_posix()}"',
        f"n_augmentations = {n_augmentations}",
        f"k_folds = {k_folds}",
        f"seeds = {list(seeds)}",
        f"master_seed = {master_seed}",
        f"crops_per_size = {crops_per_size}",
        "",
    ]
    for size, scale in crop_variants:
        lines += ["[[crop_variants]]", f"size = {size}", f'scale = "{scale}"', ""]
    for name in encoders:
        lines += [
            "[[encoders]]",
            'encoder_id = "stub"',
            f'name = "{name}"',
            f"descriptor_len = {stub_len}",
            "",
        ]
    lines += [
        "[gbdt]",
        f"num_rounds = {num_rounds}",
        f"max_leaves = {max_leaves}",
        f"learning_rate = {learning_rate}",
        f"min_samples_leaf = {min_samples_leaf}",
        f"num_bins = {num_bins}",
        f"feature_fraction = {feature_fraction}",
        f"bagging_fraction = {bagging_fraction}",
        "",
        "[pool]",
        f"p = {pool_p}",
        "",
    ]
    path = Path(path)
    path.write_text("\n".join(lines), encoding="utf-8")
    return path
