"""Optical-density transforms, stain-matrix estimation, normalization and
H&E color augmentation.

The color model is Beer-Lambert: a pixel's optical density is linear in
the per-stain concentrations, ``od = S @ c`` with ``S`` a 3x2 matrix whose
unit-norm columns are the hematoxylin and eosin absorption directions.
Stain estimation follows the classic eigen-projection recipe: keep tissue
pixels (OD row norm above a transparency threshold), project onto the
plane of the top two covariance eigenvectors, and take robust angular
percentiles as the stain directions.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import HistopipeError
from .seeding import derive_seed


class InsufficientTissue(HistopipeError):
    """Too few above-threshold pixels to estimate a stain matrix."""


class DegenerateCovariance(HistopipeError):
    """OD covariance is effectively rank-1; no second stain present."""


class SingularStainMatrix(HistopipeError):
    """Stain columns are parallel within tolerance; deconvolution impossible."""


def _unit_columns(m: np.ndarray) -> np.ndarray:
    return m / np.linalg.norm(m, axis=0, keepdims=True)


#: Literature-standard Ruifrok H&E absorption directions, unit-normalized.
RUIFROK_HE = _unit_columns(
    np.array([[0.65, 0.07], [0.70, 0.99], [0.29, 0.11]], dtype=np.float64)
)

#: Concentration values the chosen percentile is mapped onto when normalizing.
DEFAULT_MAX_CONCENTRATIONS = np.array([1.9, 1.0], dtype=np.float64)

#: Minimum number of tissue pixels required for stain estimation.
MIN_TISSUE_PIXELS = 100

#: Second eigenvalue below this fraction of the first means rank-1 OD data.
DEGENERACY_TOL = 1e-6


@dataclass(frozen=True)
class AugmentationParams:
    """One sampled color + affine augmentation.

    ``u_h``/``u_e`` multiply the hematoxylin/eosin concentrations; the flip
    and rotation flags act on the pixel grid after the color adjustment.
    """

    u_h: float
    u_e: float
    flip_h: bool = False
    flip_v: bool = False
    rot90_k: int = 0

    def __post_init__(self):
        if not (0.7 <= self.u_h <= 1.3 and 0.7 <= self.u_e <= 1.3):
            raise ValueError("stain multipliers must lie in [0.7, 1.3]")
        if self.rot90_k not in (0, 1, 2, 3):
            raise ValueError("rot90_k must be in {0, 1, 2, 3}")

    @property
    def identity(self) -> bool:
        return (
            self.u_h == 1.0
            and self.u_e == 1.0
            and not self.flip_h
            and not self.flip_v
            and self.rot90_k == 0
        )


@dataclass(frozen=True)
class MacenkoParams:
    """Parameters of stain estimation and normalization."""

    i0: float = 255.0
    beta: float = 0.15
    alpha: float = 1.0
    concentration_percentile: float = 99.0
    reference_stains: np.ndarray = field(default_factory=lambda: RUIFROK_HE.copy())
    reference_max_concentrations: np.ndarray = field(
        default_factory=lambda: DEFAULT_MAX_CONCENTRATIONS.copy()
    )

    def __post_init__(self):
        if not 0 < self.i0 <= 255:
            raise ValueError("i0 must lie in (0, 255]")
        if self.beta <= 0:
            raise ValueError("beta must be positive")
        if not 0 < self.alpha < 50:
            raise ValueError("alpha must lie in (0, 50)")
        object.__setattr__(
            self, "reference_stains", np.asarray(self.reference_stains, dtype=np.float64)
        )
        object.__setattr__(
            self,
            "reference_max_concentrations",
            np.asarray(self.reference_max_concentrations, dtype=np.float64),
        )


def rgb_to_od(img: np.ndarray, i0: float = 255.0) -> np.ndarray:
    """Beer-Lambert transform, ``od = -log10(max(I, 1) / i0)`` per channel.

    The floor at intensity 1 keeps the OD finite for black pixels.
    """
    if i0 <= 0:
        raise ValueError("i0 must be positive")
    intensities = np.maximum(np.asarray(img, dtype=np.float64), 1.0)
    return -np.log10(intensities / i0)


def od_to_rgb(od: np.ndarray, i0: float = 255.0) -> np.ndarray:
    """Inverse of :func:`rgb_to_od`: ``I = round(i0 * 10**-od)``, clamped to [0, 255]."""
    intensities = np.rint(i0 * np.power(10.0, -np.asarray(od, dtype=np.float64)))
    return np.clip(intensities, 0, 255).astype(np.uint8)


def validate_stain_matrix(stains: np.ndarray) -> np.ndarray:
    """Check shape and conditioning; raises SingularStainMatrix on parallel columns."""
    stains = np.asarray(stains, dtype=np.float64)
    if stains.shape != (3, 2):
        raise ValueError("stain matrix must be 3x2 (H and E columns)")
    svals = np.linalg.svd(stains, compute_uv=False)
    if svals[1] < DEGENERACY_TOL * svals[0]:
        raise SingularStainMatrix("stain columns are parallel within tolerance")
    return stains


def _tissue_od_rows(img: np.ndarray, params: MacenkoParams) -> np.ndarray:
    od = rgb_to_od(img, params.i0).reshape(-1, 3)
    mask = np.linalg.norm(od, axis=1) > params.beta
    return od[mask]


def estimate_stain_matrix(img: np.ndarray, params: MacenkoParams | None = None) -> np.ndarray:
    """Estimate the 3x2 H&E stain matrix of ``img`` by eigen-projection.

    Returns unit-norm, non-negative columns ordered (H, E): among the two
    robust angular extremes, the direction with the larger red-channel OD
    coefficient is hematoxylin (hematoxylin absorbs red far more strongly
    than eosin); on a red tie, the larger blue coefficient goes to eosin.
    """
    params = params or MacenkoParams()
    tissue = _tissue_od_rows(img, params)
    if tissue.shape[0] < MIN_TISSUE_PIXELS:
        raise InsufficientTissue(
            f"only {tissue.shape[0]} tissue pixels above OD threshold "
            f"{params.beta} (need {MIN_TISSUE_PIXELS})"
        )

    cov = np.cov(tissue.T)
    evals, evecs = np.linalg.eigh(cov)  # ascending
    if evals[2] < 1e-12 or evals[1] < DEGENERACY_TOL * evals[2]:
        raise DegenerateCovariance(
            "second OD eigenvalue below tolerance; image appears single-stain"
        )
    plane = evecs[:, [2, 1]].copy()
    # Fix eigenvector signs so projections of the (all-positive) OD cloud
    # land in a consistent half-plane and angles do not wrap.
    for j in range(2):
        if plane[:, j].sum() < 0:
            plane[:, j] = -plane[:, j]

    proj = tissue @ plane
    angles = np.arctan2(proj[:, 1], proj[:, 0])
    lo = np.percentile(angles, params.alpha)
    hi = np.percentile(angles, 100.0 - params.alpha)

    def direction(angle: float) -> np.ndarray:
        v = plane @ np.array([np.cos(angle), np.sin(angle)])
        if v.sum() < 0:
            v = -v
        v = np.maximum(v, 0.0)
        norm = np.linalg.norm(v)
        if norm == 0:
            raise DegenerateCovariance("stain direction collapsed to zero")
        return v / norm

    v_lo, v_hi = direction(lo), direction(hi)
    if v_lo[0] > v_hi[0]:
        h_col, e_col = v_lo, v_hi
    elif v_lo[0] < v_hi[0]:
        h_col, e_col = v_hi, v_lo
    else:  # red tie: larger blue coefficient is eosin
        h_col, e_col = (v_lo, v_hi) if v_hi[2] >= v_lo[2] else (v_hi, v_lo)
    return validate_stain_matrix(np.column_stack([h_col, e_col]))


def separate_stains(img: np.ndarray, stains: np.ndarray, i0: float = 255.0) -> np.ndarray:
    """Per-pixel least-squares stain concentrations, clamped to >= 0.

    Returns an (H, W, 2) array of (hematoxylin, eosin) concentrations.
    """
    stains = validate_stain_matrix(stains)
    od = rgb_to_od(img, i0)
    h, w = od.shape[:2]
    # Least squares via normal equations: c = (S^T S)^-1 S^T od.
    solver = np.linalg.solve(stains.T @ stains, stains.T)
    conc = od.reshape(-1, 3) @ solver.T
    return np.maximum(conc, 0.0).reshape(h, w, 2)


def recompose(conc: np.ndarray, stains: np.ndarray, i0: float = 255.0) -> np.ndarray:
    """Rebuild an RGB image from stain concentrations: ``od = S @ c`` then invert."""
    stains = np.asarray(stains, dtype=np.float64)
    conc = np.asarray(conc, dtype=np.float64)
    od = conc.reshape(-1, 2) @ stains.T
    return od_to_rgb(od, i0).reshape(conc.shape[0], conc.shape[1], 3)


def normalize_stains(img: np.ndarray, params: MacenkoParams | None = None) -> np.ndarray:
    """Map an image onto the reference stain space.

    Concentrations are estimated against the image's own stain matrix,
    rescaled so their per-stain ``concentration_percentile`` hits
    ``reference_max_concentrations``, and recomposed with the reference
    stains.
    """
    params = params or MacenkoParams()
    stains = estimate_stain_matrix(img, params)
    conc = separate_stains(img, stains, params.i0)
    flat = conc.reshape(-1, 2)
    pct = np.percentile(flat, params.concentration_percentile, axis=0)
    scale = params.reference_max_concentrations / np.maximum(pct, 1e-8)
    return recompose(conc * scale, params.reference_stains, params.i0)


def sample_augmentation(rng_seed: int) -> AugmentationParams:
    """Deterministically sample augmentation parameters from a seed.

    Draw order is fixed (u_h, u_e, flip_h, flip_v, rot90_k) so the mapping
    from seed to parameters never changes.
    """
    rng = np.random.default_rng(rng_seed)
    u_h = rng.uniform(0.7, 1.3)
    u_e = rng.uniform(0.7, 1.3)
    flip_h = bool(rng.integers(0, 2))
    flip_v = bool(rng.integers(0, 2))
    rot90_k = int(rng.integers(0, 4))
    return AugmentationParams(u_h=u_h, u_e=u_e, flip_h=flip_h, flip_v=flip_v, rot90_k=rot90_k)


def strip_affine(params: AugmentationParams) -> AugmentationParams:
    """Drop the grid-transform flags, keeping only the color multipliers."""
    return replace(params, flip_h=False, flip_v=False, rot90_k=0)


def apply_augmentation(
    conc: np.ndarray,
    stains: np.ndarray,
    params: AugmentationParams,
    i0: float = 255.0,
) -> np.ndarray:
    """Scale concentrations by (u_h, u_e), recompose, then apply grid flags."""
    scaled = conc * np.array([params.u_h, params.u_e])
    img = recompose(scaled, stains, i0)
    if params.flip_h:
        img = img[:, ::-1]
    if params.flip_v:
        img = img[::-1]
    if params.rot90_k:
        img = np.rot90(img, k=params.rot90_k, axes=(0, 1))
    return np.ascontiguousarray(img)


def augment_he(
    img: np.ndarray,
    stains: np.ndarray,
    params: AugmentationParams,
    i0: float = 255.0,
) -> np.ndarray:
    """Color-augment an image by scaling its H&E concentrations.

    Decomposes against ``stains``, multiplies the two channels by the
    sampled uniforms, recomposes, and finally applies the affine flags.
    """
    conc = separate_stains(img, stains, i0)
    return apply_augmentation(conc, stains, params, i0)


def augmentation_seed(master_seed: int, image_id: str, augmentation_index: int) -> int:
    """The canonical per-(image, augmentation) seed used across the pipeline."""
    return derive_seed(master_seed, "augment", image_id, augmentation_index)
