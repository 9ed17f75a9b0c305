"""Shared fixture helpers for the test suite."""

from __future__ import annotations

import numpy as np

from histopipe import stainlab, synthetic

#: Reference maxima for intensity-tolerance tests. Moderate optical
#: densities keep 8-bit quantization leakage under one intensity level;
#: near-opaque pixels (OD > 2) would drift +-3 through any deconvolution.
GENTLE_MAXIMA = (1.0, 0.6)


def gentle_params() -> stainlab.MacenkoParams:
    return stainlab.MacenkoParams(reference_max_concentrations=GENTLE_MAXIMA)


def gentle_oracle_image(seed: int, height: int = 128, width: int = 128):
    """Synthetic image whose per-stain 99th percentiles sit at GENTLE_MAXIMA."""
    rng = np.random.default_rng(seed)
    conc = synthetic.oracle_concentrations(height, width, rng, h_max=1.0, e_max=0.6)
    pct = np.percentile(conc.reshape(-1, 2), 99, axis=0)
    conc = conc * (np.asarray(GENTLE_MAXIMA) / pct)
    return synthetic.beer_lambert_image(conc), conc
