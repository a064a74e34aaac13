"""Virtual fabrication: Gaussian blur, additive edge noise, threshold.

Blurring with a symmetric-padded Gaussian and thresholding at 0.5 rounds
convex corners (silicon lost), fills concave corners (silicon gained),
erases islands and closes gaps narrower than roughly the blur width.

The noise is a pure function of (seed, row, column): each pixel's value is
drawn by hashing its coordinates, so any crop or re-run sees the same
perturbation at the same place.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy.ndimage import correlate1d

from .errors import ParameterError
from .raster import as_bitmap


@dataclass(frozen=True)
class FabParams:
    """``sigma = 0`` disables the blur (identity process)."""

    sigma: float = 3.0
    threshold: float = 0.5
    edge_noise_amp: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if not (self.sigma >= 0 and math.isfinite(self.sigma)):
            raise ParameterError(f"sigma must be >= 0, got {self.sigma}")
        if not 0 < self.threshold < 1:
            raise ParameterError(f"threshold must lie in (0, 1), got {self.threshold}")
        limit = min(self.threshold, 1 - self.threshold)
        if not 0 <= self.edge_noise_amp < limit:
            raise ParameterError(
                f"edge_noise_amp must lie in [0, {limit}), got {self.edge_noise_amp}")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def _gaussian_1d(sigma):
    r = math.ceil(3 * sigma)
    x = np.arange(-r, r + 1, dtype=np.float64)
    g = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return g / g.sum()


def gaussian_kernel(sigma):
    """Normalized (2r+1)^2 sampled Gaussian with r = ceil(3 sigma)."""
    if not sigma > 0:
        raise ParameterError(f"sigma must be > 0, got {sigma}")
    g = _gaussian_1d(sigma)
    k = np.outer(g, g)
    return k / k.sum()


_GOLDEN = np.uint64(0x9E3779B97F4A7C15)


def _mix64(z):
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


def uniform_noise(seed, height, width, row0=0, col0=0):
    """Stateless uniform [0, 1) values keyed by (seed, row, col)."""
    rows = np.arange(row0, row0 + height, dtype=np.uint64)[:, None]
    cols = np.arange(col0, col0 + width, dtype=np.uint64)[None, :]
    with np.errstate(over="ignore"):
        key = _mix64(np.uint64(seed & 0xFFFFFFFFFFFFFFFF) + _GOLDEN)
        z = key ^ ((rows << np.uint64(32)) | cols)
        z = _mix64(z * _GOLDEN + _GOLDEN)
    return (z >> np.uint64(11)).astype(np.float64) * (1.0 / 9007199254740992.0)


def blur(layout, sigma):
    """Gaussian blur with symmetric (mirror, edge-repeating) boundaries."""
    a = np.asarray(layout, dtype=np.float64)
    if sigma == 0:
        return a.copy()
    g = _gaussian_1d(sigma)
    a = correlate1d(a, g, axis=0, mode="reflect")
    return correlate1d(a, g, axis=1, mode="reflect")


def _noisy_field(layout, params):
    layout = as_bitmap(layout)
    field = blur(layout, params.sigma)
    if params.edge_noise_amp > 0:
        u = uniform_noise(params.seed, *field.shape)
        field += params.edge_noise_amp * (2.0 * u - 1.0)
    return field


def fabricate_field(layout, params=FabParams()):
    """Blurred and noised layout, clamped to [0, 1]."""
    return np.clip(_noisy_field(layout, params), 0.0, 1.0)


def fabricate(layout, params=FabParams()):
    """Fabricated bitmap: 1 where the noised blur reaches the threshold."""
    return (_noisy_field(layout, params) >= params.threshold).astype(np.uint8)
