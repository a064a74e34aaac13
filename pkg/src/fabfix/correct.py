"""Full-image inference by overlapping sliding windows.

Each window is run through every ensemble member, the member outputs are
averaged, and the averaged windows are stitched back with overlap
averaging. Prediction uses a forward ensemble; correction a corrector one.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .errors import ParameterError, SizeError
from .raster import Stitcher, as_field, slice_patches


@dataclass(frozen=True)
class InferenceParams:
    stride: int = 4
    binarize_threshold: float = 0.5
    uncertainty_band: tuple = (0.1, 0.9)
    batch_size: int = 128

    def __post_init__(self):
        if not 1 <= self.stride <= 128:
            raise ParameterError(f"stride must lie in [1, 128], got {self.stride}")
        if not 0 < self.binarize_threshold < 1:
            raise ParameterError(f"binarize_threshold must lie in (0, 1), got {self.binarize_threshold}")
        lo, hi = self.uncertainty_band
        if not 0 < lo < hi < 1:
            raise ParameterError(f"uncertainty_band needs 0 < lo < hi < 1, got {self.uncertainty_band}")
        if self.batch_size < 1:
            raise ParameterError(f"batch_size must be >= 1, got {self.batch_size}")

    def to_dict(self):
        d = asdict(self)
        d["uncertainty_band"] = list(self.uncertainty_band)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "uncertainty_band" in d:
            d["uncertainty_band"] = tuple(d["uncertainty_band"])
        return cls(**d)


def infer_full(image, ensemble, params=InferenceParams(), role=None):
    """Stitched ensemble-mean Field for ``image``.

    Images that do not tile exactly are zero-padded bottom/right and the
    padding is cropped from the result.
    """
    if role is not None and ensemble.role != role:
        raise ParameterError(f"expected a {role} ensemble, got role {ensemble.role!r}")
    image = np.asarray(image)
    if image.ndim != 2 or image.size == 0:
        raise SizeError(f"image must be a non-empty 2-D raster, got shape {image.shape}")
    h, w = image.shape
    p = ensemble.patch_size
    ps = slice_patches(image, p, params.stride)
    ny, nx = ps.shape
    offsets = ps.offsets()
    st = Stitcher(w, h, p, params.stride)
    batch = np.empty((params.batch_size, p, p, 1), dtype=np.float32)
    for start in range(0, len(offsets), params.batch_size):
        stop = min(start + params.batch_size, len(offsets))
        for j, k in enumerate(range(start, stop)):
            batch[j, :, :, 0] = ps.grid[k // nx, k % nx]
        out = ensemble.predict(batch[:stop - start])
        for j, k in enumerate(range(start, stop)):
            x, y = offsets[k]
            st.add(x, y, out[j, :, :, 0])
    return np.clip(st.result(), 0.0, 1.0)


def binarize(field, threshold=0.5):
    """1 where field >= threshold."""
    if not 0 < threshold < 1:
        raise ParameterError(f"threshold must lie in (0, 1), got {threshold}")
    return (np.asarray(field) >= threshold).astype(np.uint8)


def uncertainty_mask(field, band=(0.1, 0.9)):
    """1 where lo < field < hi."""
    lo, hi = band
    if not 0 < lo < hi < 1:
        raise ParameterError(f"band needs 0 < lo < hi < 1, got {band}")
    f = as_field(field)
    return ((f > lo) & (f < hi)).astype(np.uint8)


def predict_layout(layout, forward, params=InferenceParams()):
    """(predicted fabricated Bitmap, prediction Field)."""
    field = infer_full(layout, forward, params, role="forward")
    return binarize(field, params.binarize_threshold), field


def correct_layout(nominal, corrector, params=InferenceParams()):
    """(correction Bitmap, correction Field)."""
    field = infer_full(nominal, corrector, params, role="corrector")
    return binarize(field, params.binarize_threshold), field
