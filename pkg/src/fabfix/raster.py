"""Rasters, rectangle/polygon rasterization, patch slicing and stitching.

Bitmaps are ``uint8`` arrays of shape (H, W) holding 0/1 (1 = silicon).
Fields are floating arrays in [0, 1]. Coordinates are (x, y) with x along
columns; a pixel (row i, col j) has its center at (j + 0.5, i + 0.5).
"""

from __future__ import annotations

import re
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import BoundsError, FormatError, InvariantError, ParameterError, ShapeError

PATCH_SIZE = 128


def as_bitmap(a):
    a = np.asarray(a)
    if a.ndim != 2 or a.shape[0] < 1 or a.shape[1] < 1:
        raise ShapeError(f"bitmap must be a non-empty 2-D array, got shape {a.shape}")
    if a.dtype != np.uint8 or a.max(initial=0) > 1:
        if not np.isin(a, (0, 1)).all():
            raise ParameterError("bitmap values must be 0 or 1")
        a = a.astype(np.uint8)
    return a


def as_field(a):
    a = np.asarray(a)
    if a.dtype.kind != "f":
        a = a.astype(np.float64)
    if a.ndim != 2:
        raise ShapeError(f"field must be 2-D, got shape {a.shape}")
    return a


# -- rasterization ----------------------------------------------------------

def rasterize(rectangles, width, height):
    """Bitmap with a pixel set iff its center lies inside any rectangle.

    Rectangles are half-open ``(x0, y0, x1, y1)`` pixel boxes.
    """
    if width < 1 or height < 1:
        raise ParameterError(f"canvas must be at least 1x1, got {width}x{height}")
    out = np.zeros((height, width), dtype=np.uint8)
    for rect in rectangles:
        x0, y0, x1, y1 = rect
        if not (0 <= x0 < x1 <= width and 0 <= y0 < y1 <= height):
            raise BoundsError(f"rectangle {tuple(rect)} outside {width}x{height} canvas")
        # centers j+0.5 in [x0, x1)  <=>  j in [ceil(x0-0.5), ceil(x1-0.5))
        j0, j1 = int(np.ceil(x0 - 0.5)), int(np.ceil(x1 - 0.5))
        i0, i1 = int(np.ceil(y0 - 0.5)), int(np.ceil(y1 - 0.5))
        out[i0:i1, j0:j1] = 1
    return out


def fill_polygon(vertices, width, height, out=None, value=1):
    """Even-odd fill of a closed polygon, sampled at pixel centers."""
    if out is None:
        out = np.zeros((height, width), dtype=np.uint8)
    v = np.asarray(vertices, dtype=np.float64)
    if len(v) < 3:
        return out
    lo = np.floor(v.min(axis=0)).astype(int)
    hi = np.ceil(v.max(axis=0)).astype(int)
    c0, c1 = max(lo[0], 0), min(hi[0] + 1, width)
    r0, r1 = max(lo[1], 0), min(hi[1] + 1, height)
    if c0 >= c1 or r0 >= r1:
        return out
    px = (np.arange(c0, c1) + 0.5)[None, :]
    py = (np.arange(r0, r1) + 0.5)[:, None]
    inside = np.zeros((r1 - r0, c1 - c0), dtype=bool)
    xa, ya = v[:, 0], v[:, 1]
    xb, yb = np.roll(xa, -1), np.roll(ya, -1)
    for x1, y1, x2, y2 in zip(xa, ya, xb, yb):
        if y1 == y2:
            continue
        crosses = (y1 > py) != (y2 > py)
        xint = x1 + (py - y1) * (x2 - x1) / (y2 - y1)
        inside ^= crosses & (px < xint)
    region = out[r0:r1, c0:c1]
    region[inside] = value
    return out


def fill_disk(cx, cy, radius, width, height, out=None, value=1, inner=0.0):
    """Disk (or annulus when ``inner`` > 0) sampled at pixel centers."""
    if out is None:
        out = np.zeros((height, width), dtype=np.uint8)
    c0, c1 = max(int(cx - radius) - 1, 0), min(int(cx + radius) + 2, width)
    r0, r1 = max(int(cy - radius) - 1, 0), min(int(cy + radius) + 2, height)
    if c0 >= c1 or r0 >= r1:
        return out
    px = (np.arange(c0, c1) + 0.5)[None, :]
    py = (np.arange(r0, r1) + 0.5)[:, None]
    d2 = (px - cx) ** 2 + (py - cy) ** 2
    mask = (d2 <= radius * radius) & (d2 >= inner * inner)
    out[r0:r1, c0:c1][mask] = value
    return out


# -- patches ----------------------------------------------------------------

def padded_extent(dim, patch_size, stride):
    """Smallest size >= dim (and >= patch_size) that tiles exactly at stride."""
    if dim <= patch_size:
        return patch_size
    steps = -(-(dim - patch_size) // stride)
    return patch_size + steps * stride


@dataclass
class PatchSet:
    """Patches of one image at a fixed stride.

    ``grid`` has shape (ny, nx, P, P); patch (r, c) sits at offset
    (x, y) = (c*stride, r*stride) of the zero-padded canvas. For slices
    of an image, ``grid`` is a read-only view into the padded copy.
    """

    patch_size: int
    stride: int
    grid: np.ndarray
    width: int
    height: int

    @property
    def shape(self):
        return self.grid.shape[:2]

    def __len__(self):
        return self.grid.shape[0] * self.grid.shape[1]

    @property
    def padded_shape(self):
        ny, nx = self.shape
        p, s = self.patch_size, self.stride
        return (p + (ny - 1) * s, p + (nx - 1) * s)

    def offsets(self):
        """(x, y) offsets in row-major order."""
        ny, nx = self.shape
        ys, xs = np.meshgrid(np.arange(ny) * self.stride, np.arange(nx) * self.stride,
                             indexing="ij")
        return np.stack([xs.ravel(), ys.ravel()], axis=1)

    @property
    def patches(self):
        """All patches as an (N, P, P) array (copies)."""
        p = self.patch_size
        return self.grid.reshape(-1, p, p)

    def __iter__(self):
        for (x, y), patch in zip(self.offsets(), self.patches):
            yield int(x), int(y), patch

    def with_values(self, values):
        """Same geometry, new patch contents (N, P, P) in row-major order."""
        p = self.patch_size
        values = np.asarray(values)
        if values.shape[0] != len(self) or values.shape[-2:] != (p, p):
            raise ShapeError(f"values shape {values.shape} does not match {len(self)} "
                             f"patches of {p}x{p}")
        grid = values.reshape(self.shape + (p, p))
        return PatchSet(self.patch_size, self.stride, grid, self.width, self.height)


def slice_patches(image, patch_size=PATCH_SIZE, stride=PATCH_SIZE):
    """Overlapping patch grid, zero-padding the bottom/right edge as needed."""
    if patch_size <= 0 or stride <= 0:
        raise ParameterError(f"patch_size and stride must be positive, got {patch_size}, {stride}")
    if stride > patch_size:
        raise ParameterError(f"stride {stride} > patch_size {patch_size} would leave gaps")
    image = np.asarray(image)
    if image.ndim != 2:
        raise ShapeError(f"image must be 2-D, got shape {image.shape}")
    h, w = image.shape
    ph, pw = padded_extent(h, patch_size, stride), padded_extent(w, patch_size, stride)
    if (ph, pw) != (h, w):
        padded = np.zeros((ph, pw), dtype=image.dtype)
        padded[:h, :w] = image
    else:
        padded = image
    grid = sliding_window_view(padded, (patch_size, patch_size))[::stride, ::stride]
    return PatchSet(patch_size, stride, grid, w, h)


class Stitcher:
    """Accumulates patch values onto a canvas and averages the overlaps.

    The mean is kept incrementally (m += (v - m) / k), so pixels whose
    contributions are all equal come back bit-exact.
    """

    def __init__(self, width, height, patch_size=PATCH_SIZE, stride=PATCH_SIZE):
        self.width, self.height = width, height
        self.patch_size = patch_size
        ph = padded_extent(height, patch_size, stride)
        pw = padded_extent(width, patch_size, stride)
        self.mean = np.zeros((ph, pw), dtype=np.float64)
        self.count = np.zeros((ph, pw), dtype=np.int64)

    def add(self, x, y, values):
        p = self.patch_size
        m = self.mean[y:y + p, x:x + p]
        c = self.count[y:y + p, x:x + p]
        c += 1
        m += (values - m) / c

    def result(self):
        h, w = self.height, self.width
        if (self.count[:h, :w] == 0).any():
            raise InvariantError("stitch: some pixels are covered by no patch")
        return self.mean[:h, :w].copy()


def stitch(patches, width=None, height=None):
    """Average all patch values covering each pixel, cropped to width x height."""
    width = patches.width if width is None else width
    height = patches.height if height is None else height
    st = Stitcher(width, height, patches.patch_size, patches.stride)
    need = st.mean.shape
    if patches.padded_shape[0] < need[0] or patches.padded_shape[1] < need[1]:
        st.mean = np.zeros(patches.padded_shape, dtype=np.float64)
        st.count = np.zeros(patches.padded_shape, dtype=np.int64)
    for x, y, values in patches:
        st.add(x, y, values)
    return st.result()


def coverage_count(width, height, patch_size, stride):
    """Analytic number of patches covering each pixel (H, W)."""
    def axis(dim):
        n = (padded_extent(dim, patch_size, stride) - patch_size) // stride + 1
        pos = np.arange(dim)
        first = np.maximum(0, -(-(pos - patch_size + 1) // stride))
        last = np.minimum(n - 1, pos // stride)
        return last - first + 1
    return axis(height)[:, None] * axis(width)[None, :]


# -- PGM / PPM --------------------------------------------------------------

_HEADER_TOKEN = re.compile(rb"\s*(?:#[^\n]*\n\s*)*(\S+)")


def _parse_header(data, magic, path):
    if data[:2] != magic:
        raise FormatError(f"{path}: expected {magic.decode()} header, got {data[:2]!r}", offset=0)
    pos = 2
    vals = []
    for _ in range(3):
        m = _HEADER_TOKEN.match(data, pos)
        if not m:
            raise FormatError(f"{path}: truncated header", offset=pos)
        try:
            vals.append(int(m.group(1)))
        except ValueError:
            raise FormatError(f"{path}: bad header token {m.group(1)!r}", offset=m.start(1)) from None
        pos = m.end()
    if pos >= len(data) or data[pos:pos + 1] not in (b" ", b"\n", b"\r", b"\t"):
        raise FormatError(f"{path}: missing whitespace after header", offset=pos)
    width, height, maxval = vals
    if width < 1 or height < 1:
        raise FormatError(f"{path}: bad dimensions {width}x{height}", offset=2)
    if maxval != 255:
        raise FormatError(f"{path}: only maxval 255 is supported, got {maxval}", offset=pos)
    return width, height, pos + 1


def _field_to_bytes(a):
    a = np.asarray(a)
    if a.dtype == np.uint8 or a.dtype == bool:
        b = np.asarray(a, dtype=np.uint8)
        if b.max(initial=0) <= 1:
            return b * np.uint8(255)
        return b
    # linear map, round half up
    return np.floor(np.clip(a, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def write_pgm(image, path):
    """Binary PGM (P5, maxval 255); bitmaps map 0/1 to 0/255."""
    img = _field_to_bytes(image)
    if img.ndim != 2:
        raise ShapeError(f"PGM needs a 2-D raster, got shape {img.shape}")
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(img).tobytes())


def read_pgm_bytes(path):
    with open(path, "rb") as fh:
        data = fh.read()
    w, h, start = _parse_header(data, b"P5", path)
    if len(data) - start < w * h:
        raise FormatError(f"{path}: payload truncated, need {w * h} bytes", offset=len(data))
    return np.frombuffer(data, dtype=np.uint8, count=w * h, offset=start).reshape(h, w).copy()


def read_pgm(path):
    """Read a P5 PGM as a Bitmap, thresholding at 128."""
    return (read_pgm_bytes(path) >= 128).astype(np.uint8)


def read_pgm_field(path):
    return read_pgm_bytes(path).astype(np.float64) / 255.0


def write_ppm(rgb, path):
    """Binary PPM (P6, maxval 255) from an (H, W, 3) uint8 array."""
    rgb = np.asarray(rgb, dtype=np.uint8)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ShapeError(f"PPM needs (H, W, 3), got {rgb.shape}")
    h, w, _ = rgb.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(rgb).tobytes())


def read_ppm(path):
    with open(path, "rb") as fh:
        data = fh.read()
    w, h, start = _parse_header(data, b"P6", path)
    if len(data) - start < 3 * w * h:
        raise FormatError(f"{path}: payload truncated, need {3 * w * h} bytes", offset=len(data))
    return np.frombuffer(data, dtype=np.uint8, count=3 * w * h, offset=start).reshape(h, w, 3).copy()
