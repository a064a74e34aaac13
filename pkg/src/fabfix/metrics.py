"""Bitmap comparison: error pixels, reduction factors, diff maps, dataset BCE."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from decimal import ROUND_HALF_UP, Decimal

import numpy as np

from . import neural
from .errors import ParameterError, ShapeError
from .raster import as_bitmap, write_ppm

UNCHANGED, LOSS, GAIN = 0, 1, 2
INFINITY = "∞"

# visualization colours per code
COLORS = np.array([[0, 160, 0], [220, 0, 0], [0, 0, 220]], dtype=np.uint8)


def _pair(a, b):
    a, b = as_bitmap(a), as_bitmap(b)
    if a.shape != b.shape:
        raise ShapeError(f"bitmap shapes differ: {a.shape} vs {b.shape}")
    return a, b


def error_pixels(a, b):
    """Number of pixels where two equal-sized bitmaps differ."""
    a, b = _pair(a, b)
    return int(np.count_nonzero(a != b))


@dataclass(frozen=True)
class Reduction:
    uncorrected: int
    corrected: int

    @property
    def ratio(self):
        if self.corrected == 0:
            return math.inf
        return self.uncorrected / self.corrected

    @property
    def reported(self):
        """Ratio rounded half-up to one decimal, or the infinity sign."""
        if self.corrected == 0:
            return INFINITY
        q = Decimal(self.uncorrected) / Decimal(self.corrected)
        return str(q.quantize(Decimal("0.1"), rounding=ROUND_HALF_UP))

    def __str__(self):
        return self.reported

    def __float__(self):
        return float(self.ratio)


def reduction_factor(e_uncorrected, e_corrected):
    if e_uncorrected < 0 or e_corrected < 0:
        raise ParameterError(f"error counts must be >= 0, got {e_uncorrected}, {e_corrected}")
    return Reduction(int(e_uncorrected), int(e_corrected))


@dataclass(frozen=True)
class DiffMap:
    """Per-pixel codes: UNCHANGED, LOSS (nominal only), GAIN (other only)."""

    codes: np.ndarray

    @property
    def width(self):
        return self.codes.shape[1]

    @property
    def height(self):
        return self.codes.shape[0]

    def counts(self):
        c = np.bincount(self.codes.ravel(), minlength=3)
        return {"unchanged": int(c[UNCHANGED]), "loss": int(c[LOSS]), "gain": int(c[GAIN])}

    def to_rgb(self):
        return COLORS[self.codes]

    def write_ppm(self, path):
        write_ppm(self.to_rgb(), path)


def diff_map(nominal, other):
    a, b = _pair(nominal, other)
    codes = np.full(a.shape, UNCHANGED, dtype=np.uint8)
    codes[(a == 1) & (b == 0)] = LOSS
    codes[(a == 0) & (b == 1)] = GAIN
    return DiffMap(codes)


DIRECTIONS = ("forward", "inverse", "tandem")


def evaluate_bce(ensemble, dataset, split="test", direction="forward", forward=None,
                 batch_size=128):
    """Mean BCE of the ensemble-mean output against labels over a split.

    ``forward``: layout -> fabricated. ``inverse``: fabricated -> layout.
    ``tandem``: fabricated -> corrector -> ``forward`` ensemble -> fabricated.
    """
    if direction not in DIRECTIONS:
        raise ParameterError(f"direction must be one of {DIRECTIONS}, got {direction!r}")
    if direction == "tandem" and forward is None:
        raise ParameterError("tandem evaluation needs the forward ensemble")
    idx = dataset.indices(split)
    if len(idx) == 0:
        raise ParameterError(f"split {split!r} is empty")
    total = 0.0
    for i in range(0, len(idx), batch_size):
        b = idx[i:i + batch_size]
        lay, fab = dataset.pairs(b)
        if direction == "forward":
            pred, label = ensemble.predict(lay), fab
        elif direction == "inverse":
            pred, label = ensemble.predict(fab), lay
        else:
            pred, label = forward.predict(ensemble.predict(fab)), fab
        total += neural.bce(pred, label) * len(b)
    return total / len(idx)


RESULT_COLUMNS = ["name", "error_uncorrected", "error_corrected", "reduction_factor", "ratio"]


def reduction_row(name, e_uncorrected, e_corrected):
    r = reduction_factor(e_uncorrected, e_corrected)
    ratio = "inf" if math.isinf(r.ratio) else repr(r.ratio)
    return {"name": name, "error_uncorrected": r.uncorrected, "error_corrected": r.corrected,
            "reduction_factor": r.reported, "ratio": ratio}


def write_csv(path, rows, columns=None):
    """UTF-8 CSV with a header row; ``rows`` are dicts."""
    rows = list(rows)
    columns = columns or (list(rows[0]) if rows else [])
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=columns)
        w.writeheader()
        for row in rows:
            w.writerow(row)
