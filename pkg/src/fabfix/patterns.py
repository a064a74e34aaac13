"""Seeded random training layouts.

A pattern is built by dropping shapes of mixed types and sizes onto an
empty canvas. Some shapes after the first are carved out instead of added,
which produces holes, notches and narrow channels. Shapes that would push
the silicon fraction above ``MAX_DENSITY`` are rejected; a pattern that
ends below ``MIN_DENSITY`` is discarded and redrawn.

The first shape is drawn at the minimum feature size and kept clear of all
later shapes, so every pattern contains at least one feature at that scale.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .errors import GenerationError, ParameterError
from .raster import fill_disk, fill_polygon

SHAPES = ("rectangle", "bar", "cross", "star", "disk", "ring", "blob")
MIN_DENSITY = 0.15
MAX_DENSITY = 0.85
MAX_ATTEMPTS = 1000
CARVE_PROBABILITY = 0.25


def _default_mix():
    return {"rectangle": 1.0, "bar": 1.5, "cross": 1.0, "star": 1.0,
            "disk": 0.75, "ring": 0.5, "blob": 1.0}


@dataclass(frozen=True)
class PatternSpec:
    width: int = 2048
    height: int = 1536
    n_shapes: tuple = (250, 450)
    shape_mix: dict = field(default_factory=_default_mix)
    feature_size_range: tuple = (6, 300)
    seed: int = 0

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ParameterError(f"canvas must be at least 1x1, got {self.width}x{self.height}")
        lo, hi = self.n_shapes
        if not 1 <= lo <= hi:
            raise ParameterError(f"n_shapes range {self.n_shapes} is invalid")
        unknown = set(self.shape_mix) - set(SHAPES)
        if unknown:
            raise ParameterError(f"unknown shape types {sorted(unknown)}")
        weights = list(self.shape_mix.values())
        if any(w < 0 for w in weights) or not any(w > 0 for w in weights):
            raise ParameterError("shape_mix weights must be >= 0 and not all zero")
        fmin, fmax = self.feature_size_range
        if not 2 <= fmin <= fmax:
            raise ParameterError(f"feature_size_range {self.feature_size_range} needs 2 <= min <= max")

    def to_dict(self):
        d = asdict(self)
        d["n_shapes"] = list(self.n_shapes)
        d["feature_size_range"] = list(self.feature_size_range)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        for key in ("n_shapes", "feature_size_range"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


def _rotate(points, angle, cx, cy):
    c, s = math.cos(angle), math.sin(angle)
    p = np.asarray(points, dtype=np.float64)
    return np.stack([cx + c * p[:, 0] - s * p[:, 1], cy + s * p[:, 0] + c * p[:, 1]], axis=1)


class _Drawer:
    def __init__(self, rng, width, height, fmin, fmax):
        self.rng, self.width, self.height = rng, width, height
        self.fmin, self.fmax = fmin, fmax

    def size(self):
        """Log-uniform feature size in [fmin, fmax]."""
        return math.exp(self.rng.uniform(math.log(self.fmin), math.log(self.fmax) + 1e-12))

    def angle(self):
        # axis-aligned half the time: layouts are mostly Manhattan
        if self.rng.random() < 0.5:
            return 0.0
        return self.rng.uniform(0, math.pi)

    def center(self):
        return self.rng.uniform(0, self.width), self.rng.uniform(0, self.height)

    def canvas(self):
        return np.zeros((self.height, self.width), dtype=np.uint8)

    def poly(self, pts, angle=0.0):
        cx, cy = self.center()
        return fill_polygon(_rotate(pts, angle, cx, cy), self.width, self.height)

    def rectangle(self, thin):
        a = self.fmin if thin else self.size()
        b = self.size()
        if self.rng.random() < 0.5:
            a, b = b, a
        return self.poly([(-a / 2, -b / 2), (a / 2, -b / 2), (a / 2, b / 2), (-a / 2, b / 2)],
                         self.angle())

    def bar(self, thin):
        w = self.fmin if thin else self.rng.uniform(self.fmin, max(self.fmin, self.size() / 3))
        length = max(3 * w, self.size() * self.rng.uniform(1.5, 4.0))
        return self.poly([(-length / 2, -w / 2), (length / 2, -w / 2),
                          (length / 2, w / 2), (-length / 2, w / 2)], self.angle())

    def cross(self, thin):
        w = self.fmin if thin else self.rng.uniform(self.fmin, max(self.fmin, self.size() / 3))
        arm = max(2 * w, self.size())
        a = self.angle()
        cx, cy = self.center()
        out = self.canvas()
        for rot in (0.0, math.pi / 2):
            pts = [(-arm, -w / 2), (arm, -w / 2), (arm, w / 2), (-arm, w / 2)]
            fill_polygon(_rotate(pts, a + rot, cx, cy), self.width, self.height, out=out)
        return out

    def star(self, thin):
        n = int(self.rng.integers(4, 9))
        outer = self.fmin if thin else max(self.fmin, self.size() / 2)
        inner = outer * self.rng.uniform(0.3, 0.6)
        if thin:
            outer = max(outer, 2 * self.fmin)
            inner = self.fmin / 2
        t = np.arange(2 * n) * math.pi / n
        r = np.where(np.arange(2 * n) % 2 == 0, outer, inner)
        return self.poly(np.stack([r * np.cos(t), r * np.sin(t)], axis=1), self.angle())

    def disk(self, thin):
        d = self.fmin if thin else self.size()
        cx, cy = self.center()
        return fill_disk(cx, cy, d / 2, self.width, self.height)

    def ring(self, thin):
        w = self.fmin if thin else self.rng.uniform(self.fmin, max(self.fmin, self.size() / 3))
        outer = max(1.5 * w, self.size() / 2) + w
        cx, cy = self.center()
        return fill_disk(cx, cy, outer, self.width, self.height, inner=outer - w)

    def blob(self, thin):
        base = self.fmin / 2 if thin else max(self.fmin, self.size() / 2)
        t = np.linspace(0, 2 * math.pi, 64, endpoint=False)
        r = np.ones_like(t)
        for k in range(2, 6):
            r += self.rng.uniform(0, 0.35 / (k - 1)) * np.cos(k * t + self.rng.uniform(0, 2 * math.pi))
        r = base * np.maximum(r, 0.3)
        return self.poly(np.stack([r * np.cos(t), r * np.sin(t)], axis=1))


def _dilate(mask, margin):
    """Square dilation of a boolean mask by ``margin`` pixels."""
    if margin <= 0:
        return mask.copy()
    from scipy.ndimage import binary_dilation
    return binary_dilation(mask, structure=np.ones((2 * margin + 1, 2 * margin + 1), bool))


def _attempt_pattern(spec, rng, budget):
    fmin, fmax = spec.feature_size_range
    draw = _Drawer(rng, spec.width, spec.height, fmin, fmax)
    names = [n for n in SHAPES if spec.shape_mix.get(n, 0) > 0]
    probs = np.array([spec.shape_mix[n] for n in names], dtype=np.float64)
    probs /= probs.sum()
    total = spec.width * spec.height
    target = int(rng.integers(spec.n_shapes[0], spec.n_shapes[1] + 1))

    canvas = draw.canvas()
    protected = None
    placed = 0
    while placed < target:
        if budget[0] >= MAX_ATTEMPTS:
            return None
        budget[0] += 1
        kind = names[int(rng.choice(len(names), p=probs))]
        mask = getattr(draw, kind)(thin=placed == 0)
        if not mask.any():
            continue
        if placed == 0:
            if mask.sum() > MAX_DENSITY * total:
                continue
            canvas |= mask
            protected = _dilate(mask.astype(bool), max(2, fmin // 2))
            placed = 1
            continue
        if (mask.astype(bool) & protected).any():
            continue
        if rng.random() < CARVE_PROBABILITY:
            trial = canvas & (1 - mask)
        else:
            trial = canvas | mask
        if trial.sum() > MAX_DENSITY * total:
            continue
        canvas = trial
        placed += 1
    if canvas.sum() < MIN_DENSITY * total:
        return None
    return canvas


def generate_pattern(spec):
    """Deterministic random layout Bitmap for ``spec``."""
    rng = np.random.default_rng(spec.seed)
    budget = [0]
    while budget[0] < MAX_ATTEMPTS:
        canvas = _attempt_pattern(spec, rng, budget)
        if canvas is not None:
            return canvas
    raise GenerationError(
        f"could not build a pattern with silicon fraction in [{MIN_DENSITY}, {MAX_DENSITY}] "
        f"within {MAX_ATTEMPTS} shape attempts (seed {spec.seed})")


def generate_corpus(spec_base, n_patterns):
    """Patterns for seeds spec_base.seed .. spec_base.seed + n_patterns - 1."""
    if n_patterns < 1:
        raise ParameterError(f"n_patterns must be >= 1, got {n_patterns}")
    return [generate_pattern(replace(spec_base, seed=spec_base.seed + i))
            for i in range(n_patterns)]


# -- probe shapes -----------------------------------------------------------------

def probe_star(size, outer, inner, points=5):
    """Centred ``points``-pointed star on a size x size canvas, one tip up."""
    if not 0 < inner < outer or points < 3:
        raise ParameterError(f"need 0 < inner < outer and points >= 3, got {inner}, {outer}, {points}")
    t = -math.pi / 2 + np.arange(2 * points) * math.pi / points
    r = np.where(np.arange(2 * points) % 2 == 0, outer, inner)
    c = size / 2
    return fill_polygon(np.stack([c + r * np.cos(t), c + r * np.sin(t)], axis=1), size, size)


def probe_cross(size, span, width):
    """Centred plus sign: two ``span`` x ``width`` bars on a size x size canvas."""
    if not 0 < width <= span <= size:
        raise ParameterError(f"need 0 < width <= span <= size, got {width}, {span}, {size}")
    out = np.zeros((size, size), dtype=np.uint8)
    a, w = (size - span) // 2, (size - width) // 2
    out[w:w + width, a:a + span] = 1
    out[a:a + span, w:w + width] = 1
    return out
