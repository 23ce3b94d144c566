"""Binary masks, exact signed distance fields, pooling, and IoU.

Distances are measured between pixel centers.  The distance transform
is exact Euclidean, computed separably: a per-column scan finds the
row distance to the nearest true pixel in each column, then a per-row
lower-envelope pass minimizes over columns on squared distances.  All
squared distances are integers until the final square root.

The signed distance field of a mask V uses the opposite-class
convention: a pixel outside V gets +distance to the nearest pixel of V,
a pixel inside V gets -distance to the nearest pixel of the complement.
Because a pixel is never its own opposite, the magnitude is at least 1.
If the opposite class is empty (all-true or all-false mask), its
distance is defined as the image diagonal, so normalized values always
stay within [-1, 1].
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import pgm
from .errors import ConfigError, DimensionError, IntegrityError

_NO_FEATURE = np.int64(2**62)


class BinaryMask:
    """An immutable 2-d boolean raster."""

    __slots__ = ("a",)

    def __init__(self, values):
        arr = np.array(values, dtype=bool)
        if arr.ndim != 2:
            raise DimensionError(f"mask must be 2-d, got shape {arr.shape}")
        arr.flags.writeable = False
        self.a = arr

    @classmethod
    def zeros(cls, h: int, w: int) -> "BinaryMask":
        return cls(np.zeros((h, w), dtype=bool))

    @classmethod
    def full(cls, h: int, w: int) -> "BinaryMask":
        return cls(np.ones((h, w), dtype=bool))

    @property
    def h(self) -> int:
        return self.a.shape[0]

    @property
    def w(self) -> int:
        return self.a.shape[1]

    @property
    def shape(self):
        return self.a.shape

    def count(self) -> int:
        return int(self.a.sum())

    def any(self) -> bool:
        return bool(self.a.any())

    def all(self) -> bool:
        return bool(self.a.all())

    def __eq__(self, other):
        return isinstance(other, BinaryMask) and self.a.shape == other.a.shape and bool(
            (self.a == other.a).all()
        )

    def __hash__(self):
        return hash((self.a.shape, self.a.tobytes()))

    def __repr__(self):
        return f"BinaryMask({self.h}x{self.w}, {self.count()} true)"


def _check_same_shape(a: BinaryMask, b: BinaryMask):
    if a.shape != b.shape:
        raise DimensionError(f"mask shapes {a.shape} and {b.shape} differ")


def mask_union(a: BinaryMask, b: BinaryMask) -> BinaryMask:
    _check_same_shape(a, b)
    return BinaryMask(a.a | b.a)


def mask_intersect(a: BinaryMask, b: BinaryMask) -> BinaryMask:
    _check_same_shape(a, b)
    return BinaryMask(a.a & b.a)


def mask_diff(a: BinaryMask, b: BinaryMask) -> BinaryMask:
    _check_same_shape(a, b)
    return BinaryMask(a.a & ~b.a)


def iou(a: BinaryMask, b: BinaryMask) -> float:
    """Intersection over union.  Both empty -> 1.0, exactly one empty -> 0.0."""
    _check_same_shape(a, b)
    union = int((a.a | b.a).sum())
    if union == 0:
        return 1.0
    return int((a.a & b.a).sum()) / union


# -- exact Euclidean distance transform ----------------------------------


def _column_sq(feature: np.ndarray) -> np.ndarray:
    """Squared row distance to the nearest true pixel in the same column.

    Columns with no feature get the _NO_FEATURE sentinel.
    """
    h, w = feature.shape
    big = h  # larger than any real row distance (max h - 1)
    d = np.where(feature, 0, big).astype(np.int64)
    for y in range(1, h):
        np.minimum(d[y], d[y - 1] + 1, out=d[y])
    for y in range(h - 2, -1, -1):
        np.minimum(d[y], d[y + 1] + 1, out=d[y])
    sq = d * d
    sq[d >= big] = _NO_FEATURE
    return sq


def _envelope_row(f: np.ndarray, out: np.ndarray) -> None:
    """Lower envelope of the parabolas x -> (x - q)^2 + f[q] over one row.

    f holds integer parabola heights (the per-column squared distances);
    entries equal to the sentinel contribute no parabola.  Writes the
    pointwise envelope minimum into ``out``.
    """
    n = f.shape[0]
    qs = np.flatnonzero(f < _NO_FEATURE)
    if qs.size == 0:
        out[:] = _NO_FEATURE
        return
    m = qs.size
    v = np.empty(m, dtype=np.int64)  # column of the k-th envelope parabola
    z = np.empty(m + 1, dtype=np.float64)  # boundaries between parabolas
    v[0] = qs[0]
    z[0] = -np.inf
    z[1] = np.inf
    k = 0
    fl = f  # local alias
    for q in qs[1:].tolist():
        fq_q2 = int(fl[q]) + q * q
        while True:
            p = int(v[k])
            s = (fq_q2 - int(fl[p]) - p * p) / (2 * (q - p))
            if s <= z[k]:
                k -= 1
            else:
                break
        k += 1
        v[k] = q
        z[k] = s
        z[k + 1] = np.inf
    x = np.arange(n)
    idx = np.searchsorted(z[1 : k + 1], x, side="right")
    best = v[idx]
    out[:] = (x - best) ** 2 + fl[best]


def edt_sq(mask: BinaryMask) -> np.ndarray:
    """Exact squared Euclidean distance to the nearest true pixel (int64).

    An empty mask has no feature to measure against; every pixel gets
    the squared image diagonal by convention.
    """
    h, w = mask.shape
    if not mask.any():
        return np.full((h, w), np.int64(h * h + w * w))
    colsq = _column_sq(mask.a)
    out = np.empty((h, w), dtype=np.int64)
    for y in range(h):
        _envelope_row(colsq[y], out[y])
    return out


def edt(mask: BinaryMask) -> np.ndarray:
    """Exact Euclidean distance to the nearest true pixel (float64)."""
    return np.sqrt(edt_sq(mask).astype(np.float64))


@dataclass(frozen=True)
class SdfField:
    """A signed distance field and its diagonal-normalized form."""

    values: np.ndarray
    diagonal: float
    normalized: np.ndarray = field(repr=False)

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]


def sdf(mask: BinaryMask) -> SdfField:
    """Signed distance field of a mask (negative inside, positive outside)."""
    h, w = mask.shape
    diagonal = math.sqrt(h * h + w * w)
    outside = np.sqrt(edt_sq(mask).astype(np.float64))
    inside = np.sqrt(edt_sq(BinaryMask(~mask.a)).astype(np.float64))
    values = np.where(mask.a, -inside, outside)
    values.flags.writeable = False
    normalized = values / diagonal
    normalized.flags.writeable = False
    return SdfField(values=values, diagonal=diagonal, normalized=normalized)


def pool_to_grid(field: SdfField, grid_h: int, grid_w: int) -> np.ndarray:
    """Mean-pool the normalized field onto a grid; returns (grid_h*grid_w,).

    Cells are equal-size blocks, so the mean of the pooled vector equals
    the global mean of the normalized field.
    """
    h, w = field.values.shape
    if grid_h < 1 or grid_w < 1 or h % grid_h or w % grid_w:
        raise ConfigError(f"grid {grid_h}x{grid_w} does not divide field {h}x{w}")
    ch, cw = h // grid_h, w // grid_w
    pooled = field.normalized.reshape(grid_h, ch, grid_w, cw).mean(axis=(1, 3))
    return pooled.reshape(grid_h * grid_w)


# -- serialization --------------------------------------------------------


def write_mask(path, mask: BinaryMask) -> None:
    pgm.write_pgm(path, np.where(mask.a, 255, 0).astype(np.uint8))


def read_mask(path) -> BinaryMask:
    values = pgm.read_pgm(path)
    bad = (values != 0) & (values != 255)
    if bad.any():
        raise IntegrityError(f"{path}: mask PGM has levels other than 0 and 255")
    return BinaryMask(values == 255)


def sdf_to_csv(field: SdfField, path) -> None:
    """One CSV row per pixel: y, x, signed distance, normalized distance."""
    h, w = field.values.shape
    with open(path, "w", encoding="ascii") as fh:
        fh.write("y,x,distance,normalized\n")
        for y in range(h):
            row_v = field.values[y]
            row_n = field.normalized[y]
            for x in range(w):
                fh.write(f"{y},{x},{float(row_v[x])!r},{float(row_n[x])!r}\n")


def sdf_to_pgm(field: SdfField, path) -> None:
    """Heatmap of the normalized field: -1 -> 0, 0 -> 128, +1 -> 255."""
    levels = np.clip(np.rint((field.normalized + 1.0) * 127.5), 0, 255).astype(np.uint8)
    pgm.write_pgm(path, levels)
