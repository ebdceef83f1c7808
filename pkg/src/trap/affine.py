"""Affine input augmentation: basic matrices, composition, sampling and warping.

Coordinates are normalized with the origin at the image center and
x, y in [-1, 1] spanning the pixel grid (pixel centers at (2j + 1)/W - 1).
A matrix M maps source coordinates to transformed coordinates; warping
uses inverse mapping, so every output pixel samples the input at
M^-1 (x', y') with bilinear interpolation and zero fill outside the image.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields

import numpy as np

KINDS = ("translate", "rotate", "scale", "shear")

# outermost first: translate(rotate(scale(shear(x)))), so shear is applied first
DEFAULT_ORDER = KINDS

# sub-pixel distance below which a sampling coordinate is treated as a grid point
_SNAP = 1e-9


class SingularTransformError(ValueError):
    pass


@dataclass(frozen=True)
class AffineParams:
    """The seven scalar transform parameters; ``rot`` is in degrees."""

    tx: float = 0.0
    ty: float = 0.0
    rot: float = 0.0
    sx: float = 1.0
    sy: float = 1.0
    dx: float = 0.0
    dy: float = 0.0

    def __post_init__(self):
        for f in fields(self):
            if not math.isfinite(getattr(self, f.name)):
                raise ValueError(f"affine parameter {f.name} is not finite")


IDENTITY = AffineParams()


@dataclass(frozen=True)
class RangeTable:
    """Uniform sampling interval (lower, upper) for each affine parameter."""

    tx: tuple = (-0.1, 0.1)
    ty: tuple = (-0.1, 0.1)
    rot: tuple = (-90.0, 90.0)
    sx: tuple = (0.5, 1.5)
    sy: tuple = (0.5, 1.5)
    dx: tuple = (-30.0, 30.0)
    dy: tuple = (-30.0, 30.0)

    def __post_init__(self):
        for f in fields(self):
            lo, hi = getattr(self, f.name)
            if not (math.isfinite(lo) and math.isfinite(hi)) or lo > hi:
                raise ValueError(f"range for {f.name} must satisfy lower <= upper, got ({lo}, {hi})")
            object.__setattr__(self, f.name, (float(lo), float(hi)))

    @classmethod
    def collapsed(cls, params: AffineParams = IDENTITY, **free) -> "RangeTable":
        """Ranges pinned to ``params``; keyword arguments leave those parameters free."""
        pinned = {f.name: (getattr(params, f.name),) * 2 for f in fields(AffineParams)}
        pinned.update(free)
        return cls(**pinned)

    def as_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


DEFAULT_RANGES = RangeTable()


def cos_sin_degrees(degrees: float) -> tuple:
    """cos and sin of an angle in degrees, exact at multiples of 90."""
    quarter = round(degrees / 90.0)
    rest = math.radians(degrees - 90.0 * quarter)
    c, s = math.cos(rest), math.sin(rest)
    for _ in range(quarter % 4):
        c, s = -s, c
    return c, s


def basic_matrix(kind: str, params: AffineParams) -> np.ndarray:
    if kind == "translate":
        return np.array([[1.0, 0.0, params.tx], [0.0, 1.0, params.ty], [0.0, 0.0, 1.0]])
    if kind == "rotate":
        c, s = cos_sin_degrees(params.rot)
        return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    if kind == "scale":
        return np.array([[params.sx, 0.0, 0.0], [0.0, params.sy, 0.0], [0.0, 0.0, 1.0]])
    if kind == "shear":
        return np.array([[1.0, params.dx, 0.0], [params.dy, 1.0, 0.0], [0.0, 0.0, 1.0]])
    raise ValueError(f"unknown transform kind {kind!r}; expected one of {KINDS}")


def translate(tx: float, ty: float = 0.0) -> np.ndarray:
    return basic_matrix("translate", AffineParams(tx=tx, ty=ty))


def rotate(degrees: float) -> np.ndarray:
    return basic_matrix("rotate", AffineParams(rot=degrees))


def scale(sx: float, sy: float = 1.0) -> np.ndarray:
    return basic_matrix("scale", AffineParams(sx=sx, sy=sy))


def shear(dx: float, dy: float = 0.0) -> np.ndarray:
    return basic_matrix("shear", AffineParams(dx=dx, dy=dy))


def compose_affine(matrices) -> np.ndarray:
    """Left-to-right product; the last matrix acts on a point first."""
    matrices = list(matrices)
    if not matrices:
        raise ValueError("compose_affine needs at least one matrix")
    out = np.asarray(matrices[0], dtype=np.float64)
    for m in matrices[1:]:
        out = out @ np.asarray(m, dtype=np.float64)
    return out


def multi_form_matrix(params: AffineParams, order=DEFAULT_ORDER) -> np.ndarray:
    return compose_affine([basic_matrix(kind, params) for kind in order])


def apply_to_point(matrix: np.ndarray, x: float, y: float) -> tuple:
    v = np.asarray(matrix) @ np.array([x, y, 1.0])
    return float(v[0]), float(v[1])


def sample_affine_params(rng: np.random.Generator, ranges: RangeTable = DEFAULT_RANGES) -> AffineParams:
    values = {}
    for f in fields(AffineParams):
        lo, hi = getattr(ranges, f.name)
        values[f.name] = float(rng.uniform(lo, hi)) if hi > lo else lo
    return AffineParams(**values)


def _pixel_frame(size: int) -> np.ndarray:
    # maps pixel index j to normalized coordinate (2j + 1)/size - 1
    return np.array([2.0 / size, 1.0 / size - 1.0])


def sampling_plan(matrices: np.ndarray, height: int, width: int):
    """Gather indices and bilinear weights for inverse-mapped sampling.

    ``matrices`` is (3, 3) or (N, 3, 3). Returns ``(index, weight)`` with
    shape (N, 4, H*W): flat source-pixel indices of the four neighbours and
    their weights, zero for neighbours outside the image.
    """
    m = np.asarray(matrices, dtype=np.float64)
    if m.ndim == 2:
        m = m[None]
    det = m[:, 0, 0] * m[:, 1, 1] - m[:, 0, 1] * m[:, 1, 0]
    if np.any(np.abs(det) < 1e-12) or not np.all(np.isfinite(m)):
        raise SingularTransformError("affine matrix is singular or non-finite")
    inv = np.linalg.inv(m)

    sx, ox = _pixel_frame(width)
    sy, oy = _pixel_frame(height)
    cols, rows = np.meshgrid(np.arange(width, dtype=np.float64), np.arange(height, dtype=np.float64))
    xn = (cols * sx + ox).ravel()
    yn = (rows * sy + oy).ravel()
    src_x = inv[:, 0, 0, None] * xn + inv[:, 0, 1, None] * yn + inv[:, 0, 2, None]
    src_y = inv[:, 1, 0, None] * xn + inv[:, 1, 1, None] * yn + inv[:, 1, 2, None]
    # back to pixel units
    px = (src_x - ox) / sx
    py = (src_y - oy) / sy
    for arr in (px, py):
        near = np.rint(arr)
        snap = np.abs(arr - near) < _SNAP
        arr[snap] = near[snap]

    x0 = np.floor(px)
    y0 = np.floor(py)
    wx = px - x0
    wy = py - y0
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)

    n = m.shape[0]
    index = np.empty((n, 4, height * width), dtype=np.int64)
    weight = np.empty((n, 4, height * width), dtype=np.float64)
    corners = ((0, 0, (1 - wx) * (1 - wy)), (1, 0, wx * (1 - wy)), (0, 1, (1 - wx) * wy), (1, 1, wx * wy))
    for k, (ddx, ddy, w) in enumerate(corners):
        xi = x0 + ddx
        yi = y0 + ddy
        inside = (xi >= 0) & (xi < width) & (yi >= 0) & (yi < height)
        index[:, k] = np.where(inside, yi * width + xi, 0)
        weight[:, k] = np.where(inside, w, 0.0)
    return index, weight


def warp_with_plan(image: np.ndarray, index: np.ndarray, weight: np.ndarray) -> np.ndarray:
    n, c, h, w = image.shape
    flat = image.reshape(n, c, h * w).astype(np.float64, copy=False)
    out = np.zeros((n, c, h * w), dtype=np.float64)
    for k in range(4):
        idx = np.broadcast_to(index[:, None, k, :], (n, c, h * w))
        out += weight[:, None, k, :] * np.take_along_axis(flat, idx, axis=2)
    return out.reshape(n, c, h, w).astype(image.dtype, copy=False)


def warp_backward_with_plan(grad: np.ndarray, index: np.ndarray, weight: np.ndarray) -> np.ndarray:
    """Adjoint of :func:`warp_with_plan` with respect to the image values."""
    n, c, h, w = grad.shape
    hw = h * w
    g = grad.reshape(n, c, hw).astype(np.float64, copy=False)
    base = (np.arange(n * c, dtype=np.int64) * hw).reshape(n, c, 1)
    out = np.zeros(n * c * hw, dtype=np.float64)
    for k in range(4):
        flat_idx = (base + index[:, None, k, :]).ravel()
        out += np.bincount(flat_idx, weights=(g * weight[:, None, k, :]).ravel(), minlength=n * c * hw)
    return out.reshape(n, c, h, w).astype(grad.dtype, copy=False)


def warp_bilinear(image: np.ndarray, matrix: np.ndarray) -> np.ndarray:
    """Warp a (N, C, H, W) batch by one (3, 3) matrix or one matrix per item."""
    image = np.asarray(image)
    squeeze = image.ndim == 3
    if squeeze:
        image = image[None]
    m = np.asarray(matrix, dtype=np.float64)
    if m.ndim == 2:
        m = np.broadcast_to(m, (image.shape[0], 3, 3))
    index, weight = sampling_plan(m, image.shape[2], image.shape[3])
    out = warp_with_plan(image, index, weight)
    return out[0] if squeeze else out


def draw_transforms(rngs, p: float, ranges: RangeTable = DEFAULT_RANGES, order=DEFAULT_ORDER):
    """One Bernoulli(p) gate and, when it fires, one parameter draw per generator.

    Returns ``(matrices, applied)`` of shapes (N, 3, 3) and (N,).
    """
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"probability p must lie in [0, 1], got {p}")
    matrices = np.tile(np.eye(3), (len(rngs), 1, 1))
    applied = np.zeros(len(rngs), dtype=bool)
    for i, rng in enumerate(rngs):
        if rng.random() < p:
            applied[i] = True
            matrices[i] = multi_form_matrix(sample_affine_params(rng, ranges), order)
    return matrices, applied


def apply_random_affine(image, p: float, rng, ranges: RangeTable = DEFAULT_RANGES, order=DEFAULT_ORDER):
    """Warp ``image`` by a freshly sampled multi-form transform with probability ``p``.

    ``rng`` is a single generator (one draw shared by the whole input) or a
    sequence of generators, one per batch item.
    """
    image = np.asarray(image)
    if isinstance(rng, np.random.Generator):
        matrices, applied = draw_transforms([rng], p, ranges, order)
        if not applied[0]:
            return image, False
        batch = image if image.ndim == 4 else image[None]
        out = warp_bilinear(batch, np.broadcast_to(matrices[0], (batch.shape[0], 3, 3)))
        return (out if image.ndim == 4 else out[0]), True
    matrices, applied = draw_transforms(list(rng), p, ranges, order)
    out = image.copy()
    if applied.any():
        out[applied] = warp_bilinear(image[applied], matrices[applied])
    return out, applied
