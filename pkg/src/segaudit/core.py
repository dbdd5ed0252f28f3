"""Core image, mask, and transform types plus resampling primitives.

All types freeze their arrays at construction, so instances are immutable
and safe to share across threads. Every sampling operation uses the
pull-back convention: ``output(x) = input(x + d(x))``, which avoids holes
in the warped result. Intensities are sampled bilinearly, labels with
nearest-neighbor so masks stay binary.
"""

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

__all__ = [
    "Image",
    "LabelMask",
    "AffineTransform2D",
    "DisplacementField",
    "resample_image",
    "warp_mask",
    "affine_to_field",
    "compose_fields",
    "gaussian_smooth",
    "box_resize",
]


def _frozen(values, dtype) -> np.ndarray:
    arr = np.array(values, dtype=dtype, order="C", copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class Image:
    """2D grayscale image; ``pixels`` is a (height, width) array in [0, 1]."""

    pixels: np.ndarray

    def __post_init__(self):
        px = np.array(self.pixels, dtype=np.float64, order="C", copy=True)
        if px.ndim != 2 or px.size == 0:
            raise ValueError("image must be a non-empty 2D array")
        if not np.all(np.isfinite(px)):
            raise ValueError("image intensities must be finite")
        if px.min() < 0.0 or px.max() > 1.0:
            raise ValueError("image intensities must lie in [0, 1]")
        px.setflags(write=False)
        object.__setattr__(self, "pixels", px)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.pixels.shape


@dataclass(frozen=True, eq=False)
class LabelMask:
    """Multi-structure binary mask.

    ``channels`` has shape (n_structures, height, width); channels may
    overlap spatially (each structure is an independent binary layer).
    """

    structures: tuple[str, ...]
    channels: np.ndarray

    def __post_init__(self):
        names = tuple(self.structures)
        if not names or any(not n for n in names):
            raise ValueError("structure names must be non-empty")
        if len(set(names)) != len(names):
            raise ValueError("structure names must be unique")
        ch = np.asarray(self.channels)
        if ch.ndim != 3 or ch.shape[0] != len(names) or ch.shape[1] * ch.shape[2] == 0:
            raise ValueError("channels must have shape (n_structures, height, width)")
        if ch.dtype != np.bool_:
            unique = np.unique(ch)
            if not np.all(np.isin(unique, (0, 1))):
                raise ValueError("mask channels must be binary")
        ch = np.array(ch, dtype=bool, order="C", copy=True)
        ch.setflags(write=False)
        object.__setattr__(self, "structures", names)
        object.__setattr__(self, "channels", ch)

    @classmethod
    def zeros(cls, structures, width: int, height: int) -> "LabelMask":
        names = tuple(structures)
        return cls(names, np.zeros((len(names), height, width), dtype=bool))

    def channel(self, name: str) -> np.ndarray:
        return self.channels[self.structures.index(name)]

    def with_channels(self, channels) -> "LabelMask":
        return LabelMask(self.structures, channels)

    @property
    def height(self) -> int:
        return self.channels.shape[1]

    @property
    def width(self) -> int:
        return self.channels.shape[2]

    @property
    def shape(self) -> tuple[int, int]:
        return self.channels.shape[1:]


@dataclass(frozen=True, eq=False)
class AffineTransform2D:
    """2D affine map ``p -> matrix @ p + translation`` in pixel units.

    Coordinates are taken relative to the image center (see
    :func:`affine_to_field`), which keeps rotation and scale parameters
    independent of resolution. Reflections (non-positive determinant) are
    rejected.
    """

    matrix: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        m = np.array(self.matrix, dtype=np.float64, copy=True)
        t = np.array(self.translation, dtype=np.float64, copy=True).reshape(-1)
        if m.shape != (2, 2) or t.shape != (2,):
            raise ValueError("matrix must be 2x2 and translation a 2-vector")
        if not (np.all(np.isfinite(m)) and np.all(np.isfinite(t))):
            raise ValueError("affine parameters must be finite")
        if np.linalg.det(m) <= 0.0:
            raise ValueError("linear part must have positive determinant")
        m.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "matrix", m)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "AffineTransform2D":
        return cls(np.eye(2), np.zeros(2))

    @classmethod
    def from_translation(cls, tx: float, ty: float) -> "AffineTransform2D":
        return cls(np.eye(2), np.array([tx, ty]))

    @classmethod
    def from_rotation(cls, degrees: float) -> "AffineTransform2D":
        th = math.radians(degrees)
        c, s = math.cos(th), math.sin(th)
        return cls(np.array([[c, -s], [s, c]]), np.zeros(2))

    @classmethod
    def from_params(cls, params) -> "AffineTransform2D":
        p = np.asarray(params, dtype=np.float64).reshape(6)
        return cls(p[:4].reshape(2, 2), p[4:])

    @property
    def params(self) -> np.ndarray:
        """The six parameters as (a11, a12, a21, a22, tx, ty)."""
        return np.concatenate([self.matrix.reshape(4), self.translation])

    def rotation_degrees(self) -> float:
        """Rotation angle implied by the linear part."""
        return math.degrees(math.atan2(self.matrix[1, 0], self.matrix[0, 0]))


@dataclass(frozen=True, eq=False)
class DisplacementField:
    """Dense per-pixel displacement; ``dx``/``dy`` are (height, width) arrays."""

    dx: np.ndarray
    dy: np.ndarray

    def __post_init__(self):
        dx = np.array(self.dx, dtype=np.float64, order="C", copy=True)
        dy = np.array(self.dy, dtype=np.float64, order="C", copy=True)
        if dx.ndim != 2 or dx.shape != dy.shape or dx.size == 0:
            raise ValueError("dx and dy must be matching non-empty 2D arrays")
        if not (np.all(np.isfinite(dx)) and np.all(np.isfinite(dy))):
            raise ValueError("displacements must be finite")
        dx.setflags(write=False)
        dy.setflags(write=False)
        object.__setattr__(self, "dx", dx)
        object.__setattr__(self, "dy", dy)

    @classmethod
    def zero(cls, width: int, height: int) -> "DisplacementField":
        z = np.zeros((height, width))
        return cls(z, z)

    @property
    def height(self) -> int:
        return self.dx.shape[0]

    @property
    def width(self) -> int:
        return self.dx.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.dx.shape

    def magnitude(self) -> np.ndarray:
        """Per-pixel Euclidean norm of the displacement."""
        return np.hypot(self.dx, self.dy)


def _require_same_shape(a_shape, b_shape, what: str):
    if tuple(a_shape) != tuple(b_shape):
        raise ValueError(f"{what}: shapes {tuple(a_shape)} and {tuple(b_shape)} differ")


def sample_bilinear(grid: np.ndarray, field: DisplacementField) -> np.ndarray:
    """Bilinearly sample ``grid`` at (x + dx, y + dy); borders replicate."""
    _require_same_shape(grid.shape, field.shape, "sample_bilinear")
    iy, ix = np.indices(grid.shape)
    coords = np.stack([iy + field.dy, ix + field.dx])
    return ndimage.map_coordinates(grid, coords, order=1, mode="nearest")


def _sample_nearest(grid: np.ndarray, field: DisplacementField) -> np.ndarray:
    iy, ix = np.indices(grid.shape)
    coords = np.stack([iy + field.dy, ix + field.dx])
    return ndimage.map_coordinates(grid, coords, order=0, mode="nearest")


def resample_image(img: Image, field: DisplacementField) -> Image:
    """Warp an image through a displacement field (bilinear, border-replicate)."""
    _require_same_shape(img.shape, field.shape, "resample_image")
    out = sample_bilinear(img.pixels, field)
    return Image(np.clip(out, 0.0, 1.0))


def warp_mask(mask: LabelMask, field: DisplacementField) -> LabelMask:
    """Warp each mask channel with nearest-neighbor sampling (stays binary)."""
    _require_same_shape(mask.shape, field.shape, "warp_mask")
    warped = np.stack(
        [_sample_nearest(ch.astype(np.uint8), field) > 0 for ch in mask.channels]
    )
    return LabelMask(mask.structures, warped)


def affine_to_field(t: AffineTransform2D, width: int, height: int) -> DisplacementField:
    """Densify an affine transform into a displacement field.

    The transform acts on coordinates relative to the image center
    ((width-1)/2, (height-1)/2), so the field is
    ``d(x) = A (x - c) + b - (x - c)``.
    """
    if width < 1 or height < 1:
        raise ValueError("field dimensions must be positive")
    iy, ix = np.indices((height, width))
    xc = ix - (width - 1) / 2.0
    yc = iy - (height - 1) / 2.0
    a, b = t.matrix, t.translation
    dx = a[0, 0] * xc + a[0, 1] * yc + b[0] - xc
    dy = a[1, 0] * xc + a[1, 1] * yc + b[1] - yc
    return DisplacementField(dx, dy)


def compose_fields(outer: DisplacementField, inner: DisplacementField) -> DisplacementField:
    """Compose two fields so warping by the result equals warping by ``inner``
    then by ``outer``:

    ``d(x) = d_outer(x) + d_inner(x + d_outer(x))``

    with the inner field sampled bilinearly. Composing with the zero field on
    either side returns the other field exactly.
    """
    _require_same_shape(outer.shape, inner.shape, "compose_fields")
    dx = outer.dx + sample_bilinear(inner.dx, outer)
    dy = outer.dy + sample_bilinear(inner.dy, outer)
    return DisplacementField(dx, dy)


def gaussian_smooth(grid: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian blur with kernel radius ceil(3*sigma).

    Borders replicate, so constants are preserved and the output never
    leaves the input's value range. ``sigma == 0`` returns the input
    unchanged.
    """
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    grid = np.asarray(grid, dtype=np.float64)
    if sigma == 0:
        return grid.copy()
    radius = math.ceil(3.0 * sigma)
    return ndimage.gaussian_filter(grid, sigma, mode="nearest", radius=radius)


def box_resize(grid: np.ndarray, out_height: int, out_width: int) -> np.ndarray:
    """Area-averaging (exact box filter) resize of a 2D grid."""
    grid = np.asarray(grid, dtype=np.float64)
    if out_height < 1 or out_width < 1:
        raise ValueError("target dimensions must be positive")
    return _overlap_weights(grid.shape[0], out_height) @ grid @ _overlap_weights(
        grid.shape[1], out_width
    ).T


def _overlap_weights(src: int, dst: int) -> np.ndarray:
    # weights[j, i] = |[i, i+1) ∩ [j*s, (j+1)*s)| / s  with s = src/dst
    s = src / dst
    j = np.arange(dst, dtype=np.float64)[:, None]
    i = np.arange(src, dtype=np.float64)[None, :]
    lo = np.maximum(i, j * s)
    hi = np.minimum(i + 1.0, (j + 1.0) * s)
    return np.clip(hi - lo, 0.0, None) / s
