"""Dense maps, crop-and-resize transforms, and their resampling operators.

Coordinate conventions
----------------------
Arrays are row-major ``(height, width, channels)`` float64, axis order
``(y, x)``.  A :class:`CropTransform` reads a continuous source window and
resamples it to an integer target resolution.  Pixel centers follow the
half-pixel convention: output pixel ``(i, j)`` of an ``out_h x out_w`` crop
lands at source coordinate

    y = y0 + (i + 0.5) * win_h / out_h - 0.5
    x = x0 + (j + 0.5) * win_w / out_w - 0.5

so a window with ``y0 = x0 = 0`` and ``win == out == source`` dims is the
identity.  Resampling is bilinear.  With ``boundary="zero"`` reads outside
the source are zero and the output validity mask marks pixels whose bilinear
support stayed in bounds; with ``boundary="wrap"`` reads wrap around
(toroidal) and every pixel is valid.  ``inverse_splat`` is the exact adjoint
(matrix transpose) of the ``apply`` gather, which the averaging operator in
:mod:`cropeq.equivariance` relies on.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace

import numpy as np
from numpy.typing import NDArray

from .errors import ConstraintError, DimensionError, SemanticsError

__all__ = [
    "Semantics",
    "DenseMap",
    "CropTransform",
    "SplatResult",
    "CropSampler",
    "ColorJitterParams",
    "JitterFactors",
    "identity_transform",
    "sample_transform",
    "apply",
    "inverse_splat",
    "compose",
    "scale_transform",
    "cosine_window",
    "sample_jitter",
    "jitter_apply",
    "color_jitter",
]

FloatMap = NDArray[np.float64]

# Weight below which a splatted pixel is treated as uncovered.
WEIGHT_EPS = 1e-6

# Interpolated mask mass must reach this level for a resampled pixel to
# count as valid (i.e. every contributing tap was itself valid).
_MASK_FULL = 1.0 - 1e-9


class Semantics(enum.Enum):
    """What the channels of a :class:`DenseMap` mean."""

    RGB = "rgb"
    DEPTH = "depth"
    DISPARITY = "disparity"
    NORMAL = "normal"
    EDGE = "edge"
    FEATURE = "feature"
    WEIGHT = "weight"


_CHANNEL_COUNTS = {
    Semantics.RGB: 3,
    Semantics.DEPTH: 1,
    Semantics.DISPARITY: 1,
    Semantics.NORMAL: 3,
    Semantics.EDGE: 1,
    Semantics.WEIGHT: 1,
}


@dataclass
class DenseMap:
    """A dense per-pixel prediction or ground-truth field.

    Parameters
    ----------
    values : ndarray, shape (h, w, c)
        Row-major float array, channels interleaved per pixel.
    semantics : Semantics
        Channel interpretation.  Fixed channel counts are enforced for all
        semantics except ``FEATURE``.
    validity_mask : ndarray of bool, shape (h, w), optional
        True where ``values`` is trustworthy.  ``None`` means fully valid.

    Notes
    -----
    Semantic range invariants (unit normals, positive depth) are promises
    about authored ground truth; ``validate`` checks them on demand.
    Resampling keeps the semantics tag but does not re-impose them, e.g. a
    bilinearly resampled normal map is only approximately unit length
    (metrics renormalize internally).
    """

    values: FloatMap
    semantics: Semantics
    validity_mask: NDArray[np.bool_] | None = None

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 3:
            raise DimensionError(
                f"DenseMap values must be (h, w, c), got shape {self.values.shape}"
            )
        want = _CHANNEL_COUNTS.get(self.semantics)
        if want is not None and self.values.shape[2] != want:
            raise SemanticsError(
                f"{self.semantics.value} maps need {want} channel(s), "
                f"got {self.values.shape[2]}"
            )
        if self.validity_mask is not None:
            self.validity_mask = np.asarray(self.validity_mask, dtype=bool)
            if self.validity_mask.shape != self.values.shape[:2]:
                raise DimensionError(
                    f"validity_mask shape {self.validity_mask.shape} does not match "
                    f"map shape {self.values.shape[:2]}"
                )

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.values.shape  # type: ignore[return-value]

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def channels(self) -> int:
        return self.values.shape[2]

    def mask_or_full(self) -> NDArray[np.bool_]:
        """The validity mask, materializing all-true when absent."""
        if self.validity_mask is None:
            return np.ones(self.values.shape[:2], dtype=bool)
        return self.validity_mask

    def validate(self) -> None:
        """Check semantic range invariants on valid pixels.

        Raises
        ------
        SemanticsError
            If depth is not strictly positive or normals are not unit
            length within 1e-4.
        """
        m = self.mask_or_full()
        if not m.any():
            return
        if self.semantics is Semantics.DEPTH:
            if not (self.values[m, 0] > 0.0).all():
                raise SemanticsError("depth map has non-positive valid pixels")
        elif self.semantics is Semantics.NORMAL:
            norms = np.linalg.norm(self.values[m], axis=-1)
            err = np.abs(norms - 1.0).max()
            if err > 1e-4:
                raise SemanticsError(
                    f"normal map valid pixels deviate from unit length by {err:.3g}"
                )


@dataclass(frozen=True)
class JitterFactors:
    """Concrete photometric factors realized for one crop.

    ``brightness``, ``contrast`` and ``saturation`` are multiplicative
    factors (1.0 = identity); ``hue`` is a fractional hue rotation in
    [-0.5, 0.5] turns (0.0 = identity).
    """

    brightness: float = 1.0
    contrast: float = 1.0
    saturation: float = 1.0
    hue: float = 0.0


@dataclass(frozen=True)
class ColorJitterParams:
    """Photometric jitter strengths, torchvision-style.

    A strength ``s`` for brightness/contrast/saturation draws the factor
    uniformly from ``[max(0, 1 - s), 1 + s]``; ``hue`` draws the shift from
    ``[-hue, hue]``.  All-zero strengths always realize the identity.
    """

    brightness: float = 0.4
    contrast: float = 0.4
    saturation: float = 0.4
    hue: float = 0.1

    def __post_init__(self) -> None:
        for name in ("brightness", "contrast", "saturation"):
            v = getattr(self, name)
            if v < 0:
                raise ConstraintError(f"jitter strength {name} must be >= 0, got {v}")
        if not 0.0 <= self.hue <= 0.5:
            raise ConstraintError(f"hue strength must be in [0, 0.5], got {self.hue}")

    @property
    def is_identity(self) -> bool:
        return self.brightness == self.contrast == self.saturation == 0.0 and self.hue == 0.0


@dataclass(frozen=True)
class CropTransform:
    """A continuous crop window plus target resolution.

    ``(y0, x0)`` is the window origin in source pixel units (may be
    fractional or negative), ``(win_h, win_w)`` its continuous extent, and
    ``(out_h, out_w)`` the integer resolution it is resampled to.  ``src_h``
    and ``src_w`` optionally record the source frame the transform was
    sampled for, which lets ``compose`` check frame compatibility.
    ``jitter`` carries the input-only photometric part; the geometric
    operators ignore it.
    """

    y0: float
    x0: float
    win_h: float
    win_w: float
    out_h: int
    out_w: int
    src_h: int | None = None
    src_w: int | None = None
    jitter: JitterFactors | None = None

    def __post_init__(self) -> None:
        if self.win_h <= 0 or self.win_w <= 0:
            raise ConstraintError(
                f"window extent must be positive, got {self.win_h} x {self.win_w}"
            )
        if self.out_h < 1 or self.out_w < 1:
            raise ConstraintError(
                f"output resolution must be >= 1, got {self.out_h} x {self.out_w}"
            )

    @property
    def scale_y(self) -> float:
        """Source units per output pixel along y."""
        return self.win_h / self.out_h

    @property
    def scale_x(self) -> float:
        return self.win_w / self.out_w

    def source_coords(self) -> tuple[NDArray[np.float64], NDArray[np.float64]]:
        """Continuous source coordinates of the output pixel centers.

        Returns ``(ys, xs)`` with shapes ``(out_h,)`` and ``(out_w,)``.
        """
        ys = self.y0 + (np.arange(self.out_h) + 0.5) * self.scale_y - 0.5
        xs = self.x0 + (np.arange(self.out_w) + 0.5) * self.scale_x - 0.5
        return ys, xs

    def is_integer_translation(self, src_h: int, src_w: int) -> bool:
        """True if this is a unit-scale, integer-offset, full-frame window."""
        return (
            self.out_h == src_h
            and self.out_w == src_w
            and self.win_h == src_h
            and self.win_w == src_w
            and float(self.y0).is_integer()
            and float(self.x0).is_integer()
        )


@dataclass
class SplatResult:
    """Output of :func:`inverse_splat`.

    ``accum`` holds window-weighted value mass per source pixel and
    ``weights`` the corresponding window mass, both in the source frame.
    Dividing ``accum`` by ``weights`` (where above ``WEIGHT_EPS``) yields
    the splatted crop expressed in source coordinates.
    """

    accum: FloatMap
    weights: NDArray[np.float64]


def identity_transform(h: int, w: int) -> CropTransform:
    """The identity crop for an ``h x w`` source."""
    return CropTransform(
        y0=0.0, x0=0.0, win_h=float(h), win_w=float(w),
        out_h=h, out_w=w, src_h=h, src_w=w,
    )


# ---------------------------------------------------------------------------
# Resampling

def _axis_taps(
    coords: NDArray[np.float64], size: int, boundary: str
) -> tuple[NDArray[np.intp], NDArray[np.intp], NDArray[np.float64], NDArray[np.float64]]:
    """Bilinear tap indices and weights along one axis.

    Out-of-bounds taps get zero weight under ``boundary="zero"`` (their
    index is clipped only for addressing safety) and wrap under
    ``boundary="wrap"``.
    """
    lo = np.floor(coords)
    frac = coords - lo
    lo_i = lo.astype(np.intp)
    hi_i = lo_i + 1
    w_lo = 1.0 - frac
    w_hi = frac
    if boundary == "zero":
        w_lo = np.where((lo_i >= 0) & (lo_i < size), w_lo, 0.0)
        w_hi = np.where((hi_i >= 0) & (hi_i < size), w_hi, 0.0)
        lo_i = np.clip(lo_i, 0, size - 1)
        hi_i = np.clip(hi_i, 0, size - 1)
    elif boundary == "wrap":
        lo_i = lo_i % size
        hi_i = hi_i % size
    else:
        raise ConstraintError(f"unknown boundary mode {boundary!r}")
    return lo_i, hi_i, w_lo, w_hi


def _gather(
    array: FloatMap,
    t: CropTransform,
    boundary: str,
) -> FloatMap:
    """Separable bilinear gather of ``array`` at the crop's sample grid."""
    ys, xs = t.source_coords()
    y_lo, y_hi, wy_lo, wy_hi = _axis_taps(ys, array.shape[0], boundary)
    x_lo, x_hi, wx_lo, wx_hi = _axis_taps(xs, array.shape[1], boundary)
    # Interpolate rows first, then columns.
    rows = (
        array[y_lo] * wy_lo[:, None, None]
        + array[y_hi] * wy_hi[:, None, None]
    )
    out = (
        rows[:, x_lo] * wx_lo[None, :, None]
        + rows[:, x_hi] * wx_hi[None, :, None]
    )
    return out


def apply(t: CropTransform, src: DenseMap, boundary: str = "zero") -> DenseMap:
    """Crop-and-resize ``src`` through ``t``.

    Linear in ``src.values``.  The returned validity mask marks pixels whose
    bilinear support was in bounds and (when ``src`` carries a mask) read
    only valid source pixels.  An identity transform reproduces ``src``
    bit for bit.
    """
    out_vals = _gather(src.values, t, boundary)
    if boundary == "wrap":
        if src.validity_mask is None:
            mask = None
        else:
            mass = _gather(src.validity_mask.astype(np.float64)[..., None], t, boundary)
            mask = mass[..., 0] >= _MASK_FULL
    else:
        ys, xs = t.source_coords()
        in_y = (ys >= 0.0) & (ys <= src.height - 1.0)
        in_x = (xs >= 0.0) & (xs <= src.width - 1.0)
        mask = in_y[:, None] & in_x[None, :]
        if src.validity_mask is not None:
            mass = _gather(src.validity_mask.astype(np.float64)[..., None], t, boundary)
            mask &= mass[..., 0] >= _MASK_FULL
    return DenseMap(values=out_vals, semantics=src.semantics, validity_mask=mask)


def inverse_splat(
    t: CropTransform,
    crop: DenseMap,
    src_h: int,
    src_w: int,
    window: NDArray[np.float64] | None = None,
    boundary: str = "zero",
) -> SplatResult:
    """Scatter a crop back into the source frame.

    Uses the exact transpose of the :func:`apply` gather: with a unit
    window and no crop mask, ``<apply(t, a), b> == <a, inverse_splat(t, b).accum>``
    for all ``a``, ``b``.  ``window`` (shape ``(out_h, out_w)``) weights
    each crop pixel's contribution; the crop's validity mask, if any, is
    folded into the window so fabricated pixels contribute nothing.
    """
    if crop.height != t.out_h or crop.width != t.out_w:
        raise DimensionError(
            f"crop shape {crop.values.shape[:2]} does not match transform output "
            f"{(t.out_h, t.out_w)}"
        )
    if window is None:
        win = np.ones((t.out_h, t.out_w))
    else:
        window = np.asarray(window, dtype=np.float64)
        if window.shape != (t.out_h, t.out_w):
            raise DimensionError(
                f"window shape {window.shape} does not match transform output "
                f"{(t.out_h, t.out_w)}"
            )
        win = window
    if crop.validity_mask is not None:
        win = win * crop.validity_mask

    ys, xs = t.source_coords()
    y_lo, y_hi, wy_lo, wy_hi = _axis_taps(ys, src_h, boundary)
    x_lo, x_hi, wx_lo, wx_hi = _axis_taps(xs, src_w, boundary)

    c = crop.values.shape[2]
    weighted = crop.values * win[..., None]
    n_px = t.out_h * t.out_w
    accum = np.zeros(src_h * src_w * c)
    weights = np.zeros(src_h * src_w)
    for yi, wy in ((y_lo, wy_lo), (y_hi, wy_hi)):
        for xi, wx in ((x_lo, wx_lo), (x_hi, wx_hi)):
            w2 = wy[:, None] * wx[None, :]
            flat_px = (yi[:, None] * src_w + xi[None, :]).reshape(n_px)
            weights += np.bincount(
                flat_px, weights=(w2 * win).reshape(n_px), minlength=src_h * src_w
            )
            wv = (w2[..., None] * weighted).reshape(n_px, c)
            flat_ch = flat_px[:, None] * c + np.arange(c)[None, :]
            accum += np.bincount(
                flat_ch.reshape(-1), weights=wv.reshape(-1), minlength=src_h * src_w * c
            )
    return SplatResult(
        accum=accum.reshape(src_h, src_w, c),
        weights=weights.reshape(src_h, src_w),
    )


def compose(outer: CropTransform, inner: CropTransform) -> CropTransform:
    """The single transform equivalent to applying ``inner`` then ``outer``.

    ``outer`` reads from ``inner``'s output frame, so
    ``apply(compose(outer, inner), x) == apply(outer, apply(inner, x))`` up
    to one extra resampling.  Frames are checked when ``outer`` records the
    source it was sampled for.
    """
    if outer.src_h is not None and outer.src_h != inner.out_h:
        raise DimensionError(
            f"outer transform expects source height {outer.src_h}, "
            f"inner produces {inner.out_h}"
        )
    if outer.src_w is not None and outer.src_w != inner.out_w:
        raise DimensionError(
            f"outer transform expects source width {outer.src_w}, "
            f"inner produces {inner.out_w}"
        )
    sy, sx = inner.scale_y, inner.scale_x
    return CropTransform(
        y0=inner.y0 + outer.y0 * sy,
        x0=inner.x0 + outer.x0 * sx,
        win_h=outer.win_h * sy,
        win_w=outer.win_w * sx,
        out_h=outer.out_h,
        out_w=outer.out_w,
        src_h=inner.src_h,
        src_w=inner.src_w,
        jitter=outer.jitter,
    )


def scale_transform(t: CropTransform, factor: float) -> CropTransform:
    """Rescale a transform to a coarser or finer pixel grid.

    Used when splatting feature maps whose resolution is ``factor`` times
    the frame the transform was sampled in (both window and output dims
    scale; ``factor * out`` must stay integral).
    """
    oh = t.out_h * factor
    ow = t.out_w * factor
    if abs(oh - round(oh)) > 1e-9 or abs(ow - round(ow)) > 1e-9:
        raise DimensionError(
            f"scaled output {oh} x {ow} is not integral (factor {factor})"
        )
    return CropTransform(
        y0=t.y0 * factor,
        x0=t.x0 * factor,
        win_h=t.win_h * factor,
        win_w=t.win_w * factor,
        out_h=int(round(oh)),
        out_w=int(round(ow)),
        src_h=None if t.src_h is None else int(round(t.src_h * factor)),
        src_w=None if t.src_w is None else int(round(t.src_w * factor)),
    )


# ---------------------------------------------------------------------------
# Transform sampling

@dataclass(frozen=True)
class CropSampler:
    """Distribution over crop transforms.

    Windows are drawn by area fraction (``scale_lo..scale_hi`` of the
    source area) and aspect ratio (``win_w / win_h``), both uniform, then
    positioned uniformly over all placements whose out-of-bounds excursion
    stays within the padding allowance ``pad_frac * min(win_h, win_w)``.
    ``pad_mode`` selects whether that allowance caps each side separately
    (``"per_side"``, default) or the two sides of an axis jointly
    (``"total"``).  Draws that cannot be placed are rejected and retried;
    after ``max_tries`` failures sampling raises ``ConstraintError`` naming
    the failing bound.
    """

    out_h: int = 64
    out_w: int = 64
    scale_lo: float = 0.4
    scale_hi: float = 1.0
    aspect_lo: float = 0.75
    aspect_hi: float = 4.0 / 3.0
    pad_frac: float = 0.2
    pad_mode: str = "per_side"
    jitter: ColorJitterParams = field(default_factory=ColorJitterParams)
    seed: int = 0
    max_tries: int = 100

    def __post_init__(self) -> None:
        if not 0.0 < self.scale_lo <= self.scale_hi:
            raise ConstraintError(
                f"scale range [{self.scale_lo}, {self.scale_hi}] must be positive and ordered"
            )
        if not 0.0 < self.aspect_lo <= self.aspect_hi:
            raise ConstraintError(
                f"aspect range [{self.aspect_lo}, {self.aspect_hi}] must be positive and ordered"
            )
        if self.pad_frac < 0.0:
            raise ConstraintError(f"pad_frac must be >= 0, got {self.pad_frac}")
        if self.pad_mode not in ("per_side", "total"):
            raise ConstraintError(f"pad_mode must be per_side or total, got {self.pad_mode!r}")

    def rng(self) -> np.random.Generator:
        return np.random.default_rng(self.seed)


def _placement_range(extent: float, src: int, pad: float, mode: str) -> tuple[float, float]:
    """Feasible origin range for one axis, or an empty range."""
    if mode == "per_side":
        return -pad, src - extent + pad
    # mode == "total": the summed excursion of both sides is capped by pad.
    # A window wider than the source already pays extent - src of budget.
    base = max(0.0, extent - src)
    slack = pad - base
    if slack < 0.0:
        return 0.0, -1.0
    lo = min(src - extent, 0.0) - slack
    hi = max(src - extent, 0.0) + slack
    return lo, hi


def sample_transform(
    sampler: CropSampler,
    src_h: int,
    src_w: int,
    rng: np.random.Generator,
) -> CropTransform:
    """Draw one crop transform for an ``src_h x src_w`` source.

    Identical generator state yields an identical transform.  Photometric
    factors are realized here and attached to the transform so the draw
    fully determines the augmented crop.
    """
    if src_h < 1 or src_w < 1:
        raise DimensionError(f"source dims must be positive, got {src_h} x {src_w}")
    area_src = float(src_h * src_w)
    last_reason = "no draw attempted"
    for _ in range(sampler.max_tries):
        frac = rng.uniform(sampler.scale_lo, sampler.scale_hi)
        aspect = rng.uniform(sampler.aspect_lo, sampler.aspect_hi)
        area = frac * area_src
        win_w = math.sqrt(area * aspect)
        win_h = math.sqrt(area / aspect)
        pad = sampler.pad_frac * min(win_h, win_w)
        y_lo, y_hi = _placement_range(win_h, src_h, pad, sampler.pad_mode)
        x_lo, x_hi = _placement_range(win_w, src_w, pad, sampler.pad_mode)
        if y_lo > y_hi:
            last_reason = (
                f"window height {win_h:.2f} cannot be placed in source height "
                f"{src_h} with padding allowance {pad:.2f}"
            )
            continue
        if x_lo > x_hi:
            last_reason = (
                f"window width {win_w:.2f} cannot be placed in source width "
                f"{src_w} with padding allowance {pad:.2f}"
            )
            continue
        y0 = rng.uniform(y_lo, y_hi)
        x0 = rng.uniform(x_lo, x_hi)
        jitter = None
        if not sampler.jitter.is_identity:
            jitter = sample_jitter(sampler.jitter, rng)
        return CropTransform(
            y0=y0, x0=x0, win_h=win_h, win_w=win_w,
            out_h=sampler.out_h, out_w=sampler.out_w,
            src_h=src_h, src_w=src_w, jitter=jitter,
        )
    raise ConstraintError(
        f"no feasible window after {sampler.max_tries} draws; last failure: {last_reason}"
    )


# ---------------------------------------------------------------------------
# Boundary window

def cosine_window(out_h: int, out_w: int, margin_frac: float = 0.1) -> DenseMap:
    """Separable boundary down-weighting window.

    Per axis the profile is 1 in the interior and follows a half-period
    cosine ramp ``0.5 * (1 - cos(pi * d / m))`` over the margin band, where
    ``d`` is the pixel-center distance to the frame edge and ``m`` the
    margin width ``margin_frac * extent`` in pixels.  The 2-D window is the
    product of the two axis profiles; values stay strictly positive because
    pixel centers sit half a pixel inside the frame.
    """
    if not 0.0 <= margin_frac <= 0.5:
        raise ConstraintError(f"margin_frac must be in [0, 0.5], got {margin_frac}")

    def profile(n: int) -> NDArray[np.float64]:
        d = np.minimum(np.arange(n) + 0.5, n - 0.5 - np.arange(n))
        m = margin_frac * n
        if m <= 0.0:
            return np.ones(n)
        ramp = 0.5 * (1.0 - np.cos(np.pi * np.minimum(d, m) / m))
        return ramp

    w = profile(out_h)[:, None] * profile(out_w)[None, :]
    return DenseMap(values=w[..., None], semantics=Semantics.WEIGHT)


# ---------------------------------------------------------------------------
# Photometric jitter

_LUMA = np.array([0.299, 0.587, 0.114])

# RGB <-> YIQ change of basis used for hue rotation.
_RGB_TO_YIQ = np.array(
    [
        [0.299, 0.587, 0.114],
        [0.595716, -0.274453, -0.321263],
        [0.211456, -0.522591, 0.311135],
    ]
)
_YIQ_TO_RGB = np.linalg.inv(_RGB_TO_YIQ)


def sample_jitter(params: ColorJitterParams, rng: np.random.Generator) -> JitterFactors:
    """Realize concrete factors from jitter strengths."""
    return JitterFactors(
        brightness=rng.uniform(max(0.0, 1.0 - params.brightness), 1.0 + params.brightness),
        contrast=rng.uniform(max(0.0, 1.0 - params.contrast), 1.0 + params.contrast),
        saturation=rng.uniform(max(0.0, 1.0 - params.saturation), 1.0 + params.saturation),
        hue=rng.uniform(-params.hue, params.hue),
    )


def jitter_apply(img: DenseMap, factors: JitterFactors) -> DenseMap:
    """Apply realized photometric factors to an RGB map.

    Fixed order: brightness, contrast (about the per-image mean luma),
    saturation (toward per-pixel luma), hue (rotation in the YIQ chroma
    plane).  The result is clamped to [0, 1] once at the end.  Steps whose
    factor is the identity are skipped, so identity factors return the
    input values untouched.
    """
    if img.semantics is not Semantics.RGB:
        raise SemanticsError(f"color jitter needs rgb, got {img.semantics.value}")
    x = img.values
    touched = False
    if factors.brightness != 1.0:
        x = x * factors.brightness
        touched = True
    if factors.contrast != 1.0:
        mean_luma = float((x @ _LUMA).mean())
        x = (x - mean_luma) * factors.contrast + mean_luma
        touched = True
    if factors.saturation != 1.0:
        luma = x @ _LUMA
        x = (x - luma[..., None]) * factors.saturation + luma[..., None]
        touched = True
    if factors.hue != 0.0:
        theta = 2.0 * np.pi * factors.hue
        cos_t, sin_t = np.cos(theta), np.sin(theta)
        rot = np.array(
            [[1.0, 0.0, 0.0], [0.0, cos_t, -sin_t], [0.0, sin_t, cos_t]]
        )
        m = _YIQ_TO_RGB @ rot @ _RGB_TO_YIQ
        x = x @ m.T
        touched = True
    if touched:
        x = np.clip(x, 0.0, 1.0)
    return DenseMap(values=x, semantics=Semantics.RGB, validity_mask=img.validity_mask)


def color_jitter(
    img: DenseMap, params: ColorJitterParams, rng: np.random.Generator
) -> DenseMap:
    """Draw factors from ``params`` and apply them to ``img``."""
    return jitter_apply(img, sample_jitter(params, rng))
