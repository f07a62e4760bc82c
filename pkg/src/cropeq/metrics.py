"""Evaluation metrics for dense depth, normal and edge predictions.

Depth metrics follow the usual monocular-depth protocol: predictions are
made in disparity (inverse depth) space, aligned to the reference by a
least-squares scale and offset, inverted back to depth with a small
floor, then scored with AbsRel and threshold accuracy.

The equivariance error between two crops of one image registers both
crop predictions back to the source frame (adjoint splatting with a
cosine window), aligns one to the other, and reports depth AbsRel over
the overlap. Its distribution over random crop pairs is the audit
statistic used to compare models.

The alignment direction is asymmetric: the first argument is always
aligned to the second. eqerr with swapped crops is therefore not
identical, only comparable (within a factor of about two on smooth
inputs, which the tests pin down).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import NamedTuple, Optional, Sequence, Union

import numpy as np

from .errors import (
    ConstraintError,
    EmptyMaskError,
    EmptySampleError,
    OverlapError,
    SemanticsError,
)
from .equivariance import PredictorFn, equivariant_average
from .geometry import (
    CropSampler,
    CropTransform,
    DenseMap,
    Semantics,
    apply,
    cosine_window,
    identity_transform,
    sample_transform,
)

DISPARITY_FLOOR = 1e-6
ANGULAR_THRESHOLD_DEG = 11.25

MapLike = Union[DenseMap, np.ndarray]


def _values_and_mask(m: MapLike, mask: Optional[np.ndarray]):
    if isinstance(m, DenseMap):
        vals, own = m.values, m.mask_or_full()
    else:
        vals = np.asarray(m, dtype=np.float64)
        if vals.ndim == 2:
            vals = vals[..., None]
        own = np.ones(vals.shape[:2], dtype=bool)
    if mask is not None:
        own = own & np.asarray(mask, dtype=bool)
    return vals, own


def _scalar_pair(pred: MapLike, gt: MapLike, mask: Optional[np.ndarray]):
    p, pm = _values_and_mask(pred, mask)
    g, gm = _values_and_mask(gt, None)
    if p.shape != g.shape:
        raise SemanticsError(f"shape mismatch {p.shape} vs {g.shape}")
    if p.shape[-1] != 1:
        raise SemanticsError("scalar metric expects single-channel maps")
    m = pm & gm
    if not m.any():
        raise EmptyMaskError("no valid pixels")
    return p[..., 0][m], g[..., 0][m], m


def absrel(pred: MapLike, gt: MapLike, mask: Optional[np.ndarray] = None) -> float:
    """Mean absolute relative depth error, |pred - gt| / gt over valid pixels."""
    p, g, _ = _scalar_pair(pred, gt, mask)
    if (g <= 0).any():
        raise SemanticsError("ground-truth depth must be positive")
    return float(np.mean(np.abs(p - g) / g))


def delta_gt(
    pred: MapLike,
    gt: MapLike,
    threshold: float = 1.25,
    mask: Optional[np.ndarray] = None,
) -> float:
    """Percentage of valid pixels with max(pred/gt, gt/pred) strictly above
    ``threshold``. Nonpositive predictions count as exceeding."""
    p, g, _ = _scalar_pair(pred, gt, mask)
    if (g <= 0).any():
        raise SemanticsError("ground-truth depth must be positive")
    ratio = np.full(p.shape, np.inf)
    pos = p > 0
    ratio[pos] = np.maximum(p[pos] / g[pos], g[pos] / p[pos])
    return float(100.0 * np.mean(ratio > threshold))


def l1_error(pred: MapLike, gt: MapLike, mask: Optional[np.ndarray] = None) -> float:
    """Mean absolute difference over valid pixels (and channels)."""
    p, pm = _values_and_mask(pred, mask)
    g, gm = _values_and_mask(gt, None)
    if p.shape != g.shape:
        raise SemanticsError(f"shape mismatch {p.shape} vs {g.shape}")
    m = pm & gm
    if not m.any():
        raise EmptyMaskError("no valid pixels")
    return float(np.mean(np.abs(p[m] - g[m])))


@dataclass(frozen=True)
class AngularStats:
    """Angular error aggregates in degrees over valid, nonzero normals."""

    mean_deg: float
    median_deg: float
    pct_below_threshold: float
    threshold_deg: float
    n_excluded_zero: int


def angular_error(
    pred: MapLike,
    gt: MapLike,
    mask: Optional[np.ndarray] = None,
    threshold_deg: float = ANGULAR_THRESHOLD_DEG,
) -> AngularStats:
    """Per-pixel angle between normal fields.

    Both fields are renormalized internally; pixels where either side has
    a (near) zero vector are excluded and counted.
    """
    p, pm = _values_and_mask(pred, mask)
    g, gm = _values_and_mask(gt, None)
    if p.shape != g.shape or p.shape[-1] != 3:
        raise SemanticsError("angular_error expects matching 3-channel maps")
    m = pm & gm
    pn = np.linalg.norm(p, axis=-1)
    gn = np.linalg.norm(g, axis=-1)
    nonzero = (pn > 1e-12) & (gn > 1e-12)
    n_excluded = int(np.count_nonzero(m & ~nonzero))
    m = m & nonzero
    if not m.any():
        raise EmptyMaskError("no valid pixels with nonzero normals")
    dot = np.sum(p * g, axis=-1) / (pn * gn + (~nonzero))
    ang = np.degrees(np.arccos(np.clip(dot[m], -1.0, 1.0)))
    return AngularStats(
        mean_deg=float(ang.mean()),
        median_deg=float(np.median(ang)),
        pct_below_threshold=float(100.0 * np.mean(ang < threshold_deg)),
        threshold_deg=threshold_deg,
        n_excluded_zero=n_excluded,
    )


@dataclass(frozen=True)
class AlignmentCoeffs:
    """Least-squares scale and offset mapping a prediction onto a reference."""

    scale: float
    offset: float
    degenerate: bool
    n_valid: int

    def apply_to(self, values: np.ndarray) -> np.ndarray:
        return self.scale * values + self.offset


def lsq_align(
    pred: MapLike, gt: MapLike, mask: Optional[np.ndarray] = None
) -> AlignmentCoeffs:
    """Closed-form (scale, offset) minimizing sum((s*pred + o - gt)^2).

    A constant prediction has no defined scale; the result is flagged
    degenerate and falls back to s=1 with a mean-difference offset.
    """
    p, g, m = _scalar_pair(pred, gt, mask)
    n = p.size
    p_mean, g_mean = p.mean(), g.mean()
    dp = p - p_mean
    var = float(np.dot(dp, dp))
    if var <= 1e-15 * max(1.0, float(np.dot(p, p))):
        return AlignmentCoeffs(
            scale=1.0, offset=float(g_mean - p_mean), degenerate=True, n_valid=n
        )
    s = float(np.dot(dp, g - g_mean) / var)
    o = float(g_mean - s * p_mean)
    return AlignmentCoeffs(scale=s, offset=o, degenerate=False, n_valid=n)


def disparity_to_depth(
    disp: np.ndarray, floor: float = DISPARITY_FLOOR
) -> np.ndarray:
    return 1.0 / np.maximum(disp, floor)


def aligned_depth(
    pred_disp: MapLike,
    gt_depth: MapLike,
    mask: Optional[np.ndarray] = None,
) -> DenseMap:
    """Predicted depth after least-squares alignment in disparity space.

    The prediction is aligned to the ground-truth disparity (inverse
    depth) and inverted with the standard floor. The returned map is
    valid where both inputs are.
    """
    p, pm = _values_and_mask(pred_disp, mask)
    g, gm = _values_and_mask(gt_depth, None)
    m = pm & gm
    gt_disp = 1.0 / np.maximum(g, DISPARITY_FLOOR)
    coeffs = lsq_align(p, gt_disp, mask=m)
    depth = disparity_to_depth(coeffs.apply_to(p))
    return DenseMap(depth, Semantics.DEPTH, validity_mask=m)


def aligned_depth_absrel(
    pred_disp: MapLike,
    gt_depth: MapLike,
    mask: Optional[np.ndarray] = None,
) -> float:
    """AbsRel in depth after aligning the predicted disparity to ground truth."""
    return absrel(aligned_depth(pred_disp, gt_depth, mask), gt_depth)


def _register_to_frame(
    f: PredictorFn,
    x: DenseMap,
    t: CropTransform,
    margin_frac: float,
    boundary: str,
) -> DenseMap:
    """Predict on a crop and splat the prediction back to the source frame."""
    crop = apply(t, x, boundary=boundary)
    out = f(crop, t)
    window = cosine_window(t.out_h, t.out_w, margin_frac)
    avg = equivariant_average(
        [out], [t], x.height, x.width, window=[window], boundary=boundary
    )
    return avg.mean


def eqerr_depth_map(
    f: PredictorFn,
    x: DenseMap,
    t1: CropTransform,
    t2: CropTransform,
    margin_frac: float = 0.1,
    boundary: str = "zero",
) -> DenseMap:
    """Per-pixel relative depth discrepancy between two registered crops.

    Both crop predictions are splatted back to the source frame; the
    first is least-squares aligned to the second in disparity space; both
    are inverted to depth. The map holds |d1 - d2| / d2 and is valid on
    the overlap of the two coverages.
    """
    r1 = _register_to_frame(f, x, t1, margin_frac, boundary)
    r2 = _register_to_frame(f, x, t2, margin_frac, boundary)
    overlap = r1.mask_or_full() & r2.mask_or_full()
    if not overlap.any():
        raise OverlapError("crop coverages do not intersect")
    coeffs = lsq_align(r1.values[..., 0][..., None], r2.values[..., 0][..., None],
                       mask=overlap)
    d1 = disparity_to_depth(coeffs.apply_to(r1.values[..., 0]))
    d2 = disparity_to_depth(r2.values[..., 0])
    rel = np.zeros_like(d1)
    rel[overlap] = np.abs(d1[overlap] - d2[overlap]) / d2[overlap]
    return DenseMap(rel[..., None], Semantics.FEATURE, validity_mask=overlap)


def eqerr_depth(
    f: PredictorFn,
    x: DenseMap,
    t1: CropTransform,
    t2: CropTransform,
    margin_frac: float = 0.1,
    boundary: str = "zero",
) -> float:
    """Mean of :func:`eqerr_depth_map` over the coverage overlap.

    Identical transforms give exactly zero for a deterministic predictor.
    """
    m = eqerr_depth_map(f, x, t1, t2, margin_frac, boundary)
    return float(np.mean(m.values[..., 0][m.mask_or_full()]))


@dataclass(frozen=True)
class EqErrStats:
    """Distribution summary of eqerr samples over random crop pairs."""

    n_pairs: int
    skipped: int
    mean: float
    median: float
    q1: float
    q3: float
    max_value: float
    samples: np.ndarray
    ref_absrel: Optional[float] = None


def eqerr_distribution(
    f: PredictorFn,
    x: DenseMap,
    sampler: CropSampler,
    n_pairs: int,
    seed: int = 0,
    gt_depth: Optional[DenseMap] = None,
    margin_frac: float = 0.1,
    boundary: str = "zero",
) -> EqErrStats:
    """eqerr over ``n_pairs`` independently sampled crop pairs.

    Pair ``i`` draws its transforms from a dedicated stream seeded by
    ``(seed, i)``, so results do not depend on evaluation order. Pairs
    whose coverages miss each other are skipped and counted. When
    ``gt_depth`` is given, the full-frame prediction is scored against it
    (aligned AbsRel) as a reference row.
    """
    if n_pairs < 1:
        raise ConstraintError("n_pairs must be >= 1")
    values = []
    skipped = 0
    for i in range(n_pairs):
        rng = np.random.default_rng(np.random.SeedSequence([seed, i]))
        t1 = sample_transform(sampler, x.height, x.width, rng)
        t2 = sample_transform(sampler, x.height, x.width, rng)
        try:
            values.append(eqerr_depth(f, x, t1, t2, margin_frac, boundary))
        except OverlapError:
            skipped += 1
    if not values:
        raise EmptySampleError("every crop pair was skipped")
    samples = np.asarray(values)
    ref = None
    if gt_depth is not None:
        pred = f(x, identity_transform(x.height, x.width))
        ref = aligned_depth_absrel(pred, gt_depth)
    return EqErrStats(
        n_pairs=len(values),
        skipped=skipped,
        mean=float(samples.mean()),
        median=float(np.median(samples)),
        q1=float(np.percentile(samples, 25)),
        q3=float(np.percentile(samples, 75)),
        max_value=float(samples.max()),
        samples=samples,
        ref_absrel=ref,
    )


class MetricRow(NamedTuple):
    run_id: str
    step: int
    metric_name: str
    value: float


METRICS_CSV_HEADER = ("run_id", "step", "metric_name", "value")


def write_metrics_csv(path, rows: Sequence[MetricRow]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(METRICS_CSV_HEADER)
        for row in rows:
            writer.writerow([row.run_id, row.step, row.metric_name,
                             repr(float(row.value))])


def read_metrics_csv(path) -> list[MetricRow]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = tuple(next(reader))
        if header != METRICS_CSV_HEADER:
            raise SemanticsError(f"unexpected metrics header {header}")
        return [
            MetricRow(r[0], int(r[1]), r[2], float(r[3])) for r in reader
        ]
