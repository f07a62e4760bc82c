"""Equivariant averaging and the normalized self-consistency loss.

A predictor ``f`` is equivariant under crop-and-resize when predicting a
crop equals cropping the prediction.  Averaging ``t^-1 o f o t`` over
sampled transforms projects any predictor onto an equivariant one; the
self-consistency loss penalizes the spread of the per-crop predictions
around that average, normalized by the squared magnitude of the average so
rescaling the predictor does not change the loss.

The average and the normalizer are treated as constants when
differentiating ("gradient-stopped"): gradients flow only through the raw
per-crop predictions and the optional linear comparison head.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from numpy.typing import NDArray

from .errors import (
    DegenerateCoverageError,
    DimensionError,
    EmptySampleError,
    GroupClosureError,
)
from .geometry import (
    WEIGHT_EPS,
    CropSampler,
    CropTransform,
    DenseMap,
    Semantics,
    apply,
    cosine_window,
    identity_transform,
    inverse_splat,
    sample_transform,
)

__all__ = [
    "PredictorFn",
    "EquivariantAverage",
    "EqLossResult",
    "TotalLoss",
    "LinearPredictorHead",
    "equivariant_average",
    "exact_average_discrete",
    "equivariant_loss",
    "total_loss",
    "predict_tta",
]

# A predictor maps a cropped input to a dense output over the same frame.
# The transform that produced the crop is passed along so oracle predictors
# used in audits can look up ground truth; trained networks ignore it.
PredictorFn = Callable[[DenseMap, CropTransform], DenseMap]

Z_FLOOR = 1e-8


@dataclass
class EquivariantAverage:
    """Splat-accumulated average of per-crop predictions in the source frame.

    ``mean`` carries a validity mask that is true where the accumulated
    window mass exceeds ``WEIGHT_EPS``; ``weights`` is that mass.
    """

    mean: DenseMap
    weights: NDArray[np.float64]

    @property
    def coverage(self) -> float:
        """Fraction of source pixels with any splat support."""
        return float(self.mean.mask_or_full().mean())


def _resolve_windows(
    window: DenseMap | NDArray[np.float64] | Sequence | None,
    transforms: Sequence[CropTransform],
) -> list[NDArray[np.float64] | None]:
    """Normalize the window argument to one array (or None) per crop."""
    if window is None:
        return [None] * len(transforms)
    if isinstance(window, (list, tuple)):
        if len(window) != len(transforms):
            raise DimensionError(
                f"{len(window)} windows for {len(transforms)} transforms"
            )
        return [_resolve_windows(w, [t])[0] for w, t in zip(window, transforms)]
    if isinstance(window, DenseMap):
        arr = window.values[..., 0]
    else:
        arr = np.asarray(window, dtype=np.float64)
    return [arr] * len(transforms)


def equivariant_average(
    crop_outputs: Sequence[DenseMap],
    transforms: Sequence[CropTransform],
    src_h: int,
    src_w: int,
    window: DenseMap | NDArray[np.float64] | Sequence | None = None,
    boundary: str = "zero",
) -> EquivariantAverage:
    """Average per-crop predictions back in the source frame.

    Each prediction is splatted through the adjoint of its crop's gather,
    weighted by ``window`` (and its own validity mask), and the weighted
    contributions are normalized per pixel by the accumulated window mass.
    Pixels with mass below ``WEIGHT_EPS`` are marked invalid.
    """
    if len(crop_outputs) == 0:
        raise EmptySampleError("equivariant_average needs at least one crop")
    if len(crop_outputs) != len(transforms):
        raise DimensionError(
            f"{len(crop_outputs)} outputs for {len(transforms)} transforms"
        )
    channels = crop_outputs[0].shape[2]
    for out in crop_outputs[1:]:
        if out.shape[2] != channels:
            raise DimensionError("crop outputs disagree on channel count")
    windows = _resolve_windows(window, transforms)
    accum = np.zeros((src_h, src_w, channels))
    weights = np.zeros((src_h, src_w))
    for out, t, win in zip(crop_outputs, transforms, windows):
        res = inverse_splat(t, out, src_h, src_w, window=win, boundary=boundary)
        accum += res.accum
        weights += res.weights
    covered = weights > WEIGHT_EPS
    if not covered.any():
        raise DegenerateCoverageError(
            "no source pixel received splat weight above threshold"
        )
    mean = np.zeros_like(accum)
    np.divide(accum, weights[..., None], out=mean, where=covered[..., None])
    mean_map = DenseMap(
        values=mean, semantics=crop_outputs[0].semantics, validity_mask=covered
    )
    return EquivariantAverage(mean=mean_map, weights=weights)


# ---------------------------------------------------------------------------
# Exact finite-group oracle


def _translation_offsets(
    group: Sequence[CropTransform], src_h: int, src_w: int
) -> list[tuple[int, int]]:
    offsets = []
    for t in group:
        if not t.is_integer_translation(src_h, src_w):
            raise GroupClosureError(
                "exact averaging supports only full-frame integer translations, "
                f"got window ({t.y0}, {t.x0}, {t.win_h}, {t.win_w}) -> "
                f"{t.out_h} x {t.out_w}"
            )
        offsets.append((int(t.y0), int(t.x0)))
    return offsets


def _check_closure(
    offsets: list[tuple[int, int]], src_h: int, src_w: int, boundary: str
) -> None:
    """Verify the translation set is closed under composition and inverse.

    With wrap boundaries offsets compose modulo the frame.  With zero
    boundaries a composed translation that retains no overlap with the
    frame acts as the empty map and does not need a representative.
    """
    if boundary == "wrap":
        canon = {(dy % src_h, dx % src_w) for dy, dx in offsets}
        if (0, 0) not in canon:
            raise GroupClosureError("translation group must contain the identity")
        for a in canon:
            if ((-a[0]) % src_h, (-a[1]) % src_w) not in canon:
                raise GroupClosureError(f"inverse of offset {a} missing from group")
            for b in canon:
                c = ((a[0] + b[0]) % src_h, (a[1] + b[1]) % src_w)
                if c not in canon:
                    raise GroupClosureError(
                        f"composition of offsets {a} and {b} -> {c} missing from group"
                    )
    else:
        canon = set(offsets)
        if (0, 0) not in canon:
            raise GroupClosureError("translation set must contain the identity")
        for a in canon:
            if (-a[0], -a[1]) not in canon:
                raise GroupClosureError(f"inverse of offset {a} missing from set")
            for b in canon:
                c = (a[0] + b[0], a[1] + b[1])
                if abs(c[0]) >= src_h or abs(c[1]) >= src_w:
                    continue  # acts as the empty map on the frame
                if c not in canon:
                    raise GroupClosureError(
                        f"composition of offsets {a} and {b} -> {c} missing from set"
                    )


def exact_average_discrete(
    f: PredictorFn,
    x: DenseMap,
    group: Sequence[CropTransform],
    boundary: str = "wrap",
) -> DenseMap:
    """Average ``t^-1 o f o t`` exactly over a finite translation group.

    ``group`` must be a set of full-frame integer translations closed under
    composition and inverse (checked pairwise).  With ``boundary="wrap"``
    translations act cyclically, every pixel is valid, and the result
    commutes with every group element for arbitrary ``f``.  With
    ``boundary="zero"`` the average is mask-aware: each pixel averages the
    transforms whose round trip kept it in frame.
    """
    if len(group) == 0:
        raise EmptySampleError("group must be non-empty")
    offsets = _translation_offsets(group, x.height, x.width)
    _check_closure(offsets, x.height, x.width, boundary)
    outputs = []
    for t in group:
        cropped = apply(t, x, boundary=boundary)
        out = f(cropped, t)
        if out.values.shape[:2] != (x.height, x.width):
            raise DimensionError(
                f"predictor returned {out.values.shape[:2]}, expected frame "
                f"{(x.height, x.width)}"
            )
        outputs.append(out)
    avg = equivariant_average(
        outputs, list(group), x.height, x.width, window=None, boundary=boundary
    )
    return avg.mean


# ---------------------------------------------------------------------------
# Self-consistency loss


class LinearPredictorHead:
    """Per-pixel linear comparison head, identity-initialized, no bias.

    Maps each pixel's channel vector through a trainable ``c x c`` matrix
    before comparing against the gradient-stopped average, so the raw
    predictions are not forced to match the average verbatim.
    """

    def __init__(self, channels: int):
        if channels < 1:
            raise DimensionError(f"head needs >= 1 channel, got {channels}")
        self.weight = np.eye(channels)

    @property
    def channels(self) -> int:
        return self.weight.shape[0]

    def __call__(self, values: NDArray[np.float64]) -> NDArray[np.float64]:
        return values @ self.weight.T

    def backward(
        self, values: NDArray[np.float64], grad_out: NDArray[np.float64]
    ) -> tuple[NDArray[np.float64], NDArray[np.float64]]:
        """Gradients of a scalar loss through the head.

        Returns ``(grad_values, grad_weight)`` for output gradient
        ``grad_out`` at input ``values``.
        """
        grad_values = grad_out @ self.weight
        flat_v = values.reshape(-1, self.channels)
        flat_g = grad_out.reshape(-1, self.channels)
        grad_weight = flat_g.T @ flat_v
        return grad_values, grad_weight


@dataclass
class EqLossResult:
    """Value and gradients of the normalized self-consistency loss.

    ``per_crop`` holds raw masked sum-of-squares residuals;
    ``value = mean(per_crop) / Z`` with ``Z`` the masked sum of squares of
    the average (floored at ``Z_FLOOR``; ``z_clamped`` records whether the
    floor engaged).  Gradients treat the average and ``Z`` as constants and
    flow only to the crop outputs and the head.
    """

    value: float
    per_crop: list[float]
    Z: float
    grad_wrt_crop_outputs: list[NDArray[np.float64]]
    grad_wrt_head: NDArray[np.float64] | None
    z_clamped: bool


def equivariant_loss(
    crop_outputs: Sequence[DenseMap],
    transforms: Sequence[CropTransform],
    avg: EquivariantAverage,
    head: LinearPredictorHead | None = None,
    z_floor: float = Z_FLOOR,
) -> EqLossResult:
    """Normalized spread of per-crop predictions around their average.

    For each crop the gradient-stopped average is resampled into the crop
    frame and compared (through ``head`` when given) on the joint validity
    mask.  Scaling all crop outputs (and the average recomputed from them)
    by ``alpha`` leaves the value unchanged.
    """
    k = len(crop_outputs)
    if k == 0:
        raise EmptySampleError("equivariant_loss needs at least one crop")
    if k != len(transforms):
        raise DimensionError(f"{k} outputs for {len(transforms)} transforms")
    channels = crop_outputs[0].shape[2]
    if head is not None and head.channels != channels:
        raise DimensionError(
            f"head has {head.channels} channels, outputs have {channels}"
        )
    mean = avg.mean
    mean_mask = mean.mask_or_full()
    z_raw = float((mean.values[mean_mask] ** 2).sum())
    z_clamped = z_raw < z_floor
    z = max(z_raw, z_floor)

    per_crop: list[float] = []
    grads: list[NDArray[np.float64]] = []
    grad_head = np.zeros_like(head.weight) if head is not None else None
    for out, t in zip(crop_outputs, transforms):
        target = apply(t, mean)
        joint = target.mask_or_full() & out.mask_or_full()
        headed = head(out.values) if head is not None else out.values
        resid = (headed - target.values) * joint[..., None]
        per_crop.append(float((resid**2).sum()))
        grad_headed = (2.0 / (z * k)) * resid
        if head is not None:
            grad_vals, gw = head.backward(out.values, grad_headed)
            grads.append(grad_vals)
            grad_head += gw
        else:
            grads.append(grad_headed)
    value = float(np.sum(per_crop) / (k * z))
    return EqLossResult(
        value=value,
        per_crop=per_crop,
        Z=z,
        grad_wrt_crop_outputs=grads,
        grad_wrt_head=grad_head,
        z_clamped=z_clamped,
    )


@dataclass
class TotalLoss:
    """Task loss plus weighted self-consistency penalty."""

    value: float
    grad_wrt_crop_outputs: list[NDArray[np.float64]]
    task_value: float
    eq_value: float


def total_loss(
    task_value: float,
    task_grads: Sequence[NDArray[np.float64]],
    eq: EqLossResult | None,
    lam: float,
) -> TotalLoss:
    """Combine a task loss with the self-consistency penalty.

    ``lam == 0`` (or ``eq is None``) reproduces the task loss and its
    gradients exactly, bit for bit.
    """
    if lam < 0:
        raise DimensionError(f"penalty weight must be >= 0, got {lam}")
    if eq is None or lam == 0.0:
        return TotalLoss(
            value=float(task_value),
            grad_wrt_crop_outputs=list(task_grads),
            task_value=float(task_value),
            eq_value=0.0 if eq is None else eq.value,
        )
    if len(task_grads) != len(eq.grad_wrt_crop_outputs):
        raise DimensionError(
            f"{len(task_grads)} task gradients vs "
            f"{len(eq.grad_wrt_crop_outputs)} penalty gradients"
        )
    grads = [
        tg + lam * eg for tg, eg in zip(task_grads, eq.grad_wrt_crop_outputs)
    ]
    return TotalLoss(
        value=float(task_value + lam * eq.value),
        grad_wrt_crop_outputs=grads,
        task_value=float(task_value),
        eq_value=eq.value,
    )


# ---------------------------------------------------------------------------
# Test-time averaging


def predict_tta(
    f: PredictorFn,
    x: DenseMap,
    sampler: CropSampler,
    k: int,
    rng: np.random.Generator | None = None,
    margin_frac: float = 0.1,
) -> DenseMap:
    """Single equivariantly averaged prediction in the source frame.

    Runs ``f`` on the identity crop plus ``k`` sampled crops and averages
    with a cosine boundary window.  The identity crop guarantees full
    coverage, so the result is valid everywhere.
    """
    if k < 0:
        raise EmptySampleError(f"crop count must be >= 0, got {k}")
    if rng is None:
        rng = sampler.rng()
    transforms = [identity_transform(x.height, x.width)]
    for _ in range(k):
        transforms.append(sample_transform(sampler, x.height, x.width, rng))
    outputs = []
    windows = []
    for t in transforms:
        outputs.append(f(apply(t, x), t))
        windows.append(cosine_window(t.out_h, t.out_w, margin_frac))
    avg = equivariant_average(
        outputs, transforms, x.height, x.width, window=windows
    )
    return avg.mean
