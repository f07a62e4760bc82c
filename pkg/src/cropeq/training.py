"""Training loops, AdamW with cosine annealing, run configuration.

Five regimes share one step loop:

* ``sup``: full-image L1 against ground truth; each image is replicated
  K times so the crop budget (and wall clock) matches the augmented
  runs.
* ``aug``: K random crops per image, L1 against the identically cropped
  ground truth.
* ``eqloss``: ``aug`` plus the consistency term: per image, the K crop
  predictions are averaged back in the source frame and each crop is
  penalized for deviating from the resampled average. The term can
  attach at the output or at an inner feature layer.
* ``semisup``: labeled batch gets L1 plus the consistency term, an
  unlabeled batch contributes the consistency term only.
* ``finetune`` (:func:`finetune_unsupervised`): a frozen teacher's
  full-frame predictions serve as crop targets (pseudo labels) next to
  the consistency term; the unlabeled loader opens RGB files only.

Training losses are L1 in task space (disparity for depth). The
consistency target and its normalizer are treated as constants during
backpropagation; only the direct residual path carries gradient.

With a zero consistency coefficient the ``eqloss`` step consumes the
same RNG draws and computes the same gradients as ``aug``, bitwise;
tests pin that equivalence.

Validation logs the task metric and a consistency score ("val_eqloss")
computed on a transform set frozen at startup, so values are comparable
across steps and between runs that share a seed.
"""

from __future__ import annotations

import math
import typing
from dataclasses import dataclass, field, fields, is_dataclass, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .data import DatasetManifest, load_rgb_only, load_scene_maps
from .equivariance import equivariant_average, equivariant_loss
from .errors import ConfigError, DivergenceError
from .geometry import (
    ColorJitterParams,
    CropSampler,
    CropTransform,
    DenseMap,
    Semantics,
    apply,
    identity_transform,
    jitter_apply,
    sample_transform,
    scale_transform,
)
from .metrics import (
    MetricRow,
    aligned_depth_absrel,
    angular_error,
    l1_error,
    write_metrics_csv,
)
from .model import (
    PredictorNet,
    PredictorNetConfig,
    load_checkpoint,
    save_checkpoint,
)

MODES = ("sup", "aug", "eqloss", "semisup", "finetune")
TASKS = ("depth", "normal", "edge")

# task -> (ground-truth map kind, head channels, head activation, semantics)
_TASK_SETTINGS = {
    "depth": ("disparity", 1, "softplus", "disparity"),
    "normal": ("normal", 3, "linear", "normal"),
    "edge": ("edge", 1, "sigmoid", "edge"),
}

_VAL_STREAM = 1
_VAL_PROTOCOL_SEED = 20_240_817


@dataclass(frozen=True)
class TrainConfig:
    """Everything a training run needs besides the dataset paths."""

    mode: str = "aug"
    task: str = "depth"
    k_crops: int = 3
    lam: float = 1e-4
    lam_unlabeled: Optional[float] = None
    lam_warmup_steps: int = 0
    loss_layer: str = "L"
    lr_start: float = 1e-3
    lr_end: float = 0.0
    weight_decay: float = 1e-4
    batch_images: int = 2
    steps: int = 2000
    seed: int = 0
    val_every: int = 100
    val_images: int = 8
    val_crops: int = 3
    checkpoint_every: int = 0
    sampler: CropSampler = field(default_factory=CropSampler)
    net: PredictorNetConfig = field(default_factory=PredictorNetConfig)

    def __post_init__(self) -> None:
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}, options {MODES}")
        if self.task not in TASKS:
            raise ConfigError(f"unknown task {self.task!r}, options {TASKS}")
        if self.k_crops < 1:
            raise ConfigError("k_crops must be >= 1")
        if self.lam < 0 or (self.lam_unlabeled is not None
                            and self.lam_unlabeled < 0):
            raise ConfigError("consistency coefficients must be >= 0")
        if self.lam_warmup_steps < 0:
            raise ConfigError("lam_warmup_steps must be >= 0")
        if self.steps < 1:
            raise ConfigError("steps must be >= 1")
        if self.batch_images < 1:
            raise ConfigError("batch_images must be >= 1")

    @property
    def effective_lam_unlabeled(self) -> float:
        return self.lam if self.lam_unlabeled is None else self.lam_unlabeled

    def resolved_net(self) -> PredictorNetConfig:
        """Net config with the output head matched to the task."""
        _, out_ch, activation, semantics = _TASK_SETTINGS[self.task]
        return replace(
            self.net,
            out_channels=out_ch,
            out_activation=activation,
            out_semantics=semantics,
        )


# ---------------------------------------------------------------------------
# key = value configuration files


def _parse_scalar(ftype, raw: str):
    raw = raw.strip()
    if ftype == Optional[float]:
        return None if raw.lower() in ("", "none") else float(raw)
    if ftype is bool:
        lowered = raw.lower()
        if lowered in ("true", "1"):
            return True
        if lowered in ("false", "0"):
            return False
        raise ConfigError(f"bad boolean {raw!r}")
    if ftype in (int, float, str):
        try:
            return ftype(raw)
        except ValueError as exc:
            raise ConfigError(f"bad value {raw!r}: {exc}") from exc
    raise ConfigError(f"cannot parse a value of type {ftype}")


def _apply_dotted(cls, base, updates: dict):
    """Rebuild a (possibly nested) frozen dataclass from dotted keys."""
    own: dict = {}
    nested: dict = {}
    for key, raw in updates.items():
        head, _, rest = key.partition(".")
        if rest:
            nested.setdefault(head, {})[rest] = raw
        else:
            own[head] = raw
    hints = typing.get_type_hints(cls)
    names = {f.name for f in fields(cls)}
    kwargs = {}
    for name, raw in own.items():
        if name not in names:
            raise ConfigError(f"unknown config key {name!r} for {cls.__name__}")
        kwargs[name] = _parse_scalar(hints[name], raw)
    for name, sub in nested.items():
        if name not in names:
            raise ConfigError(f"unknown config section {name!r}")
        sub_base = getattr(base, name)
        kwargs[name] = _apply_dotted(type(sub_base), sub_base, sub)
    return replace(base, **kwargs)


def parse_config_text(text: str) -> dict:
    """Parse ``key = value`` lines (``#`` comments allowed) into a dict."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(
                f"line {lineno}: expected key = value, got {line!r}"
            )
        key, _, value = line.partition("=")
        out[key.strip()] = value.strip()
    return out


def train_config_from_mapping(mapping: dict,
                              base: Optional[TrainConfig] = None) -> TrainConfig:
    """Build a TrainConfig from string key/value pairs.

    Nested fields use dotted keys (``sampler.scale_lo``,
    ``net.base_channels``, ``sampler.jitter.hue``). Unknown keys raise
    ConfigError.
    """
    return _apply_dotted(TrainConfig, base or TrainConfig(), mapping)


def load_train_config(path, overrides: Optional[dict] = None) -> TrainConfig:
    """Read a config file and apply override pairs on top."""
    mapping = parse_config_text(Path(path).read_text())
    if overrides:
        mapping.update(overrides)
    return train_config_from_mapping(mapping)


def config_to_mapping(config: TrainConfig) -> dict:
    """Flatten a config to dotted string pairs that replay to it.

    ``train_config_from_mapping(config_to_mapping(c)) == c`` holds
    exactly; floats are serialized with full precision.
    """

    def flatten(obj, prefix: str) -> dict:
        out = {}
        for f in fields(obj):
            value = getattr(obj, f.name)
            key = prefix + f.name
            if is_dataclass(value):
                out.update(flatten(value, key + "."))
            elif value is None:
                out[key] = "none"
            elif isinstance(value, bool):
                out[key] = "true" if value else "false"
            elif isinstance(value, float):
                out[key] = repr(value)
            else:
                out[key] = str(value)
        return out

    return flatten(config, "")


# ---------------------------------------------------------------------------
# Optimizer


@dataclass
class AdamWState:
    """First/second moment accumulators plus the step counter."""

    m: np.ndarray
    v: np.ndarray
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, n: int) -> "AdamWState":
        return cls(m=np.zeros(n), v=np.zeros(n))


def adamw_step(
    params: np.ndarray,
    grads: np.ndarray,
    state: AdamWState,
    lr: float,
    weight_decay: float,
) -> np.ndarray:
    """One decoupled-weight-decay Adam update; returns new parameters.

    Decay is applied to the parameters directly, outside the
    moment-based update. Moments are bias corrected. Mutates ``state``.
    """
    if not np.all(np.isfinite(grads)):
        raise DivergenceError(
            f"non-finite gradient at optimizer step {state.t}"
        )
    state.t += 1
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * grads
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * grads * grads
    m_hat = state.m / (1.0 - state.beta1 ** state.t)
    v_hat = state.v / (1.0 - state.beta2 ** state.t)
    out = params - lr * weight_decay * params
    return out - lr * m_hat / (np.sqrt(v_hat) + state.eps)


def cosine_lr(step: int, total: int, lr_start: float, lr_end: float) -> float:
    """Cosine decay from lr_start (step 0) to lr_end (step == total)."""
    if not 0 <= step <= total:
        raise ConfigError(f"step {step} outside [0, {total}]")
    return lr_end + 0.5 * (lr_start - lr_end) * (
        1.0 + math.cos(math.pi * step / total)
    )


# ---------------------------------------------------------------------------
# Data plumbing


class _LabeledSet:
    """All maps of a split, preloaded."""

    def __init__(self, manifest: DatasetManifest, gt_kind: str):
        self.rgb = []
        self.gt = []
        for sample_id in manifest.ids:
            maps = load_scene_maps(manifest, sample_id)
            self.rgb.append(maps["rgb"])
            self.gt.append(maps[gt_kind])
        if not self.rgb:
            raise ConfigError(f"split {manifest.split!r} is empty")
        self.height = self.rgb[0].height
        self.width = self.rgb[0].width

    def __len__(self) -> int:
        return len(self.rgb)


class _UnlabeledSet:
    """RGB-only view of a split; never opens ground-truth files."""

    def __init__(self, manifest: DatasetManifest):
        self.rgb = [load_rgb_only(manifest, sid) for sid in manifest.ids]
        if not self.rgb:
            raise ConfigError(f"split {manifest.split!r} is empty")
        self.height = self.rgb[0].height
        self.width = self.rgb[0].width

    def __len__(self) -> int:
        return len(self.rgb)


def _crop_input(rgb: DenseMap, t: CropTransform) -> np.ndarray:
    crop = apply(t, rgb)
    if t.jitter is not None:
        crop = jitter_apply(crop, t.jitter)
    return crop.values


def _sample_crop_set(cfg: TrainConfig, src_h: int, src_w: int, rng):
    return [sample_transform(cfg.sampler, src_h, src_w, rng)
            for _ in range(cfg.k_crops)]


def _masked_l1(out: np.ndarray, target: np.ndarray, mask: np.ndarray):
    """Mean over crops of per-crop-normalized L1; returns (loss, grad)."""
    m3 = mask[..., None]
    resid = (out - target) * m3
    counts = mask.sum(axis=(1, 2)) * out.shape[-1]
    counts = np.maximum(counts, 1)
    n = out.shape[0]
    loss = float(np.sum(np.abs(resid).sum(axis=(1, 2, 3)) / counts) / n)
    grad = np.sign(resid) / counts[:, None, None, None] / n
    return loss, grad


def _feature_scale(loss_layer: str) -> float:
    """Resolution of the loss layer relative to the input grid."""
    if loss_layer in ("L", "L-1"):
        return 1.0
    return 0.5 ** int(loss_layer[2:])


def _consistency_term(maps4, transforms, src_h, src_w, scale):
    """Consistency value and gradients for one image's K loss-layer maps.

    ``maps4`` has shape (K, h, w, c). Gradients come back stacked in the
    same shape, already carrying the mean-over-K factor but not the
    coefficient.
    """
    if scale != 1.0:
        transforms = [scale_transform(t, scale) for t in transforms]
        src_h = int(round(src_h * scale))
        src_w = int(round(src_w * scale))
    crop_maps = [DenseMap(maps4[i], Semantics.FEATURE)
                 for i in range(maps4.shape[0])]
    avg = equivariant_average(crop_maps, transforms, src_h, src_w)
    res = equivariant_loss(crop_maps, transforms, avg)
    return res.value, np.stack(res.grad_wrt_crop_outputs)


def _validation_transforms(cfg: TrainConfig, n_images: int,
                           src_h: int, src_w: int):
    # Consistency is scored under the evaluation protocol (in-frame
    # crops, scale 0.85-1.0, no jitter) rather than the training
    # sampler, and the transform set is seeded once, independently of
    # the run seed, so scores are comparable across runs.
    rng = np.random.default_rng(
        np.random.SeedSequence([_VAL_PROTOCOL_SEED, _VAL_STREAM])
    )
    sampler = replace(cfg.sampler, scale_lo=0.85, scale_hi=1.0,
                      pad_frac=0.0, jitter=ColorJitterParams(0, 0, 0, 0))
    return [
        [sample_transform(sampler, src_h, src_w, rng)
         for _ in range(cfg.val_crops)]
        for _ in range(n_images)
    ]


def validation_eqloss(net: PredictorNet, rgb: DenseMap, transforms) -> float:
    """Output-level consistency score of a net over fixed transforms."""
    crops = np.stack([apply(t, rgb).values for t in transforms])
    out4, _, _ = net.forward(crops)
    value, _ = _consistency_term(out4, transforms, rgb.height, rgb.width, 1.0)
    return value


def _validate(net, val_set: _LabeledSet, task: str, val_transforms) -> dict:
    eq_vals = []
    task_vals = []
    for i, transforms in enumerate(val_transforms):
        rgb = val_set.rgb[i]
        eq_vals.append(validation_eqloss(net, rgb, transforms))
        pred, _, _ = net.forward(rgb)
        gt = val_set.gt[i]
        if task == "depth":
            # gt holds disparity; score depth after inversion.
            gt_depth = DenseMap(1.0 / np.maximum(gt.values, 1e-6),
                                Semantics.DEPTH)
            task_vals.append(aligned_depth_absrel(pred, gt_depth))
        elif task == "normal":
            task_vals.append(angular_error(pred, gt).mean_deg)
        else:
            task_vals.append(l1_error(pred, gt))
    name = {"depth": "val_absrel", "normal": "val_angular_mean",
            "edge": "val_l1"}[task]
    return {
        "val_eqloss": float(np.mean(eq_vals)),
        name: float(np.mean(task_vals)),
    }


def _emit(rows, run_id, step, **metrics):
    for name, value in metrics.items():
        rows.append(MetricRow(run_id, step, name, float(value)))


def _check_finite(value: float, step: int) -> None:
    if not math.isfinite(value):
        raise DivergenceError(f"non-finite loss at step {step}")


@dataclass
class TrainResult:
    """What a run leaves behind, for callers that keep going in-process."""

    net: PredictorNet
    run_id: str
    rows: list
    csv_path: Optional[Path]
    checkpoint_path: Optional[Path]
    final_val: dict


def train(
    config: TrainConfig,
    train_manifest: DatasetManifest,
    out_dir,
    val_manifest: Optional[DatasetManifest] = None,
    unlabeled_manifest: Optional[DatasetManifest] = None,
    run_id: Optional[str] = None,
) -> TrainResult:
    """Run one training job; writes checkpoint_final.eqvn and metrics.csv.

    ``unlabeled_manifest`` is required for mode "semisup" and unused
    otherwise. Mode "finetune" lives in :func:`finetune_unsupervised`.
    """
    if config.mode == "finetune":
        raise ConfigError("use finetune_unsupervised for mode finetune")
    if config.mode == "semisup":
        if unlabeled_manifest is None or not unlabeled_manifest.ids:
            raise ConfigError("semisup requires a non-empty unlabeled split")
    gt_kind = _TASK_SETTINGS[config.task][0]
    train_set = _LabeledSet(train_manifest, gt_kind)
    unlabeled = (_UnlabeledSet(unlabeled_manifest)
                 if config.mode == "semisup" else None)
    net = PredictorNet.create(config.resolved_net(), seed=config.seed)
    if config.loss_layer not in net.config.capture_names():
        raise ConfigError(
            f"loss_layer {config.loss_layer!r} not available; "
            f"options {net.config.capture_names()}"
        )
    return _run_loop(config, net, train_set, unlabeled, out_dir,
                     val_manifest, run_id, pseudo_teacher=None)


def finetune_unsupervised(
    config: TrainConfig,
    unlabeled_manifest: DatasetManifest,
    teacher_checkpoint,
    out_dir,
    val_manifest: Optional[DatasetManifest] = None,
    run_id: Optional[str] = None,
) -> TrainResult:
    """Adapt a pre-trained net on unlabeled images.

    The student starts from the teacher weights (the stored architecture
    wins over ``config.net``). Crop targets are the frozen teacher's
    full-frame prediction resampled through each crop transform, and the
    consistency term is added with ``config.lam``. Only RGB files are
    opened for the unlabeled split.
    """
    teacher, _, _, _ = load_checkpoint(teacher_checkpoint)
    student = PredictorNet(teacher.config, teacher.params.copy())
    train_set = _UnlabeledSet(unlabeled_manifest)
    if config.loss_layer not in student.config.capture_names():
        raise ConfigError(
            f"loss_layer {config.loss_layer!r} not available; "
            f"options {student.config.capture_names()}"
        )
    return _run_loop(config, student, train_set, None, out_dir,
                     val_manifest, run_id, pseudo_teacher=teacher)


def _run_loop(config, net, train_set, unlabeled, out_dir, val_manifest,
              run_id, pseudo_teacher):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    finetuning = pseudo_teacher is not None
    if run_id is None:
        mode = "finetune" if finetuning else config.mode
        run_id = f"{mode}-{config.task}-seed{config.seed}"
    rng = np.random.default_rng(config.seed)
    h, w = train_set.height, train_set.width
    capture = None if config.loss_layer == "L" else config.loss_layer
    scale = _feature_scale(config.loss_layer)
    eq_enabled = config.lam > 0 and (
        finetuning or config.mode in ("eqloss", "semisup")
    )
    unlabeled_enabled = (unlabeled is not None
                         and config.effective_lam_unlabeled > 0)

    val_set = None
    val_transforms = None
    if val_manifest is not None:
        val_set = _LabeledSet(val_manifest, _TASK_SETTINGS[config.task][0])
        n_val = min(config.val_images, len(val_set))
        val_set.rgb = val_set.rgb[:n_val]
        val_set.gt = val_set.gt[:n_val]
        val_transforms = _validation_transforms(config, n_val, h, w)

    pseudo_full = None
    if finetuning:
        pseudo_full = []
        for rgb in train_set.rgb:
            pred, _, _ = pseudo_teacher.forward(rgb)
            pseudo_full.append(pred)

    opt = AdamWState.zeros(net.params.size)
    rows = []
    last_val = {}
    k = config.k_crops
    b = config.batch_images

    for step in range(config.steps):
        lr = cosine_lr(step, config.steps, config.lr_start, config.lr_end)
        # During the warm-up the consistency term is off entirely, so the
        # run stays bitwise identical to a plain-augmentation run until the
        # net has settled enough for consistency to be a meaningful signal.
        past_warmup = step >= config.lam_warmup_steps
        use_eq = eq_enabled and past_warmup
        use_unlabeled = unlabeled_enabled and past_warmup
        idx = rng.choice(len(train_set), size=b, replace=b > len(train_set))

        crops = []
        targets = []
        masks = []
        per_image_transforms = []
        for i in idx:
            rgb = train_set.rgb[i]
            if config.mode == "sup" and not finetuning:
                transforms = [identity_transform(h, w)] * k
            else:
                transforms = _sample_crop_set(config, h, w, rng)
            per_image_transforms.append(transforms)
            gt = pseudo_full[i] if finetuning else train_set.gt[i]
            for t in transforms:
                crops.append(_crop_input(rgb, t))
                tgt = apply(t, gt)
                targets.append(tgt.values)
                masks.append(tgt.mask_or_full())
        x4 = np.stack(crops)
        t4 = np.stack(targets)
        m3 = np.stack(masks)

        out4, cap4, tape = net.forward(
            x4, capture=capture if use_eq else None
        )
        task_loss, grad_out = _masked_l1(out4, t4, m3)
        _check_finite(task_loss, step)

        eq_value = 0.0
        grad_cap = None
        if use_eq:
            loss_maps4 = out4 if capture is None else cap4
            eq_grads = np.zeros_like(loss_maps4)
            eq_acc = 0.0
            for bi, transforms in enumerate(per_image_transforms):
                sl = slice(bi * k, (bi + 1) * k)
                value, grads = _consistency_term(
                    loss_maps4[sl], transforms, h, w, scale
                )
                eq_acc += value
                eq_grads[sl] = grads
            eq_value = eq_acc / b
            _check_finite(eq_value, step)
            scaled = (config.lam / b) * eq_grads
            if capture is None:
                grad_out = grad_out + scaled
            else:
                grad_cap = scaled

        # Unlabeled stream: consistency only, no task residual.
        eq_unlabeled = 0.0
        ugrad_params = None
        if use_unlabeled:
            uidx = rng.choice(len(unlabeled), size=b,
                              replace=b > len(unlabeled))
            ucrops = []
            utransforms = []
            for i in uidx:
                transforms = _sample_crop_set(config, h, w, rng)
                utransforms.append(transforms)
                for t in transforms:
                    ucrops.append(_crop_input(unlabeled.rgb[i], t))
            ux4 = np.stack(ucrops)
            uout4, ucap4, utape = net.forward(ux4, capture=capture)
            uloss_maps4 = uout4 if capture is None else ucap4
            ugrads = np.zeros_like(uloss_maps4)
            uacc = 0.0
            for bi, transforms in enumerate(utransforms):
                sl = slice(bi * k, (bi + 1) * k)
                value, grads = _consistency_term(
                    uloss_maps4[sl], transforms, h, w, scale
                )
                uacc += value
                ugrads[sl] = grads
            eq_unlabeled = uacc / b
            _check_finite(eq_unlabeled, step)
            uscaled = (config.effective_lam_unlabeled / b) * ugrads
            if capture is None:
                ugrad_params, _ = net.backward(utape, uscaled)
            else:
                ugrad_params, _ = net.backward(
                    utape, np.zeros_like(uout4), uscaled
                )

        grad_params, _ = net.backward(tape, grad_out, grad_cap)
        if ugrad_params is not None:
            grad_params = grad_params + ugrad_params

        net.set_params(
            adamw_step(net.params, grad_params, opt, lr, config.weight_decay)
        )

        total = (task_loss + config.lam * eq_value
                 + config.effective_lam_unlabeled * eq_unlabeled)
        _emit(rows, run_id, step, train_task=task_loss, train_eq=eq_value,
              train_total=total, lr=lr)
        if unlabeled is not None:
            _emit(rows, run_id, step, train_eq_unlabeled=eq_unlabeled)

        is_last = step == config.steps - 1
        if val_set is not None and (
            is_last or (config.val_every and step % config.val_every == 0)
        ):
            last_val = _validate(net, val_set, config.task, val_transforms)
            _emit(rows, run_id, step, **last_val)
        if (config.checkpoint_every and not is_last and step > 0
                and step % config.checkpoint_every == 0):
            save_checkpoint(
                net, out_dir / f"checkpoint_{step:06d}.eqvn", step=step,
                optimizer_state=(opt.m, opt.v, opt.t),
            )

    checkpoint_path = out_dir / "checkpoint_final.eqvn"
    save_checkpoint(net, checkpoint_path, step=config.steps,
                    optimizer_state=(opt.m, opt.v, opt.t))
    csv_path = out_dir / "metrics.csv"
    write_metrics_csv(csv_path, rows)
    return TrainResult(net=net, run_id=run_id, rows=rows, csv_path=csv_path,
                       checkpoint_path=checkpoint_path, final_val=last_val)
