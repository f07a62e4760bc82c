"""Command line front end: dataset generation, training, evaluation,
equivariance audits and inference-time averaging.

Heavy imports (numpy and the library modules) are deferred into the
command functions so that ``--deterministic`` can pin BLAS/OpenMP thread
counts before numpy is first imported.

Exit codes are a stable contract: 0 success, 2 configuration or usage
error, 3 file or format error, 4 numeric divergence.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
import os
from pathlib import Path

from .errors import (
    ArchitectureMismatchError,
    CheckpointFormatError,
    CheckpointVersionError,
    ConfigError,
    CropEqError,
    DivergenceError,
    MapFormatError,
    SemanticsError,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_DIVERGENCE = 4

_IO_ERRORS = (
    MapFormatError,
    CheckpointFormatError,
    CheckpointVersionError,
    ArchitectureMismatchError,
    OSError,
)

_THREAD_VARS = (
    "OMP_NUM_THREADS",
    "OPENBLAS_NUM_THREADS",
    "MKL_NUM_THREADS",
    "NUMEXPR_NUM_THREADS",
    "VECLIB_MAXIMUM_THREADS",
)


def _force_single_thread() -> None:
    for var in _THREAD_VARS:
        os.environ[var] = "1"


# ---------------------------------------------------------------------------
# Run records


def _sha256(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            digest.update(block)
    return digest.hexdigest()


def write_run_record(path: Path, command: str, run_id: str, config: dict,
                     inputs, outputs) -> None:
    """Persist what a command did: config, input hashes, output paths.

    Paths are stored relative to the record's directory and the record
    carries no timestamps, so identical reruns (same relative layout,
    same seed) produce identical bytes.
    """
    base = Path(path).parent

    def rel(p) -> str:
        return os.path.relpath(str(p), start=str(base))

    record = {
        "run_id": run_id,
        "command": command,
        "config": {str(k): str(v) for k, v in config.items()},
        "input_hashes": {
            rel(p): _sha256(Path(p)) for p in inputs if p is not None
        },
        "outputs": sorted(rel(o) for o in outputs),
    }
    path.write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# Figure writers


def write_gray_png(path: Path, values) -> None:
    """Write a 2-D array in [0, 1] as an 8-bit grayscale PNG."""
    import struct
    import zlib

    import numpy as np

    arr = np.clip(np.asarray(values, dtype=np.float64), 0.0, 1.0)
    if arr.ndim != 2:
        raise SemanticsError(f"heatmap must be 2-D, got shape {arr.shape}")
    img = (arr * 255.0 + 0.5).astype(np.uint8)
    h, w = img.shape

    def chunk(tag: bytes, data: bytes) -> bytes:
        out = struct.pack(">I", len(data)) + tag + data
        return out + struct.pack(">I", zlib.crc32(tag + data) & 0xFFFFFFFF)

    ihdr = struct.pack(">IIBBBBB", w, h, 8, 0, 0, 0, 0)
    raw = b"".join(b"\x00" + row.tobytes() for row in img)
    blob = (b"\x89PNG\r\n\x1a\n" + chunk(b"IHDR", ihdr)
            + chunk(b"IDAT", zlib.compress(raw, 9)) + chunk(b"IEND", b""))
    Path(path).write_bytes(blob)


def render_box_svg(samples, title: str) -> str:
    """One vertical box plot: quartile box, 1.5 IQR whiskers, outliers."""
    import numpy as np

    s = np.sort(np.asarray(samples, dtype=np.float64))
    if s.size == 0:
        raise SemanticsError("box plot needs at least one sample")
    q1, med, q3 = (float(v) for v in np.percentile(s, [25, 50, 75]))
    iqr = q3 - q1
    lo_limit = q1 - 1.5 * iqr
    hi_limit = q3 + 1.5 * iqr
    inside = s[(s >= lo_limit) & (s <= hi_limit)]
    whisker_lo = float(inside[0]) if inside.size else q1
    whisker_hi = float(inside[-1]) if inside.size else q3
    outliers = s[(s < lo_limit) | (s > hi_limit)]

    vmin = min(float(s[0]), whisker_lo)
    vmax = max(float(s[-1]), whisker_hi)
    if vmax - vmin < 1e-300:
        vmax = vmin + 1.0
    width, height = 320, 260
    top, bottom = 40, 220
    cx, half = 160, 45

    def y(v: float) -> float:
        return bottom - (v - vmin) / (vmax - vmin) * (bottom - top)

    def line(x1, y1, x2, y2):
        return (f'<line x1="{x1:.1f}" y1="{y1:.1f}" x2="{x2:.1f}" '
                f'y2="{y2:.1f}" stroke="black" stroke-width="1.5"/>')

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" '
        f'height="{height}" viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<text x="{cx}" y="20" text-anchor="middle" '
        f'font-family="sans-serif" font-size="13">{title}</text>',
        line(cx, y(whisker_lo), cx, y(q1)),
        line(cx, y(q3), cx, y(whisker_hi)),
        line(cx - half / 2, y(whisker_lo), cx + half / 2, y(whisker_lo)),
        line(cx - half / 2, y(whisker_hi), cx + half / 2, y(whisker_hi)),
        f'<rect x="{cx - half:.1f}" y="{y(q3):.1f}" width="{2 * half:.1f}" '
        f'height="{max(y(q1) - y(q3), 0.5):.1f}" fill="#cfe3f7" '
        f'stroke="black" stroke-width="1.5"/>',
        line(cx - half, y(med), cx + half, y(med)),
    ]
    for v in outliers:
        parts.append(
            f'<circle cx="{cx}" cy="{y(float(v)):.1f}" r="2.5" '
            f'fill="none" stroke="black"/>'
        )
    for v, label_y in ((vmax, y(vmax) + 4), (vmin, y(vmin) + 4)):
        parts.append(
            f'<text x="{cx + half + 8}" y="{label_y:.1f}" '
            f'font-family="sans-serif" font-size="10">{v:.4g}</text>'
        )
    parts.append(
        f'<text x="{cx + half + 8}" y="{y(med) + 4:.1f}" '
        f'font-family="sans-serif" font-size="10">median {med:.4g}</text>'
    )
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


# ---------------------------------------------------------------------------
# Shared pieces


def _audit_sampler(out_h, out_w, scale_lo, scale_hi):
    from .geometry import ColorJitterParams, CropSampler

    return CropSampler(
        out_h=out_h, out_w=out_w, scale_lo=scale_lo, scale_hi=scale_hi,
        pad_frac=0.0, jitter=ColorJitterParams(0, 0, 0, 0),
    )


def _load_rgb(path: Path):
    from .data import read_map
    from .geometry import Semantics

    x = read_map(path)
    if x.semantics is not Semantics.RGB:
        raise SemanticsError(
            f"{path}: expected an rgb map, got {x.semantics.value}"
        )
    return x


def _consistency_of_predictor(f, rgb, transforms) -> float:
    from .equivariance import equivariant_average, equivariant_loss
    from .geometry import apply

    outs = [f(apply(t, rgb), t) for t in transforms]
    avg = equivariant_average(outs, transforms, rgb.height, rgb.width)
    return equivariant_loss(outs, transforms, avg).value


_TASK_OF_SEMANTICS = {"disparity": "depth", "normal": "normal", "edge": "edge"}


# ---------------------------------------------------------------------------
# Commands


def cmd_gen(args) -> int:
    from .data import build_dataset

    seed = args.seed if args.seed is not None else 0
    train_m, val_m = build_dataset(
        args.out, args.n_train, args.n_val, h=args.size, w=args.size,
        complexity=args.complexity, seed_base=seed, force=args.force,
    )
    print(f"wrote {len(train_m.ids)} train / {len(val_m.ids)} val scenes "
          f"to {args.out}")
    outputs = [
        p for p in Path(args.out).rglob("*")
        if p.is_file() and p.name not in (".lock", "run_record.json")
    ]
    write_run_record(
        Path(args.out) / "run_record.json", "gen", f"gen-seed{seed}",
        {"train": args.n_train, "val": args.n_val, "size": args.size,
         "complexity": args.complexity, "seed": seed},
        [], outputs,
    )
    return EXIT_OK


def _train_overrides(args) -> dict:
    overrides = {}
    for pair in args.set:
        key, sep, value = pair.partition("=")
        if not sep:
            raise ConfigError(f"--set expects KEY=VALUE, got {pair!r}")
        overrides[key.strip()] = value.strip()
    for flag in ("mode", "task", "steps", "lam", "k_crops", "loss_layer"):
        value = getattr(args, flag)
        if value is not None:
            overrides[flag] = value
    if args.seed is not None:
        overrides["seed"] = str(args.seed)
    return overrides


def cmd_train(args) -> int:
    from .data import read_manifest
    from .training import (
        config_to_mapping,
        finetune_unsupervised,
        load_train_config,
        train,
        train_config_from_mapping,
    )

    overrides = _train_overrides(args)
    if args.config is not None:
        config = load_train_config(args.config, overrides)
    else:
        config = train_config_from_mapping(overrides)

    train_m = read_manifest(Path(args.data) / "train")
    val_dir = Path(args.data) / "val"
    val_m = read_manifest(val_dir) if (val_dir / "manifest.txt").exists() \
        else None
    unlabeled_m = (read_manifest(args.unlabeled)
                   if args.unlabeled is not None else None)

    inputs = [Path(args.data) / "train" / "manifest.txt"]
    if val_m is not None:
        inputs.append(val_dir / "manifest.txt")
    if args.config is not None:
        inputs.append(args.config)
    if args.unlabeled is not None:
        inputs.append(Path(args.unlabeled) / "manifest.txt")

    if config.mode == "finetune":
        if args.teacher is None:
            raise ConfigError("mode finetune requires --teacher")
        inputs.append(args.teacher)
        source = unlabeled_m if unlabeled_m is not None else train_m
        result = finetune_unsupervised(
            config, source, args.teacher, args.out,
            val_manifest=val_m, run_id=args.run_id,
        )
    else:
        result = train(
            config, train_m, args.out, val_manifest=val_m,
            unlabeled_manifest=unlabeled_m, run_id=args.run_id,
        )

    if result.final_val:
        summary = " ".join(f"{k}={v:.6g}"
                           for k, v in sorted(result.final_val.items()))
    else:
        summary = "no validation split"
    print(f"final {result.run_id}: {summary}")

    out = Path(args.out)
    outputs = [result.checkpoint_path, result.csv_path]
    outputs.extend(sorted(out.glob("checkpoint_0*.eqvn")))
    write_run_record(out / "run_record.json", "train", result.run_id,
                     config_to_mapping(config), inputs, outputs)
    return EXIT_OK


def cmd_eval(args) -> int:
    import numpy as np

    from .data import load_scene_maps, read_manifest
    from .geometry import DenseMap, Semantics, apply, sample_transform
    from .metrics import (
        MetricRow,
        absrel,
        aligned_depth,
        angular_error,
        delta_gt,
        l1_error,
        write_metrics_csv,
    )

    if (args.ckpt is None) == (not args.oracle):
        raise ConfigError("give exactly one of --ckpt or --oracle")

    manifest = read_manifest(Path(args.data) / args.split)
    if not manifest.ids:
        raise ConfigError(f"split {args.split!r} is empty")

    if args.ckpt is not None:
        from .model import load_checkpoint, predictor_fn

        net, _, _, _ = load_checkpoint(args.ckpt)
        task = _TASK_OF_SEMANTICS.get(net.config.out_semantics)
        if task is None:
            raise ConfigError(
                f"checkpoint predicts {net.config.out_semantics!r}, "
                "which no eval task covers"
            )
        predict = predictor_fn(net)
        run_id = args.run_id or f"eval-{Path(args.ckpt).stem}"
    else:
        if args.task is None:
            raise ConfigError("--oracle requires --task")
        task = args.task
        run_id = args.run_id or f"eval-oracle-{task}"
        predict = None  # replaced per image below

    gt_kind = {"depth": "disparity", "normal": "normal", "edge": "edge"}[task]
    seed = args.seed if args.seed is not None else 0
    rows = []
    per_metric = {}

    for i, sample_id in enumerate(manifest.ids):
        maps = load_scene_maps(manifest, sample_id)
        rgb = maps["rgb"]
        if predict is None:
            gt_map = maps[gt_kind]
            f = lambda crop, t: apply(t, gt_map)  # noqa: E731
            pred = gt_map
        else:
            f = predict
            pred = predict(rgb, None)
        sampler = _audit_sampler(rgb.height, rgb.width,
                                 args.scale_lo, args.scale_hi)
        rng = np.random.default_rng(np.random.SeedSequence([seed, i]))
        transforms = [sample_transform(sampler, rgb.height, rgb.width, rng)
                      for _ in range(args.crops)]
        image_metrics = {
            "eqloss": _consistency_of_predictor(f, rgb, transforms),
        }
        if task == "depth":
            gt_depth = maps["depth"]
            ad = aligned_depth(pred, gt_depth)
            image_metrics["absrel"] = absrel(ad, gt_depth)
            image_metrics["delta_gt"] = delta_gt(ad, gt_depth)
        elif task == "normal":
            stats = angular_error(pred, maps["normal"])
            image_metrics["angular_mean"] = stats.mean_deg
            image_metrics["angular_median"] = stats.median_deg
            image_metrics["angular_pct_below"] = stats.pct_below_threshold
        else:
            image_metrics["l1"] = l1_error(pred, maps["edge"])
        for name, value in image_metrics.items():
            rows.append(MetricRow(run_id, i, name, float(value)))
            per_metric.setdefault(name, []).append(float(value))

    for name, values in per_metric.items():
        rows.append(MetricRow(run_id, -1, f"mean_{name}",
                              float(np.mean(values))))

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    csv_path = out / "eval.csv"
    write_metrics_csv(csv_path, rows)
    summary = " ".join(
        f"mean_{name}={np.mean(values):.6g}"
        for name, values in sorted(per_metric.items())
    )
    print(f"{run_id}: {summary}")
    inputs = [Path(args.data) / args.split / "manifest.txt"]
    if args.ckpt is not None:
        inputs.append(args.ckpt)
    write_run_record(out / "run_record.json", "eval", run_id,
                     {"data": args.data, "split": args.split, "task": task,
                      "crops": args.crops, "seed": seed},
                     inputs, [csv_path])
    return EXIT_OK


def cmd_eqerr(args) -> int:
    import numpy as np

    from .geometry import apply, sample_transform
    from .metrics import (
        MetricRow,
        eqerr_depth_map,
        eqerr_distribution,
        write_metrics_csv,
    )

    have_scene = args.oracle_scene is not None
    have_ckpt = args.ckpt is not None
    if have_scene == have_ckpt:
        raise ConfigError("give exactly one of --ckpt/--image or "
                          "--oracle-scene")

    if have_scene:
        from .data import gen_scene

        sample = gen_scene(args.oracle_scene, args.size, args.size,
                           args.complexity)
        x = sample.rgb
        disp_map = sample.disparity
        f = lambda crop, t: apply(t, disp_map)  # noqa: E731
        gt_depth = sample.depth
        run_id = args.run_id or f"eqerr-oracle-scene{args.oracle_scene}"
        inputs = []
    else:
        from .model import load_checkpoint, predictor_fn

        if args.image is None:
            raise ConfigError("--ckpt requires --image")
        net, _, _, _ = load_checkpoint(args.ckpt)
        f = predictor_fn(net)
        x = _load_rgb(Path(args.image))
        gt_depth = None
        run_id = args.run_id or f"eqerr-{Path(args.ckpt).stem}"
        inputs = [args.ckpt, args.image]

    seed = args.seed if args.seed is not None else 0
    sampler = _audit_sampler(x.height, x.width, args.scale_lo, args.scale_hi)
    stats = eqerr_distribution(f, x, sampler, args.pairs, seed=seed,
                               gt_depth=gt_depth)

    rows = [
        MetricRow(run_id, -1, "eqerr_mean", stats.mean),
        MetricRow(run_id, -1, "eqerr_median", stats.median),
        MetricRow(run_id, -1, "eqerr_q1", stats.q1),
        MetricRow(run_id, -1, "eqerr_q3", stats.q3),
        MetricRow(run_id, -1, "eqerr_max", stats.max_value),
        MetricRow(run_id, -1, "eqerr_pairs", float(stats.n_pairs)),
        MetricRow(run_id, -1, "eqerr_skipped", float(stats.skipped)),
    ]
    if stats.ref_absrel is not None:
        rows.append(MetricRow(run_id, -1, "ref_absrel", stats.ref_absrel))
    rows.extend(
        MetricRow(run_id, i, "eqerr_pair", float(v))
        for i, v in enumerate(stats.samples)
    )

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    csv_path = out / "eqerr.csv"
    write_metrics_csv(csv_path, rows)
    svg_path = out / "eqerr_box.svg"
    svg_path.write_text(render_box_svg(stats.samples, f"eqerr ({run_id})"))
    outputs = [csv_path, svg_path]

    # First few pairs rendered as relative-discrepancy heatmaps, using
    # the same per-pair substreams as the distribution run.
    from .errors import OverlapError

    for i in range(min(args.heatmaps, args.pairs)):
        rng = np.random.default_rng(np.random.SeedSequence([seed, i]))
        t1 = sample_transform(sampler, x.height, x.width, rng)
        t2 = sample_transform(sampler, x.height, x.width, rng)
        try:
            m = eqerr_depth_map(f, x, t1, t2)
        except OverlapError:
            continue
        field = m.values[..., 0]
        peak = float(field.max())
        png_path = out / f"eqerr_pair_{i:03d}.png"
        write_gray_png(png_path, field / peak if peak > 0 else field)
        outputs.append(png_path)

    print(f"{run_id}: mean={stats.mean:.6g} median={stats.median:.6g} "
          f"pairs={stats.n_pairs} skipped={stats.skipped}")
    write_run_record(out / "run_record.json", "eqerr", run_id,
                     {"pairs": args.pairs, "scale_lo": args.scale_lo,
                      "scale_hi": args.scale_hi, "seed": seed,
                      "heatmaps": args.heatmaps},
                     inputs, outputs)
    return EXIT_OK


def cmd_tta(args) -> int:
    import numpy as np

    from .data import write_map
    from .equivariance import predict_tta
    from .model import load_checkpoint, predictor_fn

    if args.crops < 1:
        raise ConfigError("--crops must be >= 1 (1 keeps just the identity)")
    net, _, _, _ = load_checkpoint(args.ckpt)
    x = _load_rgb(Path(args.image))
    seed = args.seed if args.seed is not None else 0
    sampler = _audit_sampler(x.height, x.width, args.scale_lo, args.scale_hi)
    rng = np.random.default_rng(seed)
    pred = predict_tta(predictor_fn(net), x, sampler, args.crops - 1,
                       rng=rng)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_map(pred, out)
    print(f"wrote {out}")
    record = out.parent / f"{out.stem}_run_record.json"
    write_run_record(record, "tta", f"tta-{Path(args.ckpt).stem}",
                     {"crops": args.crops, "seed": seed,
                      "scale_lo": args.scale_lo, "scale_hi": args.scale_hi},
                     [args.ckpt, args.image], [out])
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser


def _add_scale_flags(parser, lo=0.85, hi=1.0):
    parser.add_argument("--scale-lo", dest="scale_lo", type=float, default=lo)
    parser.add_argument("--scale-hi", dest="scale_hi", type=float, default=hi)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None)
    common.add_argument(
        "--deterministic", action="store_true",
        help="pin math libraries to one thread for byte-stable reruns",
    )

    parser = argparse.ArgumentParser(
        prog="cropeq",
        description="Crop-consistency tooling for dense predictors.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", parents=[common],
                       help="generate a synthetic scene dataset")
    g.add_argument("--out", type=Path, required=True)
    g.add_argument("--train", dest="n_train", type=int, default=8)
    g.add_argument("--val", dest="n_val", type=int, default=2)
    g.add_argument("--size", type=int, default=64)
    g.add_argument("--complexity", type=int, default=3)
    g.add_argument("--force", action="store_true")
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", parents=[common], help="run a training job")
    t.add_argument("--data", type=Path, required=True,
                   help="dataset root containing train/ and val/")
    t.add_argument("--out", type=Path, required=True)
    t.add_argument("--config", type=Path, help="key = value config file")
    t.add_argument("--mode")
    t.add_argument("--task")
    t.add_argument("--lambda", dest="lam",
                   help="consistency loss coefficient")
    t.add_argument("--crops", dest="k_crops")
    t.add_argument("--steps")
    t.add_argument("--loss-layer", dest="loss_layer")
    t.add_argument("--unlabeled", type=Path,
                   help="unlabeled split directory (semisup, finetune)")
    t.add_argument("--teacher", type=Path,
                   help="teacher checkpoint (finetune)")
    t.add_argument("--run-id", dest="run_id")
    t.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override any config field, repeatable")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", parents=[common],
                       help="score a checkpoint or oracle on a split")
    e.add_argument("--ckpt", type=Path)
    e.add_argument("--oracle", action="store_true",
                   help="score the stored ground truth as the prediction")
    e.add_argument("--task", choices=("depth", "normal", "edge"))
    e.add_argument("--data", type=Path, required=True)
    e.add_argument("--split", default="val")
    e.add_argument("--crops", type=int, default=3,
                   help="transforms per image for the consistency score")
    e.add_argument("--out", type=Path, required=True)
    e.add_argument("--run-id", dest="run_id")
    _add_scale_flags(e)
    e.set_defaults(func=cmd_eval)

    q = sub.add_parser("eqerr", parents=[common],
                       help="crop-pair consistency audit of a predictor")
    q.add_argument("--ckpt", type=Path)
    q.add_argument("--image", type=Path, help="rgb map file (.dmap)")
    q.add_argument("--oracle-scene", dest="oracle_scene", type=int,
                   help="audit the ground-truth lookup for this scene seed")
    q.add_argument("--size", type=int, default=64,
                   help="scene size for --oracle-scene")
    q.add_argument("--complexity", type=int, default=3)
    q.add_argument("--pairs", type=int, default=5000)
    q.add_argument("--heatmaps", type=int, default=3,
                   help="how many pair discrepancy maps to render")
    q.add_argument("--out", type=Path, required=True)
    q.add_argument("--run-id", dest="run_id")
    _add_scale_flags(q)
    q.set_defaults(func=cmd_eqerr)

    a = sub.add_parser("tta", parents=[common],
                       help="averaged prediction over sampled crops")
    a.add_argument("--ckpt", type=Path, required=True)
    a.add_argument("--image", type=Path, required=True)
    a.add_argument("--crops", type=int, default=3,
                   help="total crops averaged, identity included")
    a.add_argument("--out", type=Path, required=True,
                   help="output map file (.dmap)")
    _add_scale_flags(a)
    a.set_defaults(func=cmd_tta)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.deterministic:
        _force_single_thread()
    try:
        return args.func(args)
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except _IO_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except CropEqError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
