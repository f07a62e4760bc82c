"""Synthetic scenes with analytic ground truth, file format, datasets.

Scenes are continuous height fields rendered orthographically: a tilted
ground plane with a handful of raised primitives (rounded elliptical
domes and slanted plateaus with smoothstep-tapered edges), composed by
taking the nearest surface at every point. Depth is the analytic
distance field, normals come from the analytic surface gradient, RGB is
a low-frequency sinusoid texture modulated by Lambertian shading and a
depth-dependent attenuation, and the edge map is a soft threshold of the
analytic texture-gradient magnitude.

Every field can be evaluated at arbitrary continuous coordinates, which
is what makes ground truth equivariant under cropping: resampling the
rendered maps agrees with re-rendering the cropped window up to bilinear
interpolation error. Primitive amplitudes and radii are deliberately
conservative so that this error stays around 1e-3 in depth; taller or
tighter shapes would show up immediately in the re-render tests.

All primitive height profiles are C1 (their gradients vanish at the
footprint boundary), so depth has creases only where two primitives
overlap. Placement rejects overlapping footprints, leaving the maps
crease-free in practice.

Maps are persisted as DMAP files: magic ``DMAP``, version, dimensions,
a semantics byte, a dtype byte (float32 little-endian only), the raw
payload, and a CRC32 trailer. Values are quantized to float32 on write;
generated scenes are produced on the float32 grid so their round trips
are bit exact.
"""

from __future__ import annotations

import fcntl
import struct
import zlib
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

from .errors import ConstraintError, DatasetCollisionError, MapFormatError
from .geometry import CropTransform, DenseMap, Semantics

MAP_MAGIC = b"DMAP"
MAP_VERSION = 1
MANIFEST_VERSION = 1
MANIFEST_NAME = "manifest.txt"

DEPTH_RANGE = (1.0, 10.0)
VAL_SEED_STRIDE = 1_000_000

MAP_KINDS = ("rgb", "depth", "disparity", "normal", "edge")

_SEMANTICS_CODES = {
    Semantics.RGB: 0,
    Semantics.DEPTH: 1,
    Semantics.DISPARITY: 2,
    Semantics.NORMAL: 3,
    Semantics.EDGE: 4,
    Semantics.FEATURE: 5,
    Semantics.WEIGHT: 6,
}
_CODES_SEMANTICS = {v: k for k, v in _SEMANTICS_CODES.items()}


@dataclass(frozen=True)
class DomeParams:
    cy: float
    cx: float
    ry: float
    rx: float
    amplitude: float


@dataclass(frozen=True)
class PlateauParams:
    cy: float
    cx: float
    ey: float
    ex: float
    angle: float
    amplitude: float
    slant_y: float
    slant_x: float
    edge_frac: float


@dataclass(frozen=True)
class SceneParams:
    """Everything needed to evaluate a scene at arbitrary coordinates."""

    height: int
    width: int
    ground: tuple  # (g0, gy, gx): depth = g0 + gy * y + gx * x
    domes: tuple
    plateaus: tuple
    tex_amps: np.ndarray
    tex_freqs: np.ndarray  # (k, 2) cycles per pixel along (y, x)
    tex_phases: np.ndarray
    light: np.ndarray  # unit 3-vector (x, y, z), z toward the camera
    base_color: np.ndarray  # (3,)
    atten: float
    edge_gain: float
    edge_thresh: float


@dataclass(frozen=True)
class SceneSample:
    rgb: DenseMap
    depth: DenseMap
    disparity: DenseMap
    normal: DenseMap
    edge: DenseMap
    scene_seed: int
    params: SceneParams


def _dome_height(p: DomeParams, yy, xx):
    qy = (yy - p.cy) / p.ry
    qx = (xx - p.cx) / p.rx
    q = qy * qy + qx * qx
    inside = np.maximum(0.0, 1.0 - q)
    h = p.amplitude * inside * inside
    common = -4.0 * p.amplitude * inside
    return h, common * qy / p.ry, common * qx / p.rx


def _smoothstep(u):
    u = np.clip(u, 0.0, 1.0)
    return u * u * (3.0 - 2.0 * u), np.where((u > 0.0) & (u < 1.0),
                                             6.0 * u * (1.0 - u), 0.0)


def _plateau_height(p: PlateauParams, yy, xx):
    c, s = np.cos(p.angle), np.sin(p.angle)
    dy, dx = yy - p.cy, xx - p.cx
    ly = c * dy + s * dx
    lx = -s * dy + c * dx
    top = p.amplitude + p.slant_y * ly + p.slant_x * lx

    def axis_profile(l, e):
        r = np.abs(l) / e
        u = (1.0 - r) / p.edge_frac
        val, dval = _smoothstep(u)
        # d/dl = dval * (-sign(l) / (e * edge_frac))
        return val, dval * (-np.sign(l) / (e * p.edge_frac))

    py, dpy = axis_profile(ly, p.ey)
    px, dpx = axis_profile(lx, p.ex)
    h = top * py * px
    dh_ly = p.slant_y * py * px + top * dpy * px
    dh_lx = p.slant_x * py * px + top * py * dpx
    # Rotate gradients back to frame coordinates.
    dh_dy = dh_ly * c - dh_lx * s
    dh_dx = dh_ly * s + dh_lx * c
    return h, dh_dy, dh_dx


def render_fields(params: SceneParams, ys: np.ndarray, xs: np.ndarray) -> dict:
    """Evaluate all scene fields on the grid ``ys x xs``.

    Coordinates are continuous, in pixel units of the base frame
    (integer coordinates are pixel centers). Returns float64 arrays:
    depth (m, n), disparity, normal (m, n, 3), rgb, edge.
    """
    yy, xx = np.meshgrid(np.asarray(ys, dtype=np.float64),
                         np.asarray(xs, dtype=np.float64), indexing="ij")
    g0, gy, gx = params.ground
    shape = yy.shape

    heights = [np.zeros(shape)]
    grads_y = [np.zeros(shape)]
    grads_x = [np.zeros(shape)]
    for dome in params.domes:
        h, dhy, dhx = _dome_height(dome, yy, xx)
        heights.append(h)
        grads_y.append(dhy)
        grads_x.append(dhx)
    for plat in params.plateaus:
        h, dhy, dhx = _plateau_height(plat, yy, xx)
        heights.append(h)
        grads_y.append(dhy)
        grads_x.append(dhx)
    stack = np.stack(heights)
    winner = np.argmax(stack, axis=0)
    relief = np.take_along_axis(stack, winner[None], axis=0)[0]
    rel_dy = np.take_along_axis(np.stack(grads_y), winner[None], axis=0)[0]
    rel_dx = np.take_along_axis(np.stack(grads_x), winner[None], axis=0)[0]

    depth = g0 + gy * yy + gx * xx - relief
    d_dy = gy - rel_dy
    d_dx = gx - rel_dx

    normal = np.stack([-d_dx, -d_dy, np.ones(shape)], axis=-1)
    normal = normal / np.linalg.norm(normal, axis=-1, keepdims=True)

    tex = np.full(shape, 0.5)
    tex_dy = np.zeros(shape)
    tex_dx = np.zeros(shape)
    for a, (fy, fx), ph in zip(params.tex_amps, params.tex_freqs,
                               params.tex_phases):
        arg = 2.0 * np.pi * (fy * yy + fx * xx) + ph
        tex += a * np.sin(arg)
        tex_dy += a * 2.0 * np.pi * fy * np.cos(arg)
        tex_dx += a * 2.0 * np.pi * fx * np.cos(arg)

    shade = np.maximum(0.0, normal @ params.light)
    atten = 1.0 / (1.0 + params.atten * (depth - DEPTH_RANGE[0]))
    lum = tex * (0.3 + 0.7 * shade) * atten
    rgb = lum[..., None] * params.base_color

    grad_mag = np.hypot(tex_dy, tex_dx)
    edge_logit = params.edge_gain * (grad_mag - params.edge_thresh)
    edge = np.empty(shape)
    pos = edge_logit >= 0
    edge[pos] = 1.0 / (1.0 + np.exp(-edge_logit[pos]))
    ez = np.exp(edge_logit[~pos])
    edge[~pos] = ez / (1.0 + ez)

    return {
        "depth": depth,
        "disparity": 1.0 / depth,
        "normal": normal,
        "rgb": rgb,
        "edge": edge,
    }


def render_crop(params: SceneParams, t: CropTransform) -> dict:
    """Re-render the scene on the sub-pixel grid addressed by a crop.

    This is the reference for ground-truth equivariance: it must agree
    with resampling the full-frame maps through the same transform, up
    to bilinear interpolation error.
    """
    ys = t.y0 + (np.arange(t.out_h) + 0.5) * t.scale_y - 0.5
    xs = t.x0 + (np.arange(t.out_w) + 0.5) * t.scale_x - 0.5
    return render_fields(params, ys, xs)


def _draw_params(seed: int, h: int, w: int, complexity: int) -> SceneParams:
    rng = np.random.default_rng(seed)
    scale = min(h, w)
    g0 = rng.uniform(6.5, 8.0)
    # Total tilt across the frame is resolution independent.
    gy = rng.uniform(0.5, 1.3) / h * rng.choice([-1.0, 1.0])
    gx = rng.uniform(0.5, 1.3) / w * rng.choice([-1.0, 1.0])

    domes: list[DomeParams] = []
    plateaus: list[PlateauParams] = []
    placed: list[tuple[float, float, float]] = []

    def try_place(ry, rx):
        for _ in range(40):
            cy = rng.uniform(0.15 * h, 0.85 * h)
            cx = rng.uniform(0.15 * w, 0.85 * w)
            r = max(ry, rx)
            if all(np.hypot(cy - oy, cx - ox) > 1.15 * (r + orad)
                   for oy, ox, orad in placed):
                placed.append((cy, cx, r))
                return cy, cx
        return None

    for _ in range(complexity):
        if rng.uniform() < 0.5:
            ry = rng.uniform(0.2, 0.3) * scale
            rx = rng.uniform(0.2, 0.3) * scale
            spot = try_place(ry, rx)
            if spot is None:
                continue
            domes.append(DomeParams(spot[0], spot[1], ry, rx,
                                    amplitude=rng.uniform(0.5, 1.1)))
        else:
            ey = rng.uniform(0.18, 0.28) * scale
            ex = rng.uniform(0.18, 0.28) * scale
            spot = try_place(ey, ex)
            if spot is None:
                continue
            amp = rng.uniform(0.4, 0.8)
            slant = 0.3 * amp / max(ey, ex)
            plateaus.append(
                PlateauParams(
                    spot[0], spot[1], ey, ex,
                    angle=rng.uniform(0.0, np.pi),
                    amplitude=amp,
                    slant_y=rng.uniform(-slant, slant),
                    slant_x=rng.uniform(-slant, slant),
                    edge_frac=0.7,
                )
            )

    k = 3
    freqs = rng.uniform(0.6, 2.6, (k, 2)) / scale
    signs = rng.choice([-1.0, 1.0], (k, 2))
    tilt = rng.uniform(0.25, 0.5)
    azim = rng.uniform(0.0, 2.0 * np.pi)
    light = np.array([
        np.sin(tilt) * np.cos(azim),
        np.sin(tilt) * np.sin(azim),
        np.cos(tilt),
    ])
    return SceneParams(
        height=h,
        width=w,
        ground=(g0, gy, gx),
        domes=tuple(domes),
        plateaus=tuple(plateaus),
        tex_amps=rng.uniform(0.06, 0.12, k),
        tex_freqs=freqs * signs,
        tex_phases=rng.uniform(0.0, 2.0 * np.pi, k),
        light=light / np.linalg.norm(light),
        base_color=rng.uniform(0.45, 0.8, 3),
        atten=0.08,
        edge_gain=200.0,
        edge_thresh=0.02,
    )


def _quantize(values: np.ndarray) -> np.ndarray:
    return values.astype(np.float32).astype(np.float64)


def gen_scene(seed: int, h: int = 64, w: int = 64, complexity: int = 3) -> SceneSample:
    """Deterministically generate one scene with full ground truth.

    All maps are produced on the float32 grid so that file round trips
    are bit exact. ``complexity`` counts the raised primitives attempted
    over the ground plane; 0 gives a bare tilted plane.
    """
    if h < 16 or w < 16:
        raise ConstraintError(f"scene size {h}x{w} below minimum 16x16")
    if complexity < 0:
        raise ConstraintError("complexity must be >= 0")
    params = _draw_params(seed, h, w, complexity)
    fields = render_fields(params, np.arange(h), np.arange(w))
    depth = _quantize(fields["depth"][..., None])
    sample = SceneSample(
        rgb=DenseMap(_quantize(np.clip(fields["rgb"], 0.0, 1.0)), Semantics.RGB),
        depth=DenseMap(depth, Semantics.DEPTH),
        disparity=DenseMap(_quantize(fields["disparity"][..., None]),
                           Semantics.DISPARITY),
        normal=DenseMap(_quantize(fields["normal"]), Semantics.NORMAL),
        edge=DenseMap(_quantize(fields["edge"][..., None]), Semantics.EDGE),
        scene_seed=seed,
        params=params,
    )
    sample.depth.validate()
    sample.normal.validate()
    return sample


def write_map(m: DenseMap, path) -> None:
    """Persist a map as a DMAP file (float32 payload, CRC trailer).

    Values are quantized to float32. Maps carrying a partial validity
    mask are rejected: the format stores no mask channel, so writing one
    would silently drop information.
    """
    mask = m.validity_mask
    if mask is not None and not mask.all():
        raise MapFormatError("cannot persist a partially masked map")
    body = bytearray()
    body += MAP_MAGIC
    body += struct.pack("<IIII", MAP_VERSION, m.height, m.width, m.channels)
    body += struct.pack("<BB", _SEMANTICS_CODES[m.semantics], 0)
    body += np.ascontiguousarray(m.values, dtype="<f4").tobytes()
    body += struct.pack("<I", zlib.crc32(bytes(body)) & 0xFFFFFFFF)
    with open(path, "wb") as fh:
        fh.write(bytes(body))


def read_map(path) -> DenseMap:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 26 or blob[:4] != MAP_MAGIC:
        raise MapFormatError(f"{path}: not a DMAP file (bad magic)")
    (crc,) = struct.unpack_from("<I", blob, len(blob) - 4)
    if zlib.crc32(blob[:-4]) & 0xFFFFFFFF != crc:
        raise MapFormatError(f"{path}: checksum mismatch")
    version, h, w, c = struct.unpack_from("<IIII", blob, 4)
    if version != MAP_VERSION:
        raise MapFormatError(f"{path}: unsupported version {version}")
    sem_code, dtype_code = struct.unpack_from("<BB", blob, 20)
    if sem_code not in _CODES_SEMANTICS:
        raise MapFormatError(f"{path}: unknown semantics code {sem_code}")
    if dtype_code != 0:
        raise MapFormatError(f"{path}: unsupported dtype code {dtype_code}")
    expected = 22 + 4 * h * w * c + 4
    if len(blob) != expected:
        raise MapFormatError(
            f"{path}: truncated payload ({len(blob)} bytes, expected {expected})"
        )
    values = np.frombuffer(blob[22:-4], dtype="<f4").astype(np.float64)
    return DenseMap(values.reshape(h, w, c), _CODES_SEMANTICS[sem_code])


@dataclass(frozen=True)
class DatasetManifest:
    """One split of a generated dataset."""

    root: Path
    split: str
    ids: tuple
    header: dict

    @property
    def directory(self) -> Path:
        return Path(self.root) / self.split

    def map_path(self, sample_id: str, kind: str) -> Path:
        if kind not in MAP_KINDS:
            raise ConstraintError(f"unknown map kind {kind!r}")
        return self.directory / f"{sample_id}_{kind}.dmap"

    def seed_of(self, sample_id: str) -> int:
        return int(sample_id.removeprefix("scene"))


def _manifest_lines(manifest: DatasetManifest) -> str:
    lines = [f"{k}={v}" for k, v in manifest.header.items()]
    lines.extend(manifest.ids)
    return "\n".join(lines) + "\n"


def write_manifest(manifest: DatasetManifest) -> None:
    (manifest.directory / MANIFEST_NAME).write_text(_manifest_lines(manifest))


def read_manifest(directory) -> DatasetManifest:
    directory = Path(directory)
    path = directory / MANIFEST_NAME
    header = {}
    ids = []
    for line in path.read_text().splitlines():
        line = line.strip()
        if not line:
            continue
        if "=" in line:
            key, _, value = line.partition("=")
            header[key] = value
        else:
            ids.append(line)
    if header.get("format_version") != str(MANIFEST_VERSION):
        raise MapFormatError(
            f"{path}: manifest version {header.get('format_version')!r}, "
            f"expected {MANIFEST_VERSION}"
        )
    if len(set(ids)) != len(ids):
        raise MapFormatError(f"{path}: duplicate sample ids")
    return DatasetManifest(
        root=directory.parent, split=header.get("split", directory.name),
        ids=tuple(ids), header=header,
    )


def load_scene_maps(manifest: DatasetManifest, sample_id: str) -> dict:
    """Read all ground-truth maps of one sample."""
    return {kind: read_map(manifest.map_path(sample_id, kind))
            for kind in MAP_KINDS}


def load_rgb_only(manifest: DatasetManifest, sample_id: str) -> DenseMap:
    """Read just the input image.

    The unsupervised finetuning loader goes through this function and
    nothing else, which is what guarantees it never touches ground truth.
    """
    return read_map(manifest.map_path(sample_id, "rgb"))


@contextmanager
def _dataset_lock(root: Path):
    root.mkdir(parents=True, exist_ok=True)
    with open(root / ".lock", "w") as fh:
        fcntl.flock(fh, fcntl.LOCK_EX)
        try:
            yield
        finally:
            fcntl.flock(fh, fcntl.LOCK_UN)


def _write_split(
    root: Path, split: str, seeds: Iterable[int], h: int, w: int,
    complexity: int,
) -> DatasetManifest:
    directory = root / split
    directory.mkdir(parents=True, exist_ok=True)
    ids = []
    for seed in seeds:
        sample = gen_scene(seed, h, w, complexity)
        sample_id = f"scene{seed:07d}"
        for kind in MAP_KINDS:
            write_map(getattr(sample, kind), directory / f"{sample_id}_{kind}.dmap")
        ids.append(sample_id)
    manifest = DatasetManifest(
        root=root, split=split, ids=tuple(ids),
        header={
            "format_version": str(MANIFEST_VERSION),
            "split": split,
            "height": str(h),
            "width": str(w),
            "complexity": str(complexity),
            "count": str(len(ids)),
        },
    )
    write_manifest(manifest)
    return manifest


def build_dataset(
    root,
    n_train: int,
    n_val: int,
    h: int = 64,
    w: int = 64,
    complexity: int = 3,
    seed_base: int = 0,
    force: bool = False,
) -> tuple[DatasetManifest, DatasetManifest]:
    """Generate a train/val dataset under ``root``.

    Train scenes use seeds ``seed_base ..`` and validation scenes start
    at ``seed_base + VAL_SEED_STRIDE``, so the splits can never share a
    scene. An existing non-empty root is refused unless ``force`` is set.
    Regenerating with identical arguments reproduces identical bytes.
    """
    if n_train < 1 or n_val < 1:
        raise ConstraintError("need at least one sample per split")
    if n_train > VAL_SEED_STRIDE:
        raise ConstraintError("train split too large for the seed layout")
    root = Path(root)
    if root.exists() and any(root.iterdir()) and not force:
        raise DatasetCollisionError(
            f"{root} already contains files; pass force to overwrite"
        )
    with _dataset_lock(root):
        train = _write_split(
            root, "train", range(seed_base, seed_base + n_train), h, w, complexity
        )
        val_base = seed_base + VAL_SEED_STRIDE
        val = _write_split(
            root, "val", range(val_base, val_base + n_val), h, w, complexity
        )
    return train, val
