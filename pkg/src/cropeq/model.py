"""Small encoder-decoder dense predictor with analytic gradients.

The network is a plain U-Net built from 3x3 convolutions:

* a stem conv at full resolution,
* ``depth_blocks`` stride-2 encoder convs doubling channels,
* a bottleneck conv,
* ``depth_blocks`` decoder stages (fixed 2x bilinear upsample, concat of
  the matching encoder activation, merge conv),
* a feature conv producing the penultimate ``feature_channels``-wide map
  (the "L-1" attachment point for feature-space losses),
* a head conv mapping features to task channels through an output
  activation (softplus / sigmoid / linear).

Everything runs in float64 on HWC (or NHWC) arrays. Forward records an
activation tape; backward consumes it and returns a flat parameter
gradient plus the input gradient. Gradients can be injected at the output
and at a captured inner layer simultaneously, which is how a task loss
and a feature-space consistency loss share one backward pass.

Parameter count is closed-form: each 3x3 conv from ``ci`` to ``co``
channels contributes ``9*ci*co + co``, and ``PredictorNetConfig.param_count``
sums this over the conv plan.

Checkpoints use a small binary container (magic ``EQVN``): a JSON header
describing the architecture, the parameter vector quantized to little
endian float32, an optional optimizer block kept in float64, and a CRC32
trailer. Fresh nets are initialized on the float32 grid so a save/load
round trip is bit exact; for trained nets the save quantizes once and is
stable from then on (save -> load -> save reproduces identical bytes).
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass
from typing import NamedTuple, Optional, Union

import numpy as np

from .errors import (
    ArchitectureMismatchError,
    CheckpointFormatError,
    CheckpointVersionError,
    ShapeError,
    TapeError,
)
from .geometry import DenseMap, Semantics

CHECKPOINT_MAGIC = b"EQVN"
CHECKPOINT_VERSION = 1

_KERNEL = 3
_LEAKY_SLOPE = 0.2


class ConvSpec(NamedTuple):
    """One 3x3 conv layer in the execution plan."""

    name: str
    cin: int
    cout: int
    stride: int
    activation: str


@dataclass(frozen=True)
class PredictorNetConfig:
    """Architecture hyperparameters.

    Attributes
    ----------
    in_channels, out_channels:
        Task input and output widths (RGB in, 1 for disparity/edge,
        3 for normals).
    base_channels:
        Width after the stem; doubles at each encoder stage.
    depth_blocks:
        Number of stride-2 encoder stages (and matching decoder stages).
        Inputs must be divisible by ``2 ** depth_blocks``.
    feature_channels:
        Width of the penultimate feature map (the "L-1" capture layer).
    out_activation:
        "softplus" (positive outputs, disparity), "sigmoid" (edge
        probabilities) or "linear".
    out_semantics:
        Semantics tag stamped on the output map.
    coord_features:
        Append two normalized coordinate channels to the input. This
        deliberately breaks crop equivariance and is how position-biased
        teacher nets are built for the finetuning experiments.
    """

    in_channels: int = 3
    out_channels: int = 1
    base_channels: int = 16
    depth_blocks: int = 3
    feature_channels: int = 16
    out_activation: str = "softplus"
    out_semantics: str = "disparity"
    coord_features: bool = False

    def __post_init__(self) -> None:
        if self.depth_blocks < 1:
            raise ShapeError("depth_blocks must be >= 1")
        if self.out_activation not in ("softplus", "sigmoid", "linear"):
            raise ShapeError(f"unknown out_activation {self.out_activation!r}")
        Semantics(self.out_semantics)

    @property
    def effective_in_channels(self) -> int:
        return self.in_channels + (2 if self.coord_features else 0)

    def conv_plan(self) -> list[ConvSpec]:
        b, d = self.base_channels, self.depth_blocks
        plan = [ConvSpec("stem", self.effective_in_channels, b, 1, "leaky")]
        for i in range(d):
            plan.append(ConvSpec(f"down{i}", b << i, b << (i + 1), 2, "leaky"))
        plan.append(ConvSpec("bottleneck", b << d, b << d, 1, "leaky"))
        for i in reversed(range(d)):
            plan.append(
                ConvSpec(f"up{i}", (b << (i + 1)) + (b << i), b << i, 1, "relu")
            )
        plan.append(ConvSpec("features", b, self.feature_channels, 1, "relu"))
        plan.append(
            ConvSpec(
                "head", self.feature_channels, self.out_channels, 1,
                self.out_activation,
            )
        )
        return plan

    def param_count(self) -> int:
        return sum(9 * s.cin * s.cout + s.cout for s in self.conv_plan())

    def capture_names(self) -> tuple[str, ...]:
        ups = tuple(f"up{i}" for i in range(self.depth_blocks))
        return ("L", "L-1") + ups

    def to_json(self) -> str:
        return json.dumps(
            {
                "in_channels": self.in_channels,
                "out_channels": self.out_channels,
                "base_channels": self.base_channels,
                "depth_blocks": self.depth_blocks,
                "feature_channels": self.feature_channels,
                "out_activation": self.out_activation,
                "out_semantics": self.out_semantics,
                "coord_features": self.coord_features,
            },
            sort_keys=True,
        )

    @staticmethod
    def from_json(text: str) -> "PredictorNetConfig":
        return PredictorNetConfig(**json.loads(text))


def _act_forward(z: np.ndarray, kind: str) -> np.ndarray:
    if kind == "leaky":
        return np.where(z > 0.0, z, _LEAKY_SLOPE * z)
    if kind == "relu":
        return np.maximum(z, 0.0)
    if kind == "softplus":
        return np.logaddexp(0.0, z)
    if kind == "sigmoid":
        out = np.empty_like(z)
        pos = z >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
        ez = np.exp(z[~pos])
        out[~pos] = ez / (1.0 + ez)
        return out
    if kind == "linear":
        return z
    raise ShapeError(f"unknown activation {kind!r}")


def _act_backward(g: np.ndarray, z: np.ndarray, kind: str) -> np.ndarray:
    if kind == "leaky":
        return g * np.where(z > 0.0, 1.0, _LEAKY_SLOPE)
    if kind == "relu":
        return g * (z > 0.0)
    if kind == "softplus":
        return g * _act_forward(z, "sigmoid")
    if kind == "sigmoid":
        s = _act_forward(z, "sigmoid")
        return g * s * (1.0 - s)
    if kind == "linear":
        return g
    raise ShapeError(f"unknown activation {kind!r}")


def _conv3x3_forward(
    x: np.ndarray, w: np.ndarray, b: np.ndarray, stride: int
) -> np.ndarray:
    """x: (N, H, W, Ci); w: (3, 3, Ci, Co); b: (Co,)."""
    n, h, wd, ci = x.shape
    co = w.shape[-1]
    oh, ow = h // stride, wd // stride
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    out = np.zeros((n, oh, ow, co))
    for ky in range(_KERNEL):
        for kx in range(_KERNEL):
            view = xp[:, ky : ky + stride * oh : stride,
                      kx : kx + stride * ow : stride, :]
            out += view.reshape(-1, ci).dot(w[ky, kx]).reshape(n, oh, ow, co)
    return out + b


def _conv3x3_backward(
    x: np.ndarray, w: np.ndarray, g: np.ndarray, stride: int
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Returns (grad_w, grad_b, grad_x) for _conv3x3_forward."""
    n, h, wd, ci = x.shape
    co = w.shape[-1]
    oh, ow = g.shape[1], g.shape[2]
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    gxp = np.zeros_like(xp)
    gw = np.zeros_like(w)
    gflat = g.reshape(-1, co)
    for ky in range(_KERNEL):
        for kx in range(_KERNEL):
            view = xp[:, ky : ky + stride * oh : stride,
                      kx : kx + stride * ow : stride, :]
            gw[ky, kx] = view.reshape(-1, ci).T.dot(gflat)
            gxp[:, ky : ky + stride * oh : stride,
                kx : kx + stride * ow : stride, :] += (
                gflat.dot(w[ky, kx].T).reshape(n, oh, ow, ci)
            )
    gb = gflat.sum(axis=0)
    return gw, gb, gxp[:, 1:-1, 1:-1, :]


def _up_axis_taps(n: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Clamped bilinear taps for a fixed 2x upsample along one axis."""
    pos = (np.arange(2 * n) + 0.5) / 2.0 - 0.5
    pos = np.clip(pos, 0.0, float(n - 1))
    lo = np.minimum(np.floor(pos).astype(np.int64), max(n - 2, 0))
    hi = np.minimum(lo + 1, n - 1)
    return lo, hi, pos - lo


def upsample2x(x: np.ndarray) -> np.ndarray:
    """Fixed 2x bilinear upsampling with edge clamping, (N, H, W, C) in."""
    n, h, w = x.shape[:3]
    lo, hi, f = _up_axis_taps(h)
    x = x[:, lo] * (1.0 - f)[None, :, None, None] + x[:, hi] * f[None, :, None, None]
    lo, hi, f = _up_axis_taps(w)
    return (
        x[:, :, lo] * (1.0 - f)[None, None, :, None]
        + x[:, :, hi] * f[None, None, :, None]
    )


def upsample2x_transpose(g: np.ndarray) -> np.ndarray:
    """Exact adjoint of :func:`upsample2x`; (N, 2H, 2W, C) -> (N, H, W, C)."""
    n, h2, w2, c = g.shape
    h, w = h2 // 2, w2 // 2
    lo, hi, f = _up_axis_taps(w)
    acc = np.zeros((n, h2, w, c))
    np.add.at(acc, (slice(None), slice(None), lo), g * (1.0 - f)[None, None, :, None])
    np.add.at(acc, (slice(None), slice(None), hi), g * f[None, None, :, None])
    lo, hi, f = _up_axis_taps(h)
    out = np.zeros((n, h, w, c))
    np.add.at(out, (slice(None), lo), acc * (1.0 - f)[None, :, None, None])
    np.add.at(out, (slice(None), hi), acc * f[None, :, None, None])
    return out


@dataclass
class ActivationTape:
    """Forward-pass record consumed by backward.

    Invalidated whenever the owning net's parameters change.
    """

    version: int
    batched_input: bool
    input_with_coords: np.ndarray
    conv_inputs: dict
    pre_activations: dict
    skip_channels: list
    capture: Optional[str]
    output_pre: np.ndarray


class PredictorNet:
    """U-Net predictor over a flat float64 parameter vector."""

    def __init__(self, config: PredictorNetConfig, params: np.ndarray):
        expected = config.param_count()
        if params.shape != (expected,):
            raise ArchitectureMismatchError(
                f"parameter vector has {params.shape[0]} entries, "
                f"architecture needs {expected}"
            )
        if not np.all(np.isfinite(params)):
            raise ArchitectureMismatchError("non-finite parameters")
        self.config = config
        self.params = params.astype(np.float64)
        self.version = 0
        self._offsets = {}
        off = 0
        for spec in config.conv_plan():
            wsize = 9 * spec.cin * spec.cout
            self._offsets[spec.name] = (off, off + wsize, off + wsize + spec.cout)
            off = off + wsize + spec.cout

    @classmethod
    def create(cls, config: PredictorNetConfig, seed: int = 0) -> "PredictorNet":
        """Fan-in-scaled uniform init, seeded, snapped to the float32 grid."""
        rng = np.random.default_rng(seed)
        chunks = []
        for spec in config.conv_plan():
            fan_in = 9 * spec.cin
            limit = float(np.sqrt(1.0 / fan_in))
            chunks.append(rng.uniform(-limit, limit, 9 * spec.cin * spec.cout))
            chunks.append(rng.uniform(-limit, limit, spec.cout))
        params = np.concatenate(chunks).astype(np.float32).astype(np.float64)
        return cls(config, params)

    def weight(self, name: str) -> np.ndarray:
        w0, w1, _ = self._offsets[name]
        spec = next(s for s in self.config.conv_plan() if s.name == name)
        return self.params[w0:w1].reshape(_KERNEL, _KERNEL, spec.cin, spec.cout)

    def bias(self, name: str) -> np.ndarray:
        _, w1, b1 = self._offsets[name]
        return self.params[w1:b1]

    def set_params(self, params: np.ndarray) -> None:
        if params.shape != self.params.shape:
            raise ArchitectureMismatchError("parameter vector shape changed")
        self.params = params.astype(np.float64)
        self.version += 1

    def _coords(self, n: int, h: int, w: int) -> np.ndarray:
        yy = ((np.arange(h) + 0.5) / h * 2.0 - 1.0)[None, :, None, None]
        xx = ((np.arange(w) + 0.5) / w * 2.0 - 1.0)[None, None, :, None]
        grid = np.concatenate(
            [np.broadcast_to(yy, (n, h, w, 1)), np.broadcast_to(xx, (n, h, w, 1))],
            axis=-1,
        )
        return grid

    def _check_spatial(self, h: int, w: int) -> None:
        mult = 1 << self.config.depth_blocks
        if h % mult or w % mult:
            raise ShapeError(
                f"input {h}x{w} not divisible by {mult} "
                f"(required for {self.config.depth_blocks} down stages)"
            )

    def forward(
        self,
        x: Union[DenseMap, np.ndarray],
        capture: Optional[str] = None,
    ):
        """Run the net.

        Parameters
        ----------
        x:
            A DenseMap or an HWC / NHWC float array.
        capture:
            None, "L" (the output itself), "L-1" (penultimate features)
            or "up<i>" (decoder stage i activation).

        Returns
        -------
        (output, captured, tape); output and captured mirror the input
        container (DenseMap in, DenseMap out).
        """
        if capture is not None and capture not in self.config.capture_names():
            raise ShapeError(
                f"unknown capture layer {capture!r}; "
                f"options: {self.config.capture_names()}"
            )
        is_map = isinstance(x, DenseMap)
        arr = x.values if is_map else np.asarray(x, dtype=np.float64)
        batched = arr.ndim == 4
        x4 = arr if batched else arr[None]
        n, h, w, ci = x4.shape
        if ci != self.config.in_channels:
            raise ShapeError(
                f"input has {ci} channels, net expects {self.config.in_channels}"
            )
        self._check_spatial(h, w)
        if self.config.coord_features:
            x4 = np.concatenate([x4, self._coords(n, h, w)], axis=-1)

        conv_inputs = {}
        pre_acts = {}
        skips = []
        a = x4
        for spec in self.config.conv_plan():
            if spec.name.startswith("down"):
                skips.append(a)
            if spec.name.startswith("up"):
                i = int(spec.name[2:])
                up = upsample2x(a)
                a = np.concatenate([up, skips[i]], axis=-1)
            conv_inputs[spec.name] = a
            z = _conv3x3_forward(a, self.weight(spec.name), self.bias(spec.name),
                                 spec.stride)
            pre_acts[spec.name] = z
            a = _act_forward(z, spec.activation)
            if spec.name == "features":
                captured_arr = a
            if capture is not None and capture == spec.name:
                captured_at = a
        out4 = a
        if capture == "L":
            captured4 = out4
        elif capture == "L-1":
            captured4 = captured_arr
        elif capture is not None:
            captured4 = captured_at
        else:
            captured4 = None

        tape = ActivationTape(
            version=self.version,
            batched_input=batched,
            input_with_coords=x4,
            conv_inputs=conv_inputs,
            pre_activations=pre_acts,
            skip_channels=[s.shape[-1] for s in skips],
            capture=capture,
            output_pre=pre_acts["head"],
        )

        def pack(values4, semantics):
            if not batched:
                values4 = values4[0]
            if is_map and not batched:
                return DenseMap(values=values4, semantics=semantics)
            return values4

        out = pack(out4, Semantics(self.config.out_semantics))
        cap = None
        if captured4 is not None:
            cap = pack(captured4, Semantics.FEATURE)
        return out, cap, tape

    def backward(
        self,
        tape: ActivationTape,
        grad_output: Union[DenseMap, np.ndarray],
        grad_captured: Optional[Union[DenseMap, np.ndarray]] = None,
    ) -> tuple[np.ndarray, np.ndarray]:
        """Backpropagate through a recorded forward pass.

        grad_output is the gradient at the post-activation output;
        grad_captured, if given, is added at the captured layer. Returns
        (flat parameter gradient, input gradient).
        """
        if tape.version != self.version:
            raise TapeError(
                "tape recorded for parameter version "
                f"{tape.version}, net is at {self.version}"
            )
        g = grad_output.values if isinstance(grad_output, DenseMap) else (
            np.asarray(grad_output, dtype=np.float64)
        )
        if g.ndim == 3:
            g = g[None]
        gc = None
        if grad_captured is not None:
            if tape.capture is None:
                raise TapeError("grad_captured given but forward captured nothing")
            gc = grad_captured.values if isinstance(grad_captured, DenseMap) else (
                np.asarray(grad_captured, dtype=np.float64)
            )
            if gc.ndim == 3:
                gc = gc[None]
        if tape.capture == "L" and gc is not None:
            g = g + gc
            gc = None

        plan = self.config.conv_plan()
        grads = np.zeros_like(self.params)
        skip_grads = {}
        for spec in reversed(plan):
            if gc is not None and (
                (tape.capture == "L-1" and spec.name == "features")
                or tape.capture == spec.name
            ):
                g = g + gc
                gc = None
            g = _act_backward(g, tape.pre_activations[spec.name], spec.activation)
            gw, gb, g = _conv3x3_backward(
                tape.conv_inputs[spec.name], self.weight(spec.name), g, spec.stride
            )
            w0, w1, b1 = self._offsets[spec.name]
            grads[w0:w1] = gw.ravel()
            grads[w1:b1] = gb
            if spec.name.startswith("up"):
                i = int(spec.name[2:])
                ch_up = g.shape[-1] - tape.skip_channels[i]
                skip_grads[i] = g[..., ch_up:]
                g = upsample2x_transpose(g[..., :ch_up])
            if spec.name.startswith("down"):
                i = int(spec.name[4:])
                g = g + skip_grads[i]
        gin = g[..., : self.config.in_channels]
        if not tape.batched_input:
            gin = gin[0]
        return grads, gin


def predictor_fn(net: PredictorNet):
    """Wrap a net as a (crop, transform) -> DenseMap predictor.

    The transform argument exists so lookup-style oracle predictors can
    share the interface; a real net ignores it.
    """

    def f(crop: DenseMap, transform=None) -> DenseMap:
        out, _, _ = net.forward(crop)
        return out

    return f


def save_checkpoint(
    net: PredictorNet,
    path,
    step: int = 0,
    optimizer_state: Optional[tuple[np.ndarray, np.ndarray, int]] = None,
    rng_state: Optional[dict] = None,
) -> None:
    """Serialize a net (and optionally AdamW moments) to ``path``."""
    header = {
        "architecture": json.loads(net.config.to_json()),
        "step": int(step),
        "rng_state": rng_state,
    }
    hbytes = json.dumps(header, sort_keys=True).encode()
    body = bytearray()
    body += CHECKPOINT_MAGIC
    body += struct.pack("<I", CHECKPOINT_VERSION)
    body += struct.pack("<I", len(hbytes)) + hbytes
    pblock = net.params.astype("<f4").tobytes()
    body += struct.pack("<I", net.params.size) + pblock
    if optimizer_state is None:
        body += struct.pack("<B", 0)
    else:
        m, v, t = optimizer_state
        if m.shape != net.params.shape or v.shape != net.params.shape:
            raise ArchitectureMismatchError("optimizer moments do not match params")
        body += struct.pack("<B", 1)
        body += struct.pack("<Q", int(t))
        body += m.astype("<f8").tobytes()
        body += v.astype("<f8").tobytes()
    crc = zlib.crc32(bytes(body)) & 0xFFFFFFFF
    body += struct.pack("<I", crc)
    with open(path, "wb") as fh:
        fh.write(bytes(body))


def load_checkpoint(
    path,
    expect: Optional[PredictorNetConfig] = None,
):
    """Load a checkpoint written by :func:`save_checkpoint`.

    Returns (net, step, optimizer_state_or_None, rng_state_or_None).
    Raises CheckpointFormatError on corruption, CheckpointVersionError on
    unknown versions and ArchitectureMismatchError when ``expect`` is
    given and differs from the stored architecture.
    """
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 12 or blob[:4] != CHECKPOINT_MAGIC:
        raise CheckpointFormatError(f"{path}: not a checkpoint (bad magic)")
    stored_crc = struct.unpack("<I", blob[-4:])[0]
    if zlib.crc32(blob[:-4]) & 0xFFFFFFFF != stored_crc:
        raise CheckpointFormatError(f"{path}: checksum mismatch")
    off = 4
    (version,) = struct.unpack_from("<I", blob, off)
    off += 4
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(
            f"{path}: version {version}, supported {CHECKPOINT_VERSION}"
        )
    (hlen,) = struct.unpack_from("<I", blob, off)
    off += 4
    try:
        header = json.loads(blob[off : off + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointFormatError(f"{path}: bad header ({exc})") from exc
    off += hlen
    config = PredictorNetConfig(**header["architecture"])
    if expect is not None and expect != config:
        raise ArchitectureMismatchError(
            f"{path}: stored architecture {config} differs from expected {expect}"
        )
    (n,) = struct.unpack_from("<I", blob, off)
    off += 4
    if n != config.param_count():
        raise CheckpointFormatError(
            f"{path}: parameter block has {n} entries, "
            f"architecture needs {config.param_count()}"
        )
    end = off + 4 * n
    if end > len(blob) - 5:
        raise CheckpointFormatError(f"{path}: truncated parameter block")
    params = np.frombuffer(blob[off:end], dtype="<f4").astype(np.float64)
    off = end
    (has_opt,) = struct.unpack_from("<B", blob, off)
    off += 1
    opt_state = None
    if has_opt:
        if off + 8 + 16 * n > len(blob) - 4:
            raise CheckpointFormatError(f"{path}: truncated optimizer block")
        (t,) = struct.unpack_from("<Q", blob, off)
        off += 8
        m = np.frombuffer(blob[off : off + 8 * n], dtype="<f8").copy()
        off += 8 * n
        v = np.frombuffer(blob[off : off + 8 * n], dtype="<f8").copy()
        off += 8 * n
        opt_state = (m, v, int(t))
    if off != len(blob) - 4:
        raise CheckpointFormatError(f"{path}: trailing bytes")
    net = PredictorNet(config, params)
    return net, int(header.get("step", 0)), opt_state, header.get("rng_state")
