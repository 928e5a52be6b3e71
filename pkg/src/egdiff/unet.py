"""Conditional noise-prediction network: a small U-Net over the autodiff
engine. The noisy target image and the conditioning source image enter as
two stacked channels; the timestep enters through a sinusoidal embedding
projected into every residual block.

Normalization layers are plain per-channel affine maps (statistics frozen
at mean 0 / variance 1), which keeps every forward pass deterministic and
batch-size independent. Activations are kept channels-last internally;
the public interface is [N,1,H,W] images and [N,C,H,W] feature maps.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, asdict

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class ArchError(ValueError):
    """Invalid architecture configuration."""


class CheckpointError(IOError):
    """Malformed or truncated checkpoint file."""


@dataclass(frozen=True)
class ArchSpec:
    base_channels: int = 16
    channel_multipliers: tuple[int, ...] = (1, 2)
    num_down_levels: int = 2
    time_embed_dim: int = 32
    in_channels: int = 2
    out_channels: int = 1

    def __post_init__(self):
        if len(self.channel_multipliers) != self.num_down_levels:
            raise ArchError(
                "need one channel multiplier per down level, got "
                f"{len(self.channel_multipliers)} for {self.num_down_levels}"
            )
        if self.time_embed_dim % 2:
            raise ArchError("time_embed_dim must be even")
        if self.base_channels < 1 or self.num_down_levels < 1:
            raise ArchError("base_channels and num_down_levels must be >= 1")

    @property
    def level_channels(self) -> list[int]:
        return [self.base_channels * m for m in self.channel_multipliers]

    def check_extent(self, h: int, w: int):
        f = 2 ** self.num_down_levels
        if h % f or w % f:
            raise ArchError(f"extents {(h, w)} not divisible by 2^levels = {f}")


@dataclass
class DenoiserParams:
    """Named learnable weights plus the architecture they belong to."""

    weights: dict[str, Tensor]
    arch: ArchSpec

    def tensors(self) -> list[Tensor]:
        return list(self.weights.values())

    def n_params(self) -> int:
        return sum(t.size for t in self.weights.values())

    @property
    def dtype(self):
        return next(iter(self.weights.values())).dtype


def time_embedding(t: int, dim: int, T: int) -> np.ndarray:
    """Sinusoidal embedding with interleaved sin/cos components.

    Component 2i is sin(t * w_i) and 2i+1 is cos(t * w_i), with
    w_i = 10000 ** (-2i / dim).
    """
    if dim % 2:
        raise ArchError(f"embedding dim must be even, got {dim}")
    if not 0 <= t <= T:
        raise ArchError(f"timestep {t} outside [0, {T}]")
    i = np.arange(dim // 2, dtype=np.float64)
    omega = 10000.0 ** (-2.0 * i / dim)
    emb = np.empty(dim, dtype=np.float64)
    emb[0::2] = np.sin(t * omega)
    emb[1::2] = np.cos(t * omega)
    return emb


# -- parameter construction ---------------------------------------------------


def init_params(arch: ArchSpec, seed: int, dtype=np.float32) -> DenoiserParams:
    """Deterministic fan-in-scaled uniform initialization.

    Conv kernels are stored channels-last as [kh,kw,Cin,Cout]. The output
    convolution starts at zero so an untrained network predicts zero noise.
    """
    rng = np.random.default_rng(seed)
    weights: dict[str, Tensor] = {}

    def _add(name, arr):
        weights[name] = Tensor(np.asarray(arr, dtype=dtype), requires_grad=True)

    def _conv(name, cout, cin, k):
        bound = 1.0 / np.sqrt(cin * k * k)
        _add(name + ".w", rng.uniform(-bound, bound, size=(k, k, cin, cout)))
        _add(name + ".b", np.zeros(cout))

    def _linear(name, dout, din):
        bound = 1.0 / np.sqrt(din)
        _add(name + ".w", rng.uniform(-bound, bound, size=(din, dout)))
        _add(name + ".b", np.zeros(dout))

    def _affine(name, c):
        _add(name + ".g", np.ones(c))
        _add(name + ".s", np.zeros(c))

    def _resblock(name, cin, cout, tdim):
        _affine(name + ".n1", cin)
        _conv(name + ".c1", cout, cin, 3)
        _linear(name + ".temb", cout, tdim)
        _affine(name + ".n2", cout)
        _conv(name + ".c2", cout, cout, 3)
        if cin != cout:
            _conv(name + ".skip", cout, cin, 1)

    tdim = arch.time_embed_dim
    chans = arch.level_channels
    _linear("time.l1", tdim, tdim)
    _linear("time.l2", tdim, tdim)
    _conv("stem", chans[0], arch.in_channels, 3)
    cur = chans[0]
    for i, c in enumerate(chans):
        _resblock(f"enc{i}", cur, c, tdim)
        _conv(f"down{i}", c, c, 3)
        cur = c
    _resblock("mid", cur, cur, tdim)
    for i in reversed(range(arch.num_down_levels)):
        _conv(f"up{i}", chans[i], cur, 1)
        _resblock(f"dec{i}", 2 * chans[i], chans[i], tdim)
        cur = chans[i]
    _affine("head.n", cur)
    _add("head.w", np.zeros((3, 3, cur, arch.out_channels)))
    _add("head.b", np.zeros(arch.out_channels))
    return DenoiserParams(weights=weights, arch=arch)


# -- forward pass -------------------------------------------------------------


def _conv_apply(w: dict, name: str, x: Tensor, stride=1, padding=1) -> Tensor:
    return ad.conv2d_nhwc(x, w[name + ".w"], stride=stride, padding=padding) + w[name + ".b"]


def _linear_apply(w: dict, name: str, x: Tensor) -> Tensor:
    return ad.matmul(x, w[name + ".w"]) + w[name + ".b"]


def _affine_apply(w: dict, name: str, x: Tensor) -> Tensor:
    return x * w[name + ".g"] + w[name + ".s"]


def _resblock_apply(w: dict, name: str, x: Tensor, temb: Tensor, cin: int, cout: int) -> Tensor:
    h = _conv_apply(w, name + ".c1", ad.silu(_affine_apply(w, name + ".n1", x)))
    tproj = _linear_apply(w, name + ".temb", temb)
    h = h + tproj.reshape((tproj.shape[0], 1, 1, cout))
    h = _conv_apply(w, name + ".c2", ad.silu(_affine_apply(w, name + ".n2", h)))
    skip = _conv_apply(w, name + ".skip", x, padding=0) if cin != cout else x
    return h + skip


def _prepare_inputs(params: DenoiserParams, y_t, x0) -> tuple[Tensor, Tensor]:
    dtype = params.dtype
    if not isinstance(y_t, Tensor):
        y_t = Tensor(np.asarray(y_t, dtype=dtype))
    if not isinstance(x0, Tensor):
        x0 = Tensor(np.asarray(x0, dtype=dtype))
    if y_t.shape != x0.shape:
        raise ArchError(f"noisy input {y_t.shape} and condition {x0.shape} differ")
    if y_t.ndim != 4 or y_t.shape[1] + x0.shape[1] != params.arch.in_channels:
        raise ArchError(f"expected [N,1,H,W] pairs, got {y_t.shape}")
    if not (np.all(np.isfinite(y_t.data)) and np.all(np.isfinite(x0.data))):
        raise ArchError("non-finite values in network input")
    params.arch.check_extent(y_t.shape[2], y_t.shape[3])
    return y_t, x0


def _time_vectors(params: DenoiserParams, t_batch, n: int) -> Tensor:
    arch = params.arch
    ts = [int(t) for t in (t_batch if np.ndim(t_batch) else [t_batch] * n)]
    if len(ts) != n:
        raise ArchError(f"got {len(ts)} timesteps for batch of {n}")
    for t in ts:
        if t < 1:
            raise ArchError(f"timestep {t} must be >= 1")
    base = np.stack(
        [time_embedding(t, arch.time_embed_dim, max(ts)) for t in ts]
    ).astype(params.dtype)
    w = params.weights
    temb = _linear_apply(w, "time.l1", Tensor(base))
    return _linear_apply(w, "time.l2", ad.silu(temb))


def _encode(params: DenoiserParams, y_t: Tensor, x0: Tensor, temb: Tensor):
    """Encoder in channels-last layout; returns skips and bottleneck."""
    arch = params.arch
    w = params.weights
    chans = arch.level_channels
    h = _conv_apply(
        w, "stem", ad.concat([ad.nchw_to_nhwc(y_t), ad.nchw_to_nhwc(x0)], axis=3)
    )
    skips = []
    cur = chans[0]
    for i, c in enumerate(chans):
        h = _resblock_apply(w, f"enc{i}", h, temb, cur, c)
        skips.append(h)
        h = _conv_apply(w, f"down{i}", h, stride=2)
        cur = c
    h = _resblock_apply(w, "mid", h, temb, cur, cur)
    return skips, h


def forward(params: DenoiserParams, y_t, x0, t_batch) -> Tensor:
    """Predict the noise content of y_t given the conditioning image."""
    return forward_with_tap(params, y_t, x0, t_batch)[0]


def feature_tap(params: DenoiserParams, y_t, x0, t_batch) -> Tensor:
    """Bottleneck activations of the encoder, as [N,C,H',W']."""
    y_t, x0 = _prepare_inputs(params, y_t, x0)
    temb = _time_vectors(params, t_batch, y_t.shape[0])
    _, mid = _encode(params, y_t, x0, temb)
    return ad.nhwc_to_nchw(mid)


def forward_with_tap(params: DenoiserParams, y_t, x0, t_batch) -> tuple[Tensor, Tensor]:
    """Noise prediction plus the bottleneck features of the same pass."""
    y_t, x0 = _prepare_inputs(params, y_t, x0)
    arch = params.arch
    w = params.weights
    chans = arch.level_channels
    temb = _time_vectors(params, t_batch, y_t.shape[0])
    skips, h = _encode(params, y_t, x0, temb)
    mid = h
    for i in reversed(range(arch.num_down_levels)):
        h = _conv_apply(w, f"up{i}", ad.upsample_nearest_nhwc(h, 2), padding=0)
        h = _resblock_apply(w, f"dec{i}", ad.concat([h, skips[i]], axis=3), temb,
                            2 * chans[i], chans[i])
    h = ad.silu(_affine_apply(w, "head.n", h))
    eps_hat = _conv_apply(w, "head", h)
    return ad.nhwc_to_nchw(eps_hat), ad.nhwc_to_nchw(mid)


# -- checkpoint serialization ---------------------------------------------------

_MAGIC = b"EGDF"
_VERSION = 1
_DTYPE_CODES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODE_FOR = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


def save_checkpoint(params: DenoiserParams, path: str):
    """Write weights in the binary record format plus a JSON arch manifest."""
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(bytes([_VERSION]))
        for name, t in params.weights.items():
            nb = name.encode("utf-8")
            f.write(struct.pack("<H", len(nb)))
            f.write(nb)
            code = _CODE_FOR[t.data.dtype]
            f.write(bytes([code, t.data.ndim]))
            f.write(struct.pack(f"<{t.data.ndim}I", *t.data.shape))
            f.write(np.ascontiguousarray(t.data).astype(_DTYPE_CODES[code]).tobytes())
    manifest = {
        "format": "EGDF",
        "version": _VERSION,
        "arch": asdict(params.arch),
        "names": list(params.weights.keys()),
    }
    with open(path + ".json", "w") as f:
        json.dump(manifest, f, indent=1)


def load_checkpoint(path: str) -> DenoiserParams:
    """Read a checkpoint; weights come back gradient-enabled."""
    with open(path, "rb") as f:
        blob = f.read()

    def _need(off, n, what):
        if off + n > len(blob):
            raise CheckpointError(
                f"truncated checkpoint: need {n} bytes for {what} at offset {off}, "
                f"file has {len(blob)}"
            )

    _need(0, 5, "header")
    if blob[:4] != _MAGIC:
        raise CheckpointError(f"bad magic {blob[:4]!r} at offset 0")
    if blob[4] != _VERSION:
        raise CheckpointError(f"unsupported version {blob[4]} at offset 4")
    off = 5
    weights: dict[str, Tensor] = {}
    while off < len(blob):
        _need(off, 2, "name length")
        (nlen,) = struct.unpack_from("<H", blob, off)
        off += 2
        _need(off, nlen, "name")
        name = blob[off : off + nlen].decode("utf-8")
        off += nlen
        _need(off, 2, "dtype/rank")
        code, rank = blob[off], blob[off + 1]
        off += 2
        if code not in _DTYPE_CODES:
            raise CheckpointError(f"unknown dtype code {code} at offset {off - 2}")
        _need(off, 4 * rank, "extents")
        shape = struct.unpack_from(f"<{rank}I", blob, off)
        off += 4 * rank
        dt = _DTYPE_CODES[code]
        count = int(np.prod(shape)) if rank else 1
        _need(off, count * dt.itemsize, f"data of {name}")
        arr = np.frombuffer(blob, dtype=dt, count=count, offset=off)
        off += count * dt.itemsize
        weights[name] = Tensor(arr.reshape(shape).copy(), requires_grad=True)

    try:
        with open(path + ".json") as f:
            manifest = json.load(f)
    except FileNotFoundError:
        raise CheckpointError(f"missing manifest {path + '.json'}") from None
    arch_kwargs = dict(manifest["arch"])
    arch_kwargs["channel_multipliers"] = tuple(arch_kwargs["channel_multipliers"])
    arch = ArchSpec(**arch_kwargs)
    return DenoiserParams(weights=weights, arch=arch)
