"""Deterministic synthetic chest phantoms and their degraded counterparts.

A phantom is a layered composition of axis-aligned ellipses (body, lungs,
spine, ribs, optional tumor) painted with per-phantom tissue intensities in
Hounsfield Units. The degradation operator models the artifacts of a daily
positioning scan: global gain drift, a smooth additive bias field, white
noise, and oriented sinusoidal streaks.

Also home to the HU window normalization and the portable raster file
format (magic "EGIM").
"""
from __future__ import annotations

import os
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .seeds import derive_seed, stream

HU_MIN, HU_MAX = -1000.0, 3071.0     # display/metric window
HU_SPAN = HU_MAX - HU_MIN            # 4071
CLIP_MIN, CLIP_MAX = -1024.0, 3500.0  # storage clip range

AIR_HU = -1000.0

TISSUES = {
    "soft": (40.0, 10.0),
    "lung": (-800.0, 30.0),
    "bone": (700.0, 80.0),
    "tumor": (60.0, 10.0),
}


class PhantomError(ValueError):
    """Invalid phantom geometry or degrade configuration."""


class RasterFormatError(IOError):
    """Malformed or truncated raster file."""


@dataclass
class Raster:
    """H x W grid of scalar intensities in Hounsfield Units."""

    width: int
    height: int
    hu: np.ndarray

    def __post_init__(self):
        self.hu = np.asarray(self.hu, dtype=np.float32).reshape(self.height, self.width)

    @classmethod
    def from_array(cls, arr: np.ndarray) -> "Raster":
        arr = np.asarray(arr, dtype=np.float32)
        return cls(width=arr.shape[1], height=arr.shape[0], hu=arr)


@dataclass(frozen=True)
class Ellipse:
    cx: float
    cy: float
    rx: float
    ry: float

    def inside(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        return ((x - self.cx) / self.rx) ** 2 + ((y - self.cy) / self.ry) ** 2 <= 1.0

    def contains_ellipse(self, other: "Ellipse", samples: int = 64) -> bool:
        ang = np.linspace(0, 2 * np.pi, samples, endpoint=False)
        bx = other.cx + other.rx * np.cos(ang)
        by = other.cy + other.ry * np.sin(ang)
        return bool(np.all(self.inside(bx, by)))


@dataclass
class PhantomSpec:
    seed: int
    size: int
    body: Ellipse
    lungs: tuple[Ellipse, Ellipse]
    spine: Ellipse
    ribs: list[Ellipse]
    tumor: Ellipse | None
    tissue_hu: dict[str, float] = field(default_factory=dict)

    @classmethod
    def random(cls, seed: int, size: int = 32) -> "PhantomSpec":
        """Draw a randomized anatomy; all structures land inside the body."""
        rng = stream(seed, "phantom")
        s = float(size)
        jig = lambda scale: rng.uniform(-scale, scale)
        body = Ellipse(
            cx=s / 2 + jig(0.02 * s),
            cy=s / 2 + jig(0.02 * s),
            rx=0.42 * s * rng.uniform(0.92, 1.05),
            ry=0.34 * s * rng.uniform(0.92, 1.05),
        )
        lungs = tuple(
            Ellipse(
                cx=body.cx + side * 0.17 * s + jig(0.01 * s),
                cy=body.cy - 0.03 * s + jig(0.01 * s),
                rx=0.115 * s * rng.uniform(0.85, 1.1),
                ry=0.185 * s * rng.uniform(0.85, 1.1),
            )
            for side in (-1.0, 1.0)
        )
        spine = Ellipse(cx=body.cx + jig(0.005 * s), cy=body.cy + 0.245 * s,
                        rx=0.055 * s, ry=0.05 * s)
        ribs = []
        n_ribs = int(rng.integers(4, 9))
        for j in range(n_ribs):
            ang = np.pi * (0.15 + 0.7 * j / max(n_ribs - 1, 1)) + jig(0.05)
            ribs.append(
                Ellipse(
                    cx=body.cx + 0.85 * body.rx * np.cos(ang + np.pi),
                    cy=body.cy - 0.85 * body.ry * np.sin(ang),
                    rx=0.024 * s,
                    ry=0.024 * s,
                )
            )
        tumor = None
        if rng.uniform() < 0.5:
            host = lungs[int(rng.integers(0, 2))]
            tumor = Ellipse(
                cx=host.cx + jig(0.3 * host.rx),
                cy=host.cy + jig(0.3 * host.ry),
                rx=0.045 * s,
                ry=0.045 * s,
            )
        tissue_hu = {
            name: float(np.clip(rng.normal(mean, jitter), mean - 3 * jitter, mean + 3 * jitter))
            for name, (mean, jitter) in TISSUES.items()
        }
        spec = cls(seed=seed, size=size, body=body, lungs=lungs, spine=spine,
                   ribs=ribs, tumor=tumor, tissue_hu=tissue_hu)
        spec.validate()
        return spec

    def validate(self):
        inner = list(self.lungs) + [self.spine] + self.ribs
        if self.tumor is not None:
            inner.append(self.tumor)
        for e in inner:
            if not self.body.contains_ellipse(e):
                raise PhantomError(f"structure {e} extends outside the body ellipse")


def _coverage(e: Ellipse, size: int, sub: int = 4) -> np.ndarray:
    """Per-pixel area fraction inside the ellipse via subpixel sampling."""
    offs = (np.arange(sub) + 0.5) / sub
    xs = np.arange(size)[:, None] + offs[None, :]  # [size, sub]
    cov = np.zeros((size, size), dtype=np.float64)
    for oy in offs:
        y = np.arange(size)[:, None, None] + oy
        x = xs[None, :, :]
        cov += e.inside(x, y).sum(axis=2)
    return (cov / (sub * sub)).astype(np.float32)


def gen_phantom(spec: PhantomSpec) -> Raster:
    """Render the layered anatomy with area-fraction anti-aliasing."""
    spec.validate()
    size = spec.size
    img = np.full((size, size), AIR_HU, dtype=np.float32)

    def paint(e: Ellipse, value: float):
        nonlocal img
        cov = _coverage(e, size)
        img = img * (1.0 - cov) + np.float32(value) * cov

    paint(spec.body, spec.tissue_hu["soft"])
    for lung in spec.lungs:
        paint(lung, spec.tissue_hu["lung"])
    if spec.tumor is not None:
        paint(spec.tumor, spec.tissue_hu["tumor"])
    paint(spec.spine, spec.tissue_hu["bone"])
    for rib in spec.ribs:
        paint(rib, spec.tissue_hu["bone"])
    return Raster.from_array(np.clip(img, CLIP_MIN, CLIP_MAX))


@dataclass(frozen=True)
class DegradeSpec:
    bias_amplitude: float = 25.0
    bias_smoothness: int = 3
    noise_sigma: float = 25.0
    streak_count: int = 3
    streak_amplitude: float = 20.0
    intensity_gain: float = 1.02

    def __post_init__(self):
        if min(self.bias_amplitude, self.noise_sigma, self.streak_amplitude) < 0:
            raise PhantomError("degrade amplitudes must be non-negative")
        if not 0.8 < self.intensity_gain < 1.2:
            raise PhantomError(f"gain {self.intensity_gain} outside (0.8, 1.2)")
        if self.bias_smoothness < 1:
            raise PhantomError("bias_smoothness must be >= 1")


DEGRADE_PRESETS = {
    "none": DegradeSpec(bias_amplitude=0.0, noise_sigma=0.0, streak_count=0,
                        streak_amplitude=0.0, intensity_gain=1.0),
    "mild": DegradeSpec(bias_amplitude=12.0, noise_sigma=12.0, streak_count=2,
                        streak_amplitude=10.0, intensity_gain=1.01),
    "default": DegradeSpec(),
    "harsh": DegradeSpec(bias_amplitude=45.0, noise_sigma=45.0, streak_count=5,
                         streak_amplitude=35.0, intensity_gain=1.05),
}


def _bias_field(size: int, amplitude: float, cells: int, rng) -> np.ndarray:
    """Smooth low-frequency field: bilinear interpolation of a coarse grid."""
    grid = rng.uniform(-amplitude, amplitude, size=(cells + 1, cells + 1))
    pos = np.linspace(0.0, cells, size)
    i0 = np.clip(np.floor(pos).astype(int), 0, cells - 1)
    frac = pos - i0
    rows = grid[i0] * (1 - frac)[:, None] + grid[i0 + 1] * frac[:, None]
    field2 = rows[:, i0] * (1 - frac)[None, :] + rows[:, i0 + 1] * frac[None, :]
    return field2


def degrade(ct: Raster, d: DegradeSpec, seed: int) -> Raster:
    """Apply gain, smooth bias, white noise, and sinusoidal streaks."""
    rng = stream(seed, "degrade")
    size = ct.width
    out = ct.hu.astype(np.float64) * d.intensity_gain
    out += _bias_field(size, d.bias_amplitude, d.bias_smoothness, rng)
    out += rng.normal(0.0, d.noise_sigma, size=out.shape) if d.noise_sigma > 0 else 0.0
    yy, xx = np.mgrid[0:ct.height, 0:size].astype(np.float64)
    for _ in range(d.streak_count):
        theta = rng.uniform(0, np.pi)
        freq = rng.uniform(2.0, 5.0)
        phase = rng.uniform(0, 2 * np.pi)
        proj = (xx * np.cos(theta) + yy * np.sin(theta)) / size
        out += d.streak_amplitude * np.sin(2 * np.pi * freq * proj + phase)
    return Raster.from_array(np.clip(out, CLIP_MIN, CLIP_MAX))


# -- HU window normalization ----------------------------------------------------


def normalize_hu(r: Raster | np.ndarray) -> np.ndarray:
    """Clip to the [-1000, 3071] window and map affinely onto [-1, 1]."""
    hu = r.hu if isinstance(r, Raster) else np.asarray(r, dtype=np.float32)
    clipped = np.clip(hu, HU_MIN, HU_MAX).astype(np.float64)
    return (2.0 * (clipped - HU_MIN) / HU_SPAN - 1.0).astype(np.float32)


def denormalize_hu(u: np.ndarray) -> Raster:
    """Inverse of normalize_hu back onto the HU window."""
    u64 = np.asarray(u, dtype=np.float64)
    hu = (np.clip(u64, -1.0, 1.0) + 1.0) / 2.0 * HU_SPAN + HU_MIN
    return Raster.from_array(hu)


# -- raster file format ----------------------------------------------------------

_MAGIC = b"EGIM"
_VERSION = 1
_HEADER = struct.Struct("<4sHHII")  # magic, version, reserved, width, height


def save_raster(r: Raster, path: str):
    with open(path, "wb") as f:
        f.write(_HEADER.pack(_MAGIC, _VERSION, 0, r.width, r.height))
        f.write(np.ascontiguousarray(r.hu, dtype="<f4").tobytes())


def load_raster(path: str) -> Raster:
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < _HEADER.size:
        raise RasterFormatError(
            f"truncated header: need {_HEADER.size} bytes, file has {len(blob)}"
        )
    magic, version, _, width, height = _HEADER.unpack_from(blob, 0)
    if magic != _MAGIC:
        raise RasterFormatError(f"bad magic {magic!r} at offset 0")
    if version != _VERSION:
        raise RasterFormatError(f"unsupported version {version} at offset 4")
    expected = _HEADER.size + 4 * width * height
    if len(blob) != expected:
        raise RasterFormatError(
            f"bad payload: expected {expected} bytes total, file has {len(blob)} "
            f"(data starts at offset {_HEADER.size})"
        )
    data = np.frombuffer(blob, dtype="<f4", count=width * height, offset=_HEADER.size)
    return Raster(width=width, height=height, hu=data.reshape(height, width).copy())


def raster_to_csv(r: Raster, path: str):
    np.savetxt(path, r.hu, delimiter=",", fmt="%.3f")


def raster_to_pgm(r: Raster, path: str, lo: float = HU_MIN, hi: float = HU_MAX):
    """16-bit binary PGM with the HU->gray affine map noted in the header."""
    scaled = np.clip((r.hu - lo) / (hi - lo), 0.0, 1.0)
    gray = np.round(scaled * 65535).astype(">u2")
    with open(path, "wb") as f:
        f.write(b"P5\n")
        f.write(f"# hu window [{lo}, {hi}]\n".encode())
        f.write(f"{r.width} {r.height}\n65535\n".encode())
        f.write(gray.tobytes())


# -- dataset assembly -------------------------------------------------------------


def _split_counts(n: int, fractions: tuple[float, float, float]) -> tuple[int, int, int]:
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise PhantomError(f"split fractions {fractions} must sum to 1")
    base = [int(np.floor(f * n)) for f in fractions]
    rema = [f * n - b for f, b in zip(fractions, base)]
    while sum(base) < n:
        i = int(np.argmax(rema))
        base[i] += 1
        rema[i] = -1
    return tuple(base)


def make_dataset(
    n: int,
    seed: int,
    size: int,
    degrade_spec: DegradeSpec,
    out_dir: str,
    split: tuple[float, float, float] = (0.8, 0.1, 0.1),
    workers: int | None = None,
) -> str:
    """Generate n aligned (clean, degraded) pairs plus a manifest.

    Returns the manifest path. Pair i derives its own sub-seed, so content
    is independent of generation order.
    """
    os.makedirs(out_dir, exist_ok=True)
    n_train, n_val, n_test = _split_counts(n, split)
    splits = ["train"] * n_train + ["val"] * n_val + ["test"] * n_test

    if workers is None:
        workers = int(os.environ.get("EGDIFF_THREADS", os.cpu_count() or 1))

    def build(i: int) -> tuple[str, str]:
        spec = PhantomSpec.random(derive_seed(seed, "pair", i), size)
        ct = gen_phantom(spec)
        cbct = degrade(ct, degrade_spec, derive_seed(seed, "pair", i, "degrade"))
        ct_name = f"ct_{i:04d}.egim"
        cbct_name = f"cbct_{i:04d}.egim"
        save_raster(ct, os.path.join(out_dir, ct_name))
        save_raster(cbct, os.path.join(out_dir, cbct_name))
        return ct_name, cbct_name

    if workers > 1 and n > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            names = list(pool.map(build, range(n)))
    else:
        names = [build(i) for i in range(n)]

    manifest_path = os.path.join(out_dir, "manifest.txt")
    with open(manifest_path, "w") as f:
        for i, (ct_name, cbct_name) in enumerate(names):
            f.write(f"{i},{ct_name},{cbct_name},{splits[i]}\n")
    return manifest_path


def load_manifest(manifest_path: str) -> list[dict]:
    """Parse manifest lines into records with index, paths, and split."""
    base = os.path.dirname(manifest_path)
    records = []
    with open(manifest_path) as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            idx, ct_name, cbct_name, split = line.split(",")
            records.append(
                {
                    "index": int(idx),
                    "ct_path": os.path.join(base, ct_name),
                    "cbct_path": os.path.join(base, cbct_name),
                    "split": split,
                }
            )
    return records
