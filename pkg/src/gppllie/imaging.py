"""Image I/O, procedural scene synthesis, parametric low-light degradation,
patch tiling, and PSNR.

Dataset directory layout: ``pairs/<seed>/nl.png``, ``pairs/<seed>/ll.png``,
``pairs/<seed>/meta.json`` (degradation parameters and the pair seed).
All operations here are pure functions of their seeds and parameters.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image as PILImage, UnidentifiedImageError

from . import tensor as T
from .errors import FormatError, ImageIOError, ValidationError

# Rec. 601 luma weights, used for every luminance statistic in the project
LUMA = np.array([0.299, 0.587, 0.114], dtype=np.float64)

PSNR_CAP_DB = 99.0


@dataclass(frozen=True)
class Image:
    """RGB image, float32 values in [0,1], shape (h, w, 3)."""

    values: np.ndarray

    def __post_init__(self):
        v = self.values
        if v.ndim != 3 or v.shape[2] != 3:
            raise ValidationError(f"image must be (h, w, 3), got {v.shape}")
        if v.shape[0] < 1 or v.shape[1] < 1:
            raise ValidationError("image extents must be >= 1")
        if v.dtype != np.float32:
            object.__setattr__(self, "values", np.ascontiguousarray(v, dtype=np.float32))
        lo, hi = float(self.values.min()), float(self.values.max())
        if lo < 0.0 or hi > 1.0:
            raise ValidationError(f"image values outside [0,1]: min={lo}, max={hi}")

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class Degradation:
    gamma: float
    scale: float
    noise_sigma: float


@dataclass(frozen=True)
class ImagePair:
    nl: Image
    ll: Image
    seed: int
    degradation: Degradation

    def __post_init__(self):
        if self.nl.values.shape != self.ll.values.shape:
            raise ValidationError("nl and ll images must share dimensions")


def luminance(img: Image) -> np.ndarray:
    """0.299 R + 0.587 G + 0.114 B, float64."""
    return img.values.astype(np.float64) @ LUMA


# ---------------------------------------------------------------- file I/O

def save_image(img: Image, path) -> None:
    """Write 8-bit PNG or binary PPM (P6), chosen by extension."""
    path = Path(path)
    u8 = np.clip(np.round(img.values * 255.0), 0, 255).astype(np.uint8)
    try:
        if path.suffix.lower() == ".png":
            PILImage.fromarray(u8, mode="RGB").save(path, format="PNG")
        elif path.suffix.lower() in (".ppm", ".pnm"):
            with open(path, "wb") as fh:
                fh.write(f"P6\n{img.width} {img.height}\n255\n".encode("ascii"))
                fh.write(u8.tobytes())
        else:
            raise ImageIOError(path, f"unsupported image format '{path.suffix}'")
    except OSError as exc:
        raise ImageIOError(path, str(exc)) from exc


def load_image(path) -> Image:
    path = Path(path)
    if not path.exists():
        raise ImageIOError(path, "no such file")
    suffix = path.suffix.lower()
    try:
        if suffix == ".png":
            with PILImage.open(path) as im:
                im.load()
                arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
        elif suffix in (".ppm", ".pnm"):
            arr = _read_ppm(path)
        else:
            raise ImageIOError(path, f"unsupported image format '{suffix}'")
    except (UnidentifiedImageError, SyntaxError, struct.error) as exc:
        raise FormatError(f"{path}: not a valid image file ({exc})") from exc
    except OSError as exc:
        # PIL raises OSError for truncated image data
        raise FormatError(f"{path}: corrupt or truncated image ({exc})") from exc
    return Image(arr.astype(np.float32) / 255.0)


def _read_ppm(path: Path) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    fields: list[bytes] = []
    pos = 0
    # header: magic, width, height, maxval, with '#' comments allowed
    while len(fields) < 4 and pos < len(blob):
        while pos < len(blob) and blob[pos:pos + 1].isspace():
            pos += 1
        if pos < len(blob) and blob[pos:pos + 1] == b"#":
            while pos < len(blob) and blob[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos:pos + 1].isspace():
            pos += 1
        if pos > start:
            fields.append(blob[start:pos])
    if len(fields) < 4 or fields[0] != b"P6":
        raise FormatError(f"{path}: not a binary PPM (P6) file")
    try:
        w, h, maxval = int(fields[1]), int(fields[2]), int(fields[3])
    except ValueError as exc:
        raise FormatError(f"{path}: bad PPM header") from exc
    if maxval != 255:
        raise FormatError(f"{path}: only maxval 255 PPM supported, got {maxval}")
    pos += 1  # single whitespace after maxval
    payload = blob[pos:pos + w * h * 3]
    if len(payload) != w * h * 3:
        raise FormatError(f"{path}: truncated PPM payload "
                          f"({len(payload)} of {w * h * 3} bytes)")
    return np.frombuffer(payload, dtype=np.uint8).reshape(h, w, 3)


# ---------------------------------------------------------------- synthesis

def _value_noise(rng: np.random.Generator, h: int, w: int, cell: int) -> np.ndarray:
    """Band-limited noise: coarse uniform grid bilinearly upsampled."""
    gh, gw = max(2, h // cell), max(2, w // cell)
    coarse = rng.uniform(-1.0, 1.0, size=(1, gh, gw))
    up = T.bilinear_resize(T.Tensor(coarse, dtype=np.float64), h, w)
    return up.data[0]


def synth_scene(seed: int, size: int) -> Image:
    """Deterministic synthetic scene: a smooth color gradient, 2..6 solid or
    outlined shapes, and two octaves of value-noise texture, renormalized to a
    mid-band mean luminance so every scene has measurable contrast, visibility,
    and sharpness structure."""
    if size < 16:
        raise ValidationError(f"synth_scene size must be >= 16, got {size}")
    rng = np.random.default_rng([seed, 0x5CE11E])
    h = w = size
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    yy, xx = yy / (h - 1), xx / (w - 1)

    theta = rng.uniform(0, 2 * np.pi)
    ramp = (np.cos(theta) * xx + np.sin(theta) * yy + 1.0) / 2.0
    c0 = rng.uniform(0.25, 0.85, size=3)
    c1 = rng.uniform(0.25, 0.85, size=3)
    img = ramp[..., None] * c1 + (1.0 - ramp[..., None]) * c0

    for _ in range(int(rng.integers(2, 7))):
        color = rng.uniform(0.05, 0.95, size=3)
        alpha = rng.uniform(0.6, 1.0)
        cy, cx = rng.uniform(0.15, 0.85, size=2)
        radius = rng.uniform(0.08, 0.22) * size
        kind = rng.integers(0, 3)  # 0 filled circle, 1 filled box, 2 outlined box
        if kind == 0:
            mask = (yy * (h - 1) - cy * h) ** 2 + (xx * (w - 1) - cx * w) ** 2 <= radius ** 2
        else:
            half_h = radius
            half_w = radius * rng.uniform(0.6, 1.6)
            inside_y = np.abs(yy * (h - 1) - cy * h) <= half_h
            inside_x = np.abs(xx * (w - 1) - cx * w) <= half_w
            mask = inside_y & inside_x
            if kind == 2:
                inner_y = np.abs(yy * (h - 1) - cy * h) <= half_h - 2
                inner_x = np.abs(xx * (w - 1) - cx * w) <= half_w - 2
                mask = mask & ~(inner_y & inner_x)
        img[mask] = (1 - alpha) * img[mask] + alpha * color

    img += 0.06 * _value_noise(rng, h, w, cell=8)[..., None]
    img += 0.03 * _value_noise(rng, h, w, cell=3)[..., None]

    # renormalize luminance to a mid band: keeps visibility statistics well
    # inside the builtin assessor's linear region on every seed
    lum = img @ LUMA
    m, s = lum.mean(), lum.std()
    target_mean = rng.uniform(0.44, 0.58)
    target_std = rng.uniform(0.12, 0.20)
    img = (img - m) * (target_std / max(s, 1e-6)) + target_mean
    return Image(np.clip(img, 0.0, 1.0).astype(np.float32))


def degrade(nl: Image, gamma: float, scale: float, noise_sigma: float, seed: int) -> Image:
    """Low-light model: ll = clip(nl**gamma * scale + N(0, sigma^2), 0, 1)."""
    if not 1.0 <= gamma <= 4.0:
        raise ValidationError(f"gamma must be in [1,4], got {gamma}")
    if not 0.0 < scale <= 1.0:
        raise ValidationError(f"scale must be in (0,1], got {scale}")
    if not 0.0 <= noise_sigma <= 0.1:
        raise ValidationError(f"noise_sigma must be in [0,0.1], got {noise_sigma}")
    rng = np.random.default_rng([seed, 0xDE64ADE])
    v = nl.values.astype(np.float64)
    out = np.power(v, gamma) * scale
    if noise_sigma > 0:
        out = out + rng.normal(0.0, noise_sigma, size=v.shape)
    return Image(np.clip(out, 0.0, 1.0).astype(np.float32))


# ---------------------------------------------------------------- patch grid

def crop_to_grid(img: Image, grid: int) -> Image:
    """Center-crop so both extents divide the grid (drops at most grid-1 px per axis)."""
    if grid < 1:
        raise ValidationError("grid must be >= 1")
    h, w = img.height, img.width
    ch, cw = h - h % grid, w - w % grid
    oy, ox = (h - ch) // 2, (w - cw) // 2
    if (oy, ox, ch, cw) == (0, 0, h, w):
        return img
    return Image(np.ascontiguousarray(img.values[oy:oy + ch, ox:ox + cw]))


def patchify(img: Image, grid: int) -> list[Image]:
    """Split into grid x grid non-overlapping patches, row-major order."""
    cropped = crop_to_grid(img, grid)
    ph, pw = cropped.height // grid, cropped.width // grid
    patches = []
    for i in range(grid):
        for j in range(grid):
            tile = cropped.values[i * ph:(i + 1) * ph, j * pw:(j + 1) * pw]
            patches.append(Image(np.ascontiguousarray(tile)))
    return patches


def reassemble_patches(patches: list[Image], grid: int) -> Image:
    if len(patches) != grid * grid:
        raise ValidationError(f"expected {grid * grid} patches, got {len(patches)}")
    rows = [np.concatenate([patches[i * grid + j].values for j in range(grid)], axis=1)
            for i in range(grid)]
    return Image(np.concatenate(rows, axis=0))


# ---------------------------------------------------------------- metric

def psnr(a: Image, b: Image) -> float:
    """10 * log10(1 / MSE) with peak 1.0, capped at 99 dB for near-zero MSE."""
    if a.values.shape != b.values.shape:
        raise ValidationError(f"psnr dimension mismatch: {a.values.shape} vs {b.values.shape}")
    diff = a.values.astype(np.float64) - b.values.astype(np.float64)
    mse = float(np.mean(diff * diff))
    if mse < 1e-10:
        return PSNR_CAP_DB
    return float(10.0 * np.log10(1.0 / mse))


# ---------------------------------------------------------------- dataset layout

def pair_dir(root, seed: int) -> Path:
    return Path(root) / "pairs" / str(seed)


def write_pair(pair: ImagePair, root) -> Path:
    d = pair_dir(root, pair.seed)
    d.mkdir(parents=True, exist_ok=True)
    save_image(pair.nl, d / "nl.png")
    save_image(pair.ll, d / "ll.png")
    meta = {
        "seed": pair.seed,
        "gamma": pair.degradation.gamma,
        "scale": pair.degradation.scale,
        "noise_sigma": pair.degradation.noise_sigma,
        "height": pair.nl.height,
        "width": pair.nl.width,
    }
    (d / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
    return d


def load_pair(d) -> ImagePair:
    d = Path(d)
    try:
        meta = json.loads((d / "meta.json").read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise FormatError(f"{d}/meta.json: unreadable pair metadata ({exc})") from exc
    return ImagePair(
        nl=load_image(d / "nl.png"),
        ll=load_image(d / "ll.png"),
        seed=int(meta["seed"]),
        degradation=Degradation(float(meta["gamma"]), float(meta["scale"]),
                                float(meta["noise_sigma"])),
    )


def list_pair_dirs(root) -> list[Path]:
    base = Path(root) / "pairs"
    if not base.is_dir():
        return []
    return sorted((p for p in base.iterdir() if p.is_dir()), key=lambda p: int(p.name))


DEFAULT_GAMMA_RANGE = (1.6, 3.0)
DEFAULT_SCALE_RANGE = (0.15, 0.60)
DEFAULT_SIGMA_RANGE = (0.0, 0.04)


def make_pair(pair_seed: int, size: int,
              gamma_range=DEFAULT_GAMMA_RANGE,
              scale_range=DEFAULT_SCALE_RANGE,
              sigma_range=DEFAULT_SIGMA_RANGE) -> ImagePair:
    """Scene plus a randomized degradation, all driven by one pair seed."""
    rng = np.random.default_rng([pair_seed, 0x9A125])
    gamma = float(rng.uniform(*gamma_range))
    scale = float(rng.uniform(*scale_range))
    sigma = float(rng.uniform(*sigma_range))
    nl = synth_scene(pair_seed, size)
    ll = degrade(nl, gamma, scale, sigma, pair_seed)
    return ImagePair(nl=nl, ll=ll, seed=pair_seed,
                     degradation=Degradation(gamma, scale, sigma))


def generate_dataset(n: int, size: int, seed: int, root,
                     gamma_range=DEFAULT_GAMMA_RANGE,
                     scale_range=DEFAULT_SCALE_RANGE,
                     sigma_range=DEFAULT_SIGMA_RANGE) -> list[Path]:
    """Write n pairs under root/pairs/<pair_seed>/; deterministic in seed."""
    if n < 1:
        raise ValidationError("dataset size must be >= 1")
    rng = np.random.default_rng([seed, 0xDA7A])
    seeds: list[int] = []
    while len(seeds) < n:
        cand = int(rng.integers(0, 2 ** 31 - 1))
        if cand not in seeds:
            seeds.append(cand)
    dirs = []
    for ps in seeds:
        pair = make_pair(ps, size, gamma_range, scale_range, sigma_range)
        dirs.append(write_pair(pair, root))
    return dirs
