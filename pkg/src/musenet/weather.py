"""Parametric environmental styling for drone imagery.

Ten conditions, all deterministic functions of (image, seed): the identity,
three atmospheric overlays (fog / rain / snow), their three pairwise
compositions, two brightness shifts (dark / overexposure) and a motion
blur. Composites apply their constituents in fog -> rain -> snow order,
each with its own spawned substream, so single-stage outputs compose
literally. All arithmetic saturates to [0, 255].
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum, IntEnum

import numpy as np

from .errors import UsageError

DEFAULT_SEED = 1992


class Platform(Enum):
    SATELLITE = "satellite"
    DRONE = "drone"


class StyleKind(IntEnum):
    """Canonical condition order; drone style labels are index + 1."""

    NORMAL = 0
    FOG = 1
    RAIN = 2
    SNOW = 3
    FOG_RAIN = 4
    FOG_SNOW = 5
    RAIN_SNOW = 6
    DARK = 7
    OVEREXPOSURE = 8
    WIND = 9


STYLE_TOKENS = {
    "normal": StyleKind.NORMAL,
    "fog": StyleKind.FOG,
    "rain": StyleKind.RAIN,
    "snow": StyleKind.SNOW,
    "fog+rain": StyleKind.FOG_RAIN,
    "fog+snow": StyleKind.FOG_SNOW,
    "rain+snow": StyleKind.RAIN_SNOW,
    "dark": StyleKind.DARK,
    "overexposure": StyleKind.OVEREXPOSURE,
    "wind": StyleKind.WIND,
}
TOKEN_OF_STYLE = {v: k for k, v in STYLE_TOKENS.items()}

# evaluation-only mixture, deliberately not a StyleKind
UNSEEN_COMPOSITE = "fog+rain+snow"

_COMPOSITES = {
    StyleKind.FOG_RAIN: (StyleKind.FOG, StyleKind.RAIN),
    StyleKind.FOG_SNOW: (StyleKind.FOG, StyleKind.SNOW),
    StyleKind.RAIN_SNOW: (StyleKind.RAIN, StyleKind.SNOW),
}


@dataclass(frozen=True)
class StyleParams:
    """Knobs of the parametric transforms; ranges are inclusive draws."""

    fog_alpha: tuple = (0.4, 0.6)
    rain_count: tuple = (40, 80)
    rain_gray: tuple = (180.0, 220.0)
    rain_length: tuple = (8.0, 16.0)
    rain_angle_deg: tuple = (-30.0, -10.0)
    rain_opacity: float = 0.5
    snow_count: tuple = (60, 120)
    snow_radius: tuple = (1.0, 2.0)
    snow_opacity: float = 0.8
    snow_brighten: float = 1.1
    dark_mul: tuple = (0.3, 0.5)
    dark_add: tuple = (-30.0, 0.0)
    over_mul: float = 1.6
    over_add: tuple = (0.0, 30.0)
    wind_lengths: tuple = (9, 11, 13, 15)
    wind_angle_deg: tuple = (0.0, 180.0)


DEFAULT_PARAMS = StyleParams()


def _saturate(img_f: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(img_f), 0, 255).astype(np.uint8)


def brightness(image: np.ndarray, mul: float, add: float) -> np.ndarray:
    return _saturate(image.astype(np.float64) * mul + add)


def fog(image: np.ndarray, alpha: float) -> np.ndarray:
    return _saturate(alpha * 255.0 + (1.0 - alpha) * image.astype(np.float64))


def _splat_points(cov: np.ndarray, px: np.ndarray, py: np.ndarray, weight):
    """Accumulate anti-aliased coverage via bilinear point splatting."""
    h, w = cov.shape
    ix, iy = np.floor(px).astype(int), np.floor(py).astype(int)
    fx, fy = px - ix, py - iy
    for dx, dy, wgt in (
        (0, 0, (1 - fx) * (1 - fy)),
        (1, 0, fx * (1 - fy)),
        (0, 1, (1 - fx) * fy),
        (1, 1, fx * fy),
    ):
        gx, gy = ix + dx, iy + dy
        ok = (gx >= 0) & (gx < w) & (gy >= 0) & (gy < h)
        np.add.at(cov, (gy[ok], gx[ok]), weight * wgt[ok])


def _patch_bounds(px, py, margin, h, w):
    x0 = max(int(np.floor(px.min())) - margin, 0)
    x1 = min(int(np.ceil(px.max())) + margin + 1, w)
    y0 = max(int(np.floor(py.min())) - margin, 0)
    y1 = min(int(np.ceil(py.max())) + margin + 1, h)
    return x0, x1, y0, y1


def rain(image: np.ndarray, rng: np.random.Generator,
         params: StyleParams = DEFAULT_PARAMS) -> np.ndarray:
    h, w, _ = image.shape
    out = image.astype(np.float64)
    count = int(rng.integers(params.rain_count[0], params.rain_count[1] + 1))
    for _ in range(count):
        x0 = rng.uniform(-4.0, w + 4.0)
        y0 = rng.uniform(-4.0, h + 4.0)
        angle = np.deg2rad(rng.uniform(*params.rain_angle_deg))
        length = rng.uniform(*params.rain_length)
        gray = rng.uniform(*params.rain_gray)
        t = np.arange(0.0, length, 0.25)
        px = x0 + t * np.cos(angle)
        py = y0 + t * np.sin(angle)
        bx0, bx1, by0, by1 = _patch_bounds(px, py, 2, h, w)
        if bx0 >= bx1 or by0 >= by1:  # streak fully off-frame
            continue
        cov = np.zeros((by1 - by0, bx1 - bx0))
        _splat_points(cov, px - bx0, py - by0, 0.6)
        a = (params.rain_opacity * np.minimum(cov, 1.0))[:, :, None]
        patch = out[by0:by1, bx0:bx1]
        patch *= 1.0 - a
        patch += a * gray
    return _saturate(out)


def snow(image: np.ndarray, rng: np.random.Generator,
         params: StyleParams = DEFAULT_PARAMS) -> np.ndarray:
    h, w, _ = image.shape
    out = image.astype(np.float64)
    count = int(rng.integers(params.snow_count[0], params.snow_count[1] + 1))
    for _ in range(count):
        cx = rng.uniform(0, w)
        cy = rng.uniform(0, h)
        radius = rng.uniform(*params.snow_radius)
        pad = int(np.ceil(radius)) + 1
        bx0, bx1 = max(int(cx) - pad, 0), min(int(cx) + pad + 1, w)
        by0, by1 = max(int(cy) - pad, 0), min(int(cy) + pad + 1, h)
        ys, xs = np.mgrid[by0:by1, bx0:bx1]
        dist = np.sqrt((xs - cx) ** 2 + (ys - cy) ** 2)
        a = (params.snow_opacity * np.clip(radius + 0.5 - dist, 0.0, 1.0))[:, :, None]
        patch = out[by0:by1, bx0:bx1]
        patch *= 1.0 - a
        patch += a * 255.0
    return _saturate(out * params.snow_brighten)


def motion_blur(image: np.ndarray, length: int, angle_deg: float) -> np.ndarray:
    if length % 2 == 0 or length < 3:
        raise UsageError(f"motion blur length must be odd and >=3, got {length}")
    kernel = np.zeros((length, length))
    center = (length - 1) / 2.0
    angle = np.deg2rad(angle_deg)
    t = np.linspace(-center, center, 4 * length)
    _splat_points(kernel, center + t * np.cos(angle), center + t * np.sin(angle), 1.0)
    kernel /= kernel.sum()
    pad = length // 2
    padded = np.pad(image.astype(np.float64), ((pad, pad), (pad, pad), (0, 0)), mode="edge")
    windows = np.lib.stride_tricks.sliding_window_view(padded, (length, length), axis=(0, 1))
    out = np.tensordot(windows, kernel, axes=([3, 4], [0, 1]))
    return _saturate(out)


def _apply_single(image, style: StyleKind, rng, params: StyleParams) -> np.ndarray:
    if style is StyleKind.NORMAL:
        return image.copy()
    if style is StyleKind.FOG:
        return fog(image, rng.uniform(*params.fog_alpha))
    if style is StyleKind.RAIN:
        return rain(image, rng, params)
    if style is StyleKind.SNOW:
        return snow(image, rng, params)
    if style is StyleKind.DARK:
        return brightness(image, rng.uniform(*params.dark_mul), rng.uniform(*params.dark_add))
    if style is StyleKind.OVEREXPOSURE:
        return brightness(image, params.over_mul, rng.uniform(*params.over_add))
    if style is StyleKind.WIND:
        length = int(rng.choice(params.wind_lengths))
        return motion_blur(image, length, rng.uniform(*params.wind_angle_deg))
    raise UsageError(f"{style} is not a single-stage style")


def constituents(style: StyleKind) -> tuple:
    return _COMPOSITES.get(style, (style,))


def apply_style(image: np.ndarray, style: StyleKind, rng: np.random.Generator,
                params: StyleParams = DEFAULT_PARAMS) -> np.ndarray:
    """Style one uint8 HxWx3 image; deterministic given the rng's seed.

    Single styles consume the stream directly; composites spawn one child
    stream per constituent, so forcing the same sub-seeds reproduces the
    literal composition of single-stage outputs.
    """
    parts = constituents(style)
    if len(parts) == 1:
        return _apply_single(image, style, rng, params)
    out = image
    for part, sub in zip(parts, rng.spawn(len(parts))):
        out = _apply_single(out, part, sub, params)
    return out


def unseen_composite(image: np.ndarray, rng: np.random.Generator,
                     params: StyleParams = DEFAULT_PARAMS) -> np.ndarray:
    """Fog -> rain -> snow mixture; evaluation only, never seen in training."""
    parts = (StyleKind.FOG, StyleKind.RAIN, StyleKind.SNOW)
    out = image
    for part, sub in zip(parts, rng.spawn(len(parts))):
        out = _apply_single(out, part, sub, params)
    return out


def style_label(platform: Platform, style: StyleKind) -> int:
    """Satellite images are always label 0; drone labels are index + 1."""
    if platform is Platform.SATELLITE:
        if style is not StyleKind.NORMAL:
            raise UsageError("satellite imagery has a fixed style by problem definition")
        return 0
    return int(style) + 1


def styling_stream(global_seed: int, image_id: int, epoch: int, style: StyleKind) -> np.random.Generator:
    """Per-image substream: varied across epochs, frozen for evaluation (epoch 0)."""
    seq = np.random.SeedSequence([int(global_seed) & 0xFFFFFFFFFFFFFFFF, image_id, epoch, int(style)])
    return np.random.Generator(np.random.PCG64(seq))
