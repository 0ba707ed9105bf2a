"""
Parametric weather corruptions (fog, darkness, rain) and SSIM

Fog follows the atmospheric scattering model I' = I*t + A*(1 - t) with
t = exp(-beta * d(y)) and a row-based depth proxy d: 0 at the bottom row,
1 at the top row. Darkness is gamma darkening, rain a seeded overlay of
alpha-blended line streaks.
"""

import logging
import math
from typing import Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DimensionError
from .models import Frame, WeatherKind, WeatherParams
from .utils import validate_unit_range

logger = logging.getLogger(__name__)

SSIM_WINDOW = 8
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2


def _checked_pixels(frame: Frame) -> np.ndarray:
    validate_unit_range(frame.pixels, "frame pixels")
    return frame.pixels


def _with_pixels(frame: Frame, pixels: np.ndarray, kind: WeatherKind) -> Frame:
    return Frame(
        width=frame.width,
        height=frame.height,
        pixels=np.clip(pixels, 0.0, 1.0),
        domain_tag=kind.domain,
    )


def depth_proxy(height: int) -> np.ndarray:
    """Per-row depth: 1 at the top row, falling linearly to 0 at the bottom"""
    return np.linspace(1.0, 0.0, height)


def transmission(height: int, fog_beta: float) -> np.ndarray:
    d = depth_proxy(height)
    # beta = inf must still leave the bottom row (d = 0) untouched
    with np.errstate(invalid="ignore"):
        t = np.where(d > 0.0, np.exp(-fog_beta * d), 1.0)
    return t


def apply_fog(frame: Frame, params: WeatherParams) -> Frame:
    pixels = _checked_pixels(frame)
    t = transmission(frame.height, params.fog_beta)[:, None, None]
    airlight = np.asarray(params.airlight, dtype=np.float64)[None, None, :]
    return _with_pixels(frame, pixels * t + airlight * (1.0 - t), WeatherKind.FOG)


def apply_dark(frame: Frame, params: WeatherParams) -> Frame:
    pixels = _checked_pixels(frame)
    return _with_pixels(
        frame, params.brightness * np.power(pixels, params.gamma), WeatherKind.DARK
    )


def rain_mask(height: int, width: int, params: WeatherParams) -> np.ndarray:
    """Binary (height, width) mask of rasterised streaks, deterministic in seed"""
    mask = np.zeros((height, width), dtype=np.float64)
    count = int(round(params.rain_density * height * width / 1000.0))
    if count == 0:
        return mask
    rng = np.random.default_rng(params.seed)
    x0 = rng.uniform(0.0, width, count)
    y0 = rng.uniform(-params.rain_length, height, count)
    lengths = params.rain_length * rng.uniform(0.6, 1.4, count)
    theta = math.radians(params.rain_angle)
    steps = int(math.ceil(2.0 * params.rain_length * 1.4)) + 1
    t = np.linspace(0.0, 1.0, steps)[None, :] * lengths[:, None]
    xs = np.floor(x0[:, None] + t * math.sin(theta)).astype(np.int64).ravel()
    ys = np.floor(y0[:, None] + t * math.cos(theta)).astype(np.int64).ravel()
    inside = (xs >= 0) & (xs < width) & (ys >= 0) & (ys < height)
    mask[ys[inside], xs[inside]] = 1.0
    return mask


def apply_rain(frame: Frame, params: WeatherParams) -> Frame:
    pixels = _checked_pixels(frame)
    m = params.rain_alpha * rain_mask(frame.height, frame.width, params)[:, :, None]
    out = pixels * (1.0 - m) + m * params.rain_intensity
    return _with_pixels(frame, out, WeatherKind.RAIN)


_APPLY = {
    WeatherKind.FOG: apply_fog,
    WeatherKind.DARK: apply_dark,
    WeatherKind.RAIN: apply_rain,
}


def apply_weather(frame: Frame, params: WeatherParams) -> Frame:
    """Dispatch on params.kind"""
    return _APPLY[params.kind](frame, params)


def is_neutral(params: WeatherParams) -> bool:
    """True when the corruption reduces to the identity"""
    if params.kind == WeatherKind.FOG:
        return params.fog_beta == 0.0
    if params.kind == WeatherKind.DARK:
        return params.gamma == 1.0 and params.brightness == 1.0
    return params.rain_alpha == 0.0 or params.rain_density == 0.0


def ssim(a: Union[Frame, np.ndarray], b: Union[Frame, np.ndarray]) -> float:
    """
    Mean SSIM over all 8x8 windows (stride 1) and channels

    Inputs are (H, W, C) arrays or Frames on the [0, 1] range.
    """
    x = np.asarray(a.pixels if isinstance(a, Frame) else a, dtype=np.float64)
    y = np.asarray(b.pixels if isinstance(b, Frame) else b, dtype=np.float64)
    if x.shape != y.shape:
        raise DimensionError(f"ssim needs equal shapes, got {x.shape} and {y.shape}")
    if x.ndim == 2:
        x, y = x[:, :, None], y[:, :, None]
    win = min(SSIM_WINDOW, x.shape[0], x.shape[1])
    shape = (win, win)

    wx = sliding_window_view(x, shape, axis=(0, 1))
    wy = sliding_window_view(y, shape, axis=(0, 1))
    mu_x = wx.mean(axis=(-2, -1))
    mu_y = wy.mean(axis=(-2, -1))
    var_x = (wx**2).mean(axis=(-2, -1)) - mu_x**2
    var_y = (wy**2).mean(axis=(-2, -1)) - mu_y**2
    cov = (wx * wy).mean(axis=(-2, -1)) - mu_x * mu_y

    num = (2 * mu_x * mu_y + SSIM_C1) * (2 * cov + SSIM_C2)
    den = (mu_x**2 + mu_y**2 + SSIM_C1) * (var_x + var_y + SSIM_C2)
    return float(np.mean(num / den))
