"""Color rendering of rate maps and depth-coded projections.

Hue encodes the decorrelation rate over a fixed display range, brightness
encodes flow signal strength, and saturation marks where a rate is defined.
PNG output is fully deterministic (fixed encoder settings, no metadata).
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from PIL import Image

ALPHA_RANGE = (0.1, 2.5)
HUE_MAX = 0.67
VALUE_PERCENTILE = 99.0
MEDIAN_WINDOW = 5


def alpha_hue(alpha, alpha_range=ALPHA_RANGE) -> np.ndarray:
    """Blue (0.67) at the low end of the range to red (0.0) at the high end."""
    lo, hi = alpha_range
    frac = np.clip((np.asarray(alpha, dtype=np.float64) - lo) / (hi - lo), 0.0, 1.0)
    return HUE_MAX * (1.0 - frac)


def nan_median_filter(img: np.ndarray, size: int = MEDIAN_WINDOW) -> np.ndarray:
    """Median over the size x size window ignoring NaNs; NaN stays NaN."""
    half = size // 2
    padded = np.pad(img.astype(np.float64), half, constant_values=np.nan)
    win = np.lib.stride_tricks.sliding_window_view(padded, (size, size))
    defined = np.isfinite(img)
    out = np.full(img.shape, np.nan)
    if defined.any():
        med = np.nanmedian(win[defined], axis=(-2, -1))
        out[defined] = med
    return out


def hsv_to_rgb(h: np.ndarray, s: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Vectorized hexcone conversion; inputs in [0, 1], output float in [0, 1]."""
    h6 = (np.asarray(h) % 1.0) * 6.0
    i = np.floor(h6).astype(int) % 6
    f = h6 - np.floor(h6)
    p = v * (1.0 - s)
    q = v * (1.0 - s * f)
    t = v * (1.0 - s * (1.0 - f))
    choices = [(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)]
    rgb = np.zeros(h6.shape + (3,))
    for k, (r, g, b) in enumerate(choices):
        sel = i == k
        rgb[sel, 0] = np.broadcast_to(r, h6.shape)[sel]
        rgb[sel, 1] = np.broadcast_to(g, h6.shape)[sel]
        rgb[sel, 2] = np.broadcast_to(b, h6.shape)[sel]
    return rgb


@dataclass
class RenderInfo:
    alpha_range: tuple
    value_percentile: float
    median_window: int
    value_scale: float

    def to_json(self) -> str:
        return json.dumps({"alpha_range": list(self.alpha_range),
                           "value_percentile": self.value_percentile,
                           "median_window": self.median_window,
                           "value_scale": self.value_scale}, sort_keys=True)


def vista_image(alpha_map: np.ndarray, enface_flow: np.ndarray,
                alpha_range=ALPHA_RANGE, median_window: int = MEDIAN_WINDOW,
                value_percentile: float = VALUE_PERCENTILE
                ) -> tuple[np.ndarray, RenderInfo]:
    """Rate-colored en-face image.

    alpha_map: (Y, X) rates, NaN where undefined. enface_flow: (Y, X)
    unnormalized flow signal setting the brightness (sqrt-compressed, scaled
    so its value_percentile maps to 1.0). Returns (uint8 RGB, render info).
    """
    alpha_f = nan_median_filter(alpha_map, median_window)
    defined = np.isfinite(alpha_f)
    hue = np.where(defined, alpha_hue(np.where(defined, alpha_f, 0.0),
                                      alpha_range), 0.0)
    sat = defined.astype(np.float64)
    value = np.sqrt(np.clip(enface_flow.astype(np.float64), 0.0, None))
    scale = float(np.percentile(value, value_percentile))
    if scale > 0:
        value = np.clip(value / scale, 0.0, 1.0)
    else:
        value = np.zeros_like(value)
    rgb = hsv_to_rgb(hue, sat, value)
    img = np.round(rgb * 255.0).astype(np.uint8)
    return img, RenderInfo(tuple(alpha_range), value_percentile,
                           median_window, scale)


def segment_alpha_map(id_img: np.ndarray, seg_alpha: dict) -> np.ndarray:
    """(Y, X) map where every pixel of a segment carries the segment's rate."""
    out = np.full(id_img.shape, np.nan)
    for seg_id, alpha in seg_alpha.items():
        if np.isfinite(alpha):
            out[id_img == seg_id] = alpha
    return out


def enface(vol: np.ndarray, slab: np.ndarray, reducer: str = "mean") -> np.ndarray:
    """Per-column reduction of a (Y, X, Z) volume over slab voxels.

    Columns with no slab voxels come out 0.
    """
    smask = slab.astype(bool)
    count = smask.sum(axis=2)
    if reducer == "mean":
        out = np.where(smask, vol, 0.0).sum(axis=2) / np.maximum(count, 1)
    elif reducer == "max":
        out = vol.max(axis=2, initial=-np.inf, where=smask)
    elif reducer == "sum":
        out = np.where(smask, vol, 0.0).sum(axis=2)
    else:
        raise ValueError(f"unknown reducer {reducer!r}")
    return np.where(count > 0, out, 0.0)


def depth_colorcode(vol: np.ndarray, slab: np.ndarray,
                    value_percentile: float = VALUE_PERCENTILE) -> np.ndarray:
    """Depth-coded en-face projection of a (Y, X, Z) volume within a slab.

    Hue encodes the intensity-weighted mean relative depth inside the slab
    (anterior blue to posterior red), brightness the maximum intensity.
    """
    v = np.clip(vol.astype(np.float64), 0.0, None) * slab
    zz = np.arange(vol.shape[2], dtype=np.float64)
    wsum = v.sum(axis=2)
    mean_z = np.divide((v * zz).sum(axis=2), wsum,
                       out=np.zeros(wsum.shape), where=wsum > 0)
    lo = np.where(slab.any(axis=2), np.argmax(slab, axis=2), 0).astype(float)
    hi = (vol.shape[2] - 1 -
          np.argmax(slab[:, :, ::-1], axis=2)).astype(float)
    span = np.maximum(hi - lo, 1.0)
    depth_frac = np.clip((mean_z - lo) / span, 0.0, 1.0)
    hue = HUE_MAX * (1.0 - depth_frac)
    value = np.where(slab.any(axis=2), np.sqrt(vol.max(axis=2, initial=0.0,
                                                       where=slab)), 0.0)
    scale = np.percentile(value, value_percentile)
    value = np.clip(value / scale, 0, 1) if scale > 0 else np.zeros_like(value)
    sat = (wsum > 0).astype(np.float64)
    rgb = hsv_to_rgb(hue, sat, value)
    return np.round(rgb * 255.0).astype(np.uint8)


def save_png(img: np.ndarray, path, info: RenderInfo | None = None) -> None:
    """Write uint8 RGB with fixed encoder settings; optional JSON sidecar."""
    Image.fromarray(img, mode="RGB").save(str(path), format="PNG",
                                          optimize=False, compress_level=6)
    if info is not None:
        with open(str(path) + ".json", "w") as fh:
            fh.write(info.to_json() + "\n")
