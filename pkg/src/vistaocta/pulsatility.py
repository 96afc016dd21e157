"""Slow-axis pulsatility estimation and first-order compensation.

A sliding band of B-scan rows compiles every vessel voxel it covers into one
decay estimate; the relative modulation of that estimate along the slow axis
is the representative pulsatility g_rep(t), which divides out of per-pixel
rate estimates to first order.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .decay import column_medians, fit_decay
from .volume import ScanProtocol, round_half_up


@dataclass
class PulseTrace:
    y_centers: np.ndarray       # band-center row indices
    times_ms: np.ndarray        # imaging time of each band center
    alpha_band: np.ndarray      # per-band decay rate (1/ms)
    g_rep: np.ndarray           # relative modulation, zero mean over the trace
    flags: np.ndarray           # bands whose fit was replaced by interpolation
    band_rows: int
    window_ms: float

    def g_for_rows(self, n_rows: int) -> np.ndarray:
        """Per-row g_rep over the full slow axis, nearest-extended at edges."""
        g = np.empty(n_rows)
        lo, hi = int(self.y_centers[0]), int(self.y_centers[-1])
        g[:lo + 1] = self.g_rep[0]
        g[hi:] = self.g_rep[-1]
        if hi > lo:
            g[lo:hi + 1] = np.interp(np.arange(lo, hi + 1),
                                     self.y_centers, self.g_rep)
        return g


def band_rows(proto: ScanProtocol, window_ms: float = 100.0) -> int:
    """Rows per band: the window length over the per-position dwell time."""
    return max(1, round_half_up(window_ms / (proto.n_repeats * proto.dt_ms)))


def band_pulsatility(stack_norm: np.ndarray, vessel_vox: np.ndarray,
                     proto: ScanProtocol, window_ms: float = 100.0,
                     residual_factor: float = 3.0) -> PulseTrace:
    """Sliding-band decay trace over the slow axis.

    stack_norm: (M, Y, X, Z) normalized stack; vessel_vox: (Y, X, Z) mask of
    the voxels to compile (vessel voxels for retina slabs, the whole slab for
    choroid). Bands slide one row at a time; a band whose fit residual exceeds
    residual_factor x the trace median is replaced by linear interpolation of
    its neighbors and flagged.
    """
    n_m, ny = stack_norm.shape[0], stack_norm.shape[1]
    w = band_rows(proto, window_ms)
    if w > ny:
        raise ValueError("pulsatility window longer than the slow axis")
    taus = proto.interscan_times_ms

    row_vals = []
    for y in range(ny):
        sel = vessel_vox[y]
        row_vals.append(stack_norm[:, y][:, sel].T)   # (k_y, M)

    centers, alphas, resids, counts = [], [], [], []
    for y0 in range(ny - w + 1):
        vals = np.concatenate(row_vals[y0:y0 + w], axis=0)
        centers.append(y0 + w // 2)
        counts.append(vals.shape[0])
        if vals.shape[0] == 0:
            alphas.append(np.nan)
            resids.append(np.nan)
            continue
        fit = fit_decay(taus, np.median(vals, axis=0))
        alphas.append(fit.alpha)
        resids.append(fit.residual_rms)
    centers = np.asarray(centers)
    alphas = np.asarray(alphas, dtype=np.float64)
    resids = np.asarray(resids, dtype=np.float64)
    counts = np.asarray(counts)

    # bands grazing only a vessel edge carry too few voxels to trust
    thin = counts < 0.25 * np.median(counts[counts > 0]) if counts.any() else \
        np.ones_like(counts, bool)
    good = np.isfinite(alphas) & np.isfinite(resids) & ~thin
    if not good.any():
        raise ValueError("no usable pulsatility bands")
    med = float(np.median(resids[good]))
    flags = ~good | (resids > residual_factor * med)
    if flags.any() and (~flags).any():
        alphas[flags] = np.interp(centers[flags], centers[~flags], alphas[~flags])
    elif flags.all():
        raise ValueError("every pulsatility band was flagged")

    mean_alpha = float(alphas.mean())
    g = alphas / mean_alpha - 1.0
    g -= g.mean()   # exact zero mean over the trace
    times = centers * proto.n_repeats * proto.dt_ms
    return PulseTrace(y_centers=centers, times_ms=times.astype(np.float64),
                      alpha_band=alphas, g_rep=g, flags=flags,
                      band_rows=w, window_ms=window_ms)


def compensate(alpha_map: np.ndarray, trace: PulseTrace
               ) -> tuple[np.ndarray, np.ndarray]:
    """Divide the per-row modulation out of a (Y, X) rate map.

    Returns (resting-rate map, skipped-row flags); rows where 1 + g_rep <= 0
    are left uncompensated and flagged.
    """
    g = trace.g_for_rows(alpha_map.shape[0])
    denom = 1.0 + g
    bad = denom <= 0
    safe = np.where(bad, 1.0, denom)
    out = alpha_map / safe[:, None]
    return out, bad


def mmode_alpha_series(frames: np.ndarray, dt_ms: float,
                       tracks: list, window_ms: float = 100.0,
                       m_max: int = 7) -> list:
    """Per-track decay-rate time series from a repeated-B-scan acquisition.

    frames: (T, X, Z) amplitude frames at one slow-axis position, dt_ms apart.
    tracks: list of (x_idx, z_idx) integer-array pairs naming voxel groups.
    For every sliding window (length window_ms, step one frame) the frame
    pairs at lags 1..m_max are compiled exactly as in the volumetric case and
    fitted; returns one dict per track with times, alpha, and g = alpha/mean-1.
    """
    n_t = frames.shape[0]
    w_frames = max(m_max + 1, round_half_up(window_ms / dt_ms))
    if w_frames > n_t:
        raise ValueError("window longer than the acquisition")
    taus = np.arange(1, m_max + 1) * dt_ms

    out = []
    for x_idx, z_idx in tracks:
        sub = frames[:, x_idx, z_idx]                  # (T, k)
        ratios = []                                    # per lag: (T-m, k)
        for m in range(1, m_max + 1):
            a, b = sub[m:], sub[:-m]
            num = (a - b) ** 2
            den = a**2 + b**2
            ratios.append(np.divide(num, den, out=np.zeros_like(num),
                                    where=den > 0))
        starts = np.arange(n_t - w_frames + 1)
        alphas = np.empty(starts.size)
        for i, s in enumerate(starts):
            cols = []
            for m in range(1, m_max + 1):
                seg = ratios[m - 1][s:s + w_frames - m]
                cols.append(seg.mean(axis=0))          # per-voxel pair mean
            vals = np.stack(cols, axis=1)              # (k, m_max)
            fit = fit_decay(taus, np.median(vals, axis=0))
            alphas[i] = fit.alpha
        times = (starts + (w_frames - 1) / 2.0) * dt_ms
        mean_alpha = alphas.mean()
        out.append({"times_ms": times, "alpha": alphas,
                    "g": alphas / mean_alpha - 1.0})
    return out
