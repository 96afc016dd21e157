"""Retinal layer segmentation, flattening, local-regression smoothing, slabs.

Surfaces are per-(y, x) depths in um from the volume top. The working volume
for detection is the mean amplitude over bands and repeats. Axial features:
RPE = brightest band, ILM = strongest intensity increase along depth, RNFL
posterior = strongest decrease below the ILM, INL center = intensity minimum
between RNFL posterior and the RPE.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .volume import LayerSurfaces, OctVolume, ScanProtocol, SlabSpec, round_half_up


@dataclass(frozen=True)
class LayerConfig:
    rpe_span_um: float = 500.0
    ilm_span_um: float = 150.0
    inl_span_um: float = 300.0
    rnfl_thickness_span_um: float = 1000.0
    rpe_fine_window_um: float = 20.0       # search half-window around coarse RPE
    rpe_fine_median_um: float = 200.0
    ilm_skip_top_px: int = 10
    rnflp_band_um: tuple = (15.0, 150.0)   # search band below the ILM
    inl_margin_um: tuple = (10.0, 60.0)    # below RNFLp / above RPE
    min_signal_fraction: float = 0.05      # of the p99 amplitude
    override_window_um: float = 15.0


def mean_amplitude(vol: OctVolume) -> np.ndarray:
    """(Y, X, Z) mean over bands and repeats."""
    return vol.amplitudes().mean(axis=(0, 1)).astype(np.float32)


def _odd_window(span_um: float, spacing_um: float, minimum: int = 3) -> int:
    w = max(minimum, round_half_up(span_um / spacing_um))
    return w if w % 2 == 1 else w + 1


def _fill_invalid(grid: np.ndarray, valid: np.ndarray) -> np.ndarray:
    """Replace invalid samples with the nearest valid one (Euclidean)."""
    if valid.all():
        return grid
    if not valid.any():
        raise ValueError("no valid samples to fill from")
    idx = ndimage.distance_transform_edt(~valid, return_distances=False,
                                         return_indices=True)
    return grid[tuple(idx)]


def lowess_2d(grid: np.ndarray, span_um: float, spacing_um: float) -> np.ndarray:
    """Locally weighted linear regression over a tricube window.

    Exact on constant and planar inputs (including edges, where the window is
    truncated); NaN samples are excluded and in-filled by the local model.
    """
    win = _odd_window(span_um, spacing_um)
    if win < 3:
        raise ValueError("span smaller than 3 samples")
    h = win // 2
    uu, vv = np.meshgrid(np.arange(-h, h + 1), np.arange(-h, h + 1), indexing="ij")
    radius = h + 0.5
    r = np.sqrt(uu**2 + vv**2) / radius
    kern = np.clip(1.0 - r**3, 0.0, None) ** 3

    valid = np.isfinite(grid)
    z = np.where(valid, grid, 0.0).astype(np.float64)
    v = valid.astype(np.float64)

    def corr(img, k):
        return ndimage.correlate(img, k, mode="constant", cval=0.0)

    # weighted moments for the per-pixel normal equations
    mats = {}
    for name, k in (("w", kern), ("wu", kern * uu), ("wv", kern * vv),
                    ("wuu", kern * uu * uu), ("wuv", kern * uu * vv),
                    ("wvv", kern * vv * vv)):
        mats[name] = corr(v, k)
    rhs = {}
    for name, k in (("wz", kern), ("wuz", kern * uu), ("wvz", kern * vv)):
        rhs[name] = corr(z, k)

    ny, nx = grid.shape
    A = np.empty((ny, nx, 3, 3))
    A[..., 0, 0] = mats["w"]
    A[..., 0, 1] = A[..., 1, 0] = mats["wu"]
    A[..., 0, 2] = A[..., 2, 0] = mats["wv"]
    A[..., 1, 1] = mats["wuu"]
    A[..., 1, 2] = A[..., 2, 1] = mats["wuv"]
    A[..., 2, 2] = mats["wvv"]
    b = np.stack([rhs["wz"], rhs["wuz"], rhs["wvz"]], axis=-1)

    scale = mats["w"] * (mats["wuu"] * mats["wvv"]) + 1e-30
    det = np.linalg.det(A)
    solvable = np.abs(det) > 1e-9 * scale
    out = np.where(mats["w"] > 0, rhs["wz"] / np.maximum(mats["w"], 1e-30), np.nan)
    if solvable.any():
        sol = np.linalg.solve(A[solvable], b[solvable][..., None])
        out[solvable] = sol[:, 0, 0]
    return out


def segment_rpe(vol: OctVolume, config: LayerConfig = LayerConfig()) -> np.ndarray:
    """Coarse RPE surface (um): brightest axially-smoothed band, lowess-smoothed."""
    mean_vol = mean_amplitude(vol)
    return segment_rpe_from_mean(mean_vol, vol.protocol, config)


def segment_rpe_from_mean(mean_vol: np.ndarray, proto: ScanProtocol,
                          config: LayerConfig = LayerConfig()) -> np.ndarray:
    smoothed = ndimage.gaussian_filter1d(mean_vol, sigma=1.5, axis=2)
    z_idx = smoothed.argmax(axis=2)
    peak = np.take_along_axis(smoothed, z_idx[:, :, None], axis=2)[:, :, 0]
    valid = peak > config.min_signal_fraction * np.percentile(smoothed, 99)
    depth = z_idx.astype(np.float64) * proto.axial_spacing_um
    depth = _fill_invalid(depth, valid)
    return lowess_2d(depth, config.rpe_span_um, proto.ascan_spacing_um)


def flatten_shifts(surface_um: np.ndarray, proto: ScanProtocol
                   ) -> tuple[np.ndarray, int]:
    """Integer per-column shifts that bring the surface to a common depth."""
    surf_px = surface_um / proto.axial_spacing_um
    ref = int(round(float(np.median(surf_px))))
    shifts = np.round(surf_px - ref).astype(np.int32)
    return shifts, ref


def flatten(arr: np.ndarray, shifts: np.ndarray) -> np.ndarray:
    """Shift each (y, x) column by -shifts[y, x] px along depth; zero fill.

    Works on (Y, X, Z) arrays; apply the negated shifts to invert (up to
    edge fill).
    """
    ny, nx, nz = arr.shape
    z = np.arange(nz)
    out = np.zeros_like(arr)
    for y in range(ny):
        src = z[None, :] + shifts[y][:, None]          # (X, Z) source depths
        ok = (src >= 0) & (src < nz)
        src_c = np.clip(src, 0, nz - 1)
        row = np.take_along_axis(arr[y], src_c, axis=1)
        out[y] = np.where(ok, row, 0)
    return out


def _grad_z(img: np.ndarray) -> np.ndarray:
    return np.gradient(img, axis=-1)


def segment_inner_layers(flat_mean: np.ndarray, rpe_ref_px: int,
                         proto: ScanProtocol,
                         config: LayerConfig = LayerConfig(),
                         overrides=None) -> LayerSurfaces:
    """ILM / RNFL-posterior / INL-center from an RPE-flattened mean volume.

    overrides: optional list of (y, x, layer, depth_um) guidance points; the
    raw detection is constrained to the feature extremum within
    override_window_um of the given depth, and overridden columns are
    re-pinned after smoothing.
    """
    az = proto.axial_spacing_um
    sp = proto.ascan_spacing_um
    pre = ndimage.uniform_filter(flat_mean, size=(3, 3, 1))
    pre = ndimage.gaussian_filter1d(pre, sigma=1.0, axis=2)
    grad = _grad_z(pre)
    ny, nx, nz = pre.shape

    top = config.ilm_skip_top_px
    stop = max(top + 2, rpe_ref_px - 2)
    ilm_px = top + grad[:, :, top:stop].argmax(axis=2)

    lo_off = max(1, round_half_up(config.rnflp_band_um[0] / az))
    hi_off = max(lo_off + 2, round_half_up(config.rnflp_band_um[1] / az))
    z = np.arange(nz)
    zz = z[None, None, :]
    in_band = (zz >= ilm_px[:, :, None] + lo_off) & (zz <= ilm_px[:, :, None] + hi_off) \
        & (zz < rpe_ref_px - 2)
    g_masked = np.where(in_band, grad, np.inf)
    rnflp_px = g_masked.argmin(axis=2)

    inl_lo = max(1, round_half_up(config.inl_margin_um[0] / az))
    inl_hi = max(1, round_half_up(config.inl_margin_um[1] / az))
    in_band = (zz >= rnflp_px[:, :, None] + inl_lo) & (zz <= rpe_ref_px - inl_hi)
    i_masked = np.where(in_band, pre, np.inf)
    inl_px = i_masked.argmin(axis=2)

    flagged = ~np.isfinite(np.take_along_axis(g_masked, rnflp_px[:, :, None], 2)[:, :, 0])
    flagged |= ~np.isfinite(np.take_along_axis(i_masked, inl_px[:, :, None], 2)[:, :, 0])
    # no usable gradient at all (uniform volume) also flags the column
    flagged |= grad[:, :, top:stop].max(axis=2) <= 1e-12

    override_map = {}
    if overrides:
        half = max(1, round_half_up(config.override_window_um / az))
        for (oy, ox, layer, depth_um) in overrides:
            zc = int(round(depth_um / az))
            zlo, zhi = max(0, zc - half), min(nz, zc + half + 1)
            if layer == "ilm":
                ilm_px[oy, ox] = zlo + grad[oy, ox, zlo:zhi].argmax()
            elif layer == "rnfl_posterior":
                rnflp_px[oy, ox] = zlo + grad[oy, ox, zlo:zhi].argmin()
            elif layer == "inl_center":
                inl_px[oy, ox] = zlo + pre[oy, ox, zlo:zhi].argmin()
            else:
                raise ValueError(f"unknown override layer {layer!r}")
            flagged[oy, ox] = False
            override_map[(oy, ox, layer)] = depth_um

    valid = ~flagged
    ilm_um = _fill_invalid(ilm_px * az, valid)
    rnflp_um = _fill_invalid(rnflp_px * az, valid)
    inl_um = _fill_invalid(inl_px * az, valid)

    ilm_s = lowess_2d(ilm_um, config.ilm_span_um, sp)
    thick_s = lowess_2d(rnflp_um - ilm_um, config.rnfl_thickness_span_um, sp)
    rnflp_s = ilm_s + thick_s
    inl_s = lowess_2d(inl_um, config.inl_span_um, sp)

    for (oy, ox, layer), depth_um in override_map.items():
        if layer == "ilm":
            ilm_s[oy, ox] = depth_um
        elif layer == "rnfl_posterior":
            rnflp_s[oy, ox] = depth_um
        else:
            inl_s[oy, ox] = depth_um

    rpe_um = np.full((ny, nx), rpe_ref_px * az, dtype=np.float64)
    surfaces = LayerSurfaces(ilm=ilm_s, rnfl_posterior=rnflp_s, inl_center=inl_s,
                             rpe=rpe_um, flagged=flagged)
    ordered = surfaces.check_ordering()
    bad = ~ordered & ~flagged
    if bad.any():
        surfaces.flagged = flagged | bad
        keep = ~surfaces.flagged
        surfaces.ilm = _fill_invalid(surfaces.ilm, keep)
        surfaces.rnfl_posterior = _fill_invalid(surfaces.rnfl_posterior, keep)
        surfaces.inl_center = _fill_invalid(surfaces.inl_center, keep)
    return surfaces


def refine_rpe(flat_mean: np.ndarray, rpe_ref_px: int, proto: ScanProtocol,
               config: LayerConfig = LayerConfig()) -> tuple[np.ndarray, np.ndarray]:
    """Fine RPE: posterior-most local peak within the window, median filtered.

    Returns (surface um, fallback flags).
    """
    az = proto.axial_spacing_um
    pre = ndimage.gaussian_filter(flat_mean, sigma=(1.0, 1.0, 0.0))
    half = max(1, round_half_up(config.rpe_fine_window_um / az))
    zlo = max(1, rpe_ref_px - half)
    zhi = min(pre.shape[2] - 1, rpe_ref_px + half)
    seg = pre[:, :, zlo - 1:zhi + 2]
    inner = seg[:, :, 1:-1]
    is_peak = (inner >= seg[:, :, :-2]) & (inner >= seg[:, :, 2:])
    zz = np.arange(zlo, zhi + 1)[None, None, :]
    cand = np.where(is_peak, zz, -1)
    fine_px = cand.max(axis=2)
    fallback = fine_px < 0
    fine_px = np.where(fallback, rpe_ref_px, fine_px)
    win = _odd_window(config.rpe_fine_median_um, proto.ascan_spacing_um)
    fine_um = ndimage.median_filter(fine_px.astype(np.float64) * az,
                                    size=(win, win), mode="nearest")
    return fine_um, fallback


def slab_mask(slab: SlabSpec, surfaces: LayerSurfaces, proto: ScanProtocol,
              n_depth: int) -> tuple[np.ndarray, np.ndarray]:
    """Boolean (Y, X, Z) of voxels whose center depth lies in [anterior, posterior).

    Returns (mask, empty-column flags).
    """
    ant, post = slab.bounds_um(surfaces)
    zz = np.arange(n_depth) * proto.axial_spacing_um
    mask = (zz[None, None, :] >= ant[:, :, None]) & (zz[None, None, :] < post[:, :, None])
    empty = ~mask.any(axis=2)
    return mask, empty


def extract_slab(arr: np.ndarray, slab: SlabSpec, surfaces: LayerSurfaces,
                 proto: ScanProtocol, reducer: str = "mean"
                 ) -> tuple[np.ndarray, np.ndarray]:
    """En-face reduction of a (Y, X, Z) array over the slab depth range."""
    mask, empty = slab_mask(slab, surfaces, proto, arr.shape[2])
    masked = np.where(mask, arr, 0.0)
    count = mask.sum(axis=2)
    if reducer == "mean":
        enface = masked.sum(axis=2) / np.maximum(count, 1)
    elif reducer == "max":
        enface = np.where(mask, arr, -np.inf).max(axis=2)
        enface = np.where(count > 0, enface, 0.0)
    else:
        raise ValueError(f"unknown reducer {reducer!r}")
    enface = np.where(empty, 0.0, enface)
    return enface.astype(np.float32), empty
