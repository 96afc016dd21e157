"""Per-segment decorrelation decay fitting.

Normalized OCTA values are compiled over a spatial domain (capillary segment
or cuboid) into an M_vox x (N-1) matrix, column medians are taken per
interscan time, and OCTA(tau) = beta * (1 - exp(-alpha * tau)) is fitted by
least squares. beta is linear given alpha, so the fit profiles beta in closed
form (clamped to [0, 1]) and searches alpha on a coarse log grid followed by
bounded local refinement — deterministic, no starting-point dependence.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.optimize import minimize_scalar

from ._parallel import ordered_map
from .volume import ScanProtocol, round_half_up

ALPHA_BOUNDS = (0.01, 20.0)   # 1/ms; brackets the display range with margin
N_MIN_VOXELS = 10
GRID_POINTS = 64


@dataclass
class OctaMatrix:
    segment_id: int
    values: np.ndarray          # (n_voxels, N-1) normalized OCTA
    voxel_index: np.ndarray     # (n_voxels, 3) (y, x, z)
    taus_ms: np.ndarray         # (N-1,)

    @property
    def slow_range(self) -> tuple[int, int]:
        ys = self.voxel_index[:, 0]
        return int(ys.min()), int(ys.max())


@dataclass
class DecayFit:
    alpha: float                # 1/ms (nan when insufficient)
    beta: float
    residual_rms: float
    n_voxels: int
    status: str                 # ok | clamped_high | clamped_low | insufficient


def voxel_buckets(ids: np.ndarray) -> dict[int, np.ndarray]:
    """Map nonzero segment id -> flat voxel indices, in one pass."""
    flat = ids.ravel()
    order = np.argsort(flat, kind="stable")
    sorted_ids = flat[order]
    uniq, starts = np.unique(sorted_ids, return_index=True)
    out = {}
    bounds = list(starts) + [len(flat)]
    for i, sid in enumerate(uniq):
        if sid == 0:
            continue
        out[int(sid)] = order[bounds[i]:bounds[i + 1]]
    return out


def compile_matrix(ids: np.ndarray, octa_norm: np.ndarray, segment_id: int,
                   taus_ms: np.ndarray,
                   flat_index: np.ndarray | None = None) -> OctaMatrix:
    """Gather one row per voxel carrying segment_id, one column per interscan time."""
    if flat_index is None:
        flat_index = np.nonzero(ids.ravel() == segment_id)[0]
        if flat_index.size == 0:
            raise KeyError(f"unknown segment id {segment_id}")
    n_m = octa_norm.shape[0]
    vals = octa_norm.reshape(n_m, -1)[:, flat_index].T
    coords = np.stack(np.unravel_index(flat_index, ids.shape), axis=1)
    return OctaMatrix(segment_id=segment_id, values=vals.astype(np.float64),
                      voxel_index=coords, taus_ms=np.asarray(taus_ms, dtype=np.float64))


def column_medians(matrix: OctaMatrix) -> tuple[np.ndarray, np.ndarray]:
    if matrix.values.shape[0] < 1:
        raise ValueError("empty matrix")
    return matrix.taus_ms, np.median(matrix.values, axis=0)


def _profile_beta(alpha: float, taus: np.ndarray, ys: np.ndarray) -> tuple[float, float]:
    """Closed-form beta (clamped to [0,1]) and SSE at a given alpha."""
    m = 1.0 - np.exp(-alpha * taus)
    denom = float(m @ m)
    beta = float(np.clip((ys @ m) / denom, 0.0, 1.0)) if denom > 0 else 0.0
    r = ys - beta * m
    return beta, float(r @ r)


def fit_decay(taus_ms, ys, alpha_bounds=ALPHA_BOUNDS, n_voxels: int = 0) -> DecayFit:
    """Least-squares (alpha, beta) for OCTA(tau) = beta*(1 - exp(-alpha*tau))."""
    taus = np.asarray(taus_ms, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    if taus.size < 2 or ys.size != taus.size:
        return DecayFit(np.nan, np.nan, np.nan, n_voxels, "insufficient")
    lo, hi = alpha_bounds

    def sse(a):
        return _profile_beta(a, taus, ys)[1]

    grid = np.geomspace(lo, hi, GRID_POINTS)
    errs = [sse(a) for a in grid]
    i = int(np.argmin(errs))
    blo = grid[i - 1] if i > 0 else lo
    bhi = grid[i + 1] if i < len(grid) - 1 else hi
    res = minimize_scalar(sse, bounds=(blo, bhi), method="bounded",
                          options={"xatol": 1e-10})
    # the bounded search never lands exactly on a bound; compare explicitly
    candidates = [(sse(lo), lo), (sse(hi), hi), (float(res.fun), float(res.x))]
    best_err, alpha = min(candidates, key=lambda t: (t[0], t[1]))
    beta, err = _profile_beta(alpha, taus, ys)
    if alpha <= lo * (1 + 1e-6):
        status = "clamped_low"
    elif alpha >= hi * (1 - 1e-6):
        status = "clamped_high"
    else:
        status = "ok"
    return DecayFit(alpha=float(alpha), beta=beta,
                    residual_rms=float(np.sqrt(err / taus.size)),
                    n_voxels=n_voxels, status=status)


def fit_all_segments(ids: np.ndarray, octa_norm: np.ndarray, graph,
                     protocol: ScanProtocol, n_min: int = N_MIN_VOXELS,
                     workers: int | None = None
                     ) -> tuple[dict[int, DecayFit], np.ndarray]:
    """Fit every graph link independently; return fits and the skeleton alpha map.

    Segments with fewer than n_min voxels are flagged insufficient and left
    out of the map. The alpha map is (Y, X) with NaN where undefined; each
    skeleton pixel carries its segment's fitted alpha.
    """
    taus = protocol.interscan_times_ms
    buckets = voxel_buckets(ids)
    link_ids = sorted(link.segment_id for link in graph.links)

    def fit_one(sid):
        idx = buckets.get(sid)
        if idx is None or idx.size < n_min:
            return sid, DecayFit(np.nan, np.nan, np.nan,
                                 0 if idx is None else int(idx.size), "insufficient")
        mat = compile_matrix(ids, octa_norm, sid, taus, flat_index=idx)
        _, med = column_medians(mat)
        return sid, fit_decay(taus, med, n_voxels=int(idx.size))

    fits = dict(ordered_map(fit_one, link_ids, workers))

    alpha_map = np.full(octa_norm.shape[1:3], np.nan, dtype=np.float32)
    for link in graph.links:
        fit = fits.get(link.segment_id)
        if fit is None or fit.status == "insufficient":
            continue
        px = np.asarray(link.pixels)
        alpha_map[px[:, 0], px[:, 1]] = fit.alpha
    return fits, alpha_map


def cuboid_grid_shape(cuboid_um, protocol: ScanProtocol) -> tuple[int, int, int]:
    """Cuboid size in voxels (y, x, z), round-half-up per axis, minimum 1."""
    cy = max(1, round_half_up(cuboid_um[1] / protocol.ascan_spacing_um))
    cx = max(1, round_half_up(cuboid_um[0] / protocol.ascan_spacing_um))
    cz = max(1, round_half_up(cuboid_um[2] / protocol.axial_spacing_um))
    return cy, cx, cz


def fit_cuboids(octa_norm: np.ndarray, z_range: tuple[int, int],
                protocol: ScanProtocol, cuboid_um=(53.0, 53.0, 8.0),
                beta_floor: float = 0.02, workers: int | None = None):
    """Tile a flattened slab with non-overlapping cuboids and fit each one.

    Returns (fits grid list-of-lists, alpha grid, low_signal flag grid).
    Cuboids whose fitted beta falls below beta_floor carry an unreliable
    alpha (no dynamic signal evidence) and are flagged.
    """
    z0, z1 = z_range
    if z1 <= z0:
        raise ValueError("empty slab z range")
    cy, cx, cz = cuboid_grid_shape(cuboid_um, protocol)
    if cz > (z1 - z0):
        cz = z1 - z0
    n_m, ny, nx = octa_norm.shape[:3]
    taus = protocol.interscan_times_ms
    gy, gx = ny // cy, nx // cx
    gz = max(1, (z1 - z0) // cz)

    def fit_cell(cell):
        iy, ix, iz = cell
        block = octa_norm[:, iy * cy:(iy + 1) * cy, ix * cx:(ix + 1) * cx,
                          z0 + iz * cz:z0 + (iz + 1) * cz]
        vals = block.reshape(n_m, -1)
        med = np.median(vals, axis=1)
        return fit_decay(taus, med, n_voxels=vals.shape[1])

    cells = [(iy, ix, iz) for iy in range(gy) for ix in range(gx) for iz in range(gz)]
    fits = ordered_map(fit_cell, cells, workers)
    alpha = np.full((gy, gx, gz), np.nan, dtype=np.float32)
    flags = np.zeros((gy, gx, gz), dtype=bool)
    grid = {}
    for cell, fit in zip(cells, fits):
        grid[cell] = fit
        low = (not np.isnan(fit.beta)) and fit.beta < beta_floor
        flags[cell] = low or fit.status == "insufficient"
        if fit.status != "insufficient" and not low:
            alpha[cell] = fit.alpha
    return grid, alpha, flags
