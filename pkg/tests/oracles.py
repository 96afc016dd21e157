"""Independent reference implementations for cross-checking package results.

Everything here is deliberately literal: plain loops, textbook formulas, and
scipy primitives the package does not use for the same job. Nothing imports
from vistaocta, so agreement between the two routes is evidence, not
tautology.
"""

from __future__ import annotations

import numpy as np
from scipy import ndimage
from scipy.optimize import curve_fit


def pair_metrics(s1, s2, mode: str = "amplitude") -> tuple[float, float]:
    """(unnormalized, normalized) flow metric for one repeat pair, one voxel."""
    if mode == "amplitude":
        a, b = abs(s1), abs(s2)
        num = (a - b) ** 2
        den = a * a + b * b
        un = abs(a - b)
    else:
        d = s1 - s2
        num = abs(d) ** 2
        den = abs(s1) ** 2 + abs(s2) ** 2
        un = abs(d)
    return un, (num / den if den > 0 else 0.0)


def octa_voxel(series: np.ndarray, m: int, mode: str = "amplitude"
               ) -> tuple[float, float]:
    """Scalar reference for the stack value at interscan index m.

    series: (n_bands, n_repeats) samples of one voxel. Averages the pair
    metric over every band and every ordered pair (j, j+m).
    """
    n_bands, n = series.shape
    uns, nos = [], []
    for b in range(n_bands):
        for j in range(n - m):
            un, no = pair_metrics(series[b, j], series[b, j + m], mode)
            uns.append(un)
            nos.append(no)
    return float(np.mean(uns)), float(np.mean(nos))


def octa_volume(data: np.ndarray, mode: str = "amplitude"
                ) -> tuple[np.ndarray, np.ndarray]:
    """Loop-based stack over a (bands, repeats, Y, X, Z) array."""
    _, n, ny, nx, nz = data.shape
    unnorm = np.zeros((n - 1, ny, nx, nz))
    norm = np.zeros((n - 1, ny, nx, nz))
    for m in range(1, n):
        for iy in range(ny):
            for ix in range(nx):
                for iz in range(nz):
                    u, v = octa_voxel(data[:, :, iy, ix, iz], m, mode)
                    unnorm[m - 1, iy, ix, iz] = u
                    norm[m - 1, iy, ix, iz] = v
    return unnorm, norm


# E[(a-b)^2/(a^2+b^2)] for independent Rayleigh amplitudes: in polar
# coordinates the angle has density sin(2t) on [0, pi/2] and the radius drops
# out, leaving 1 - E[sin(2t)] = 1 - pi/4.
RAYLEIGH_SATURATION = 1.0 - np.pi / 4.0


def correlated_amplitude_norm(alpha: float, tau_ms: float, n_samples: int,
                              seed: int = 0) -> tuple[float, float]:
    """Monte-Carlo mean and standard error of the normalized metric for
    amplitude pairs of a unit-power complex process with correlation
    exp(-alpha * tau)."""
    rng = np.random.default_rng(seed)
    rho = np.exp(-alpha * tau_ms)
    z1 = (rng.standard_normal(n_samples) + 1j * rng.standard_normal(n_samples)) / np.sqrt(2)
    w = (rng.standard_normal(n_samples) + 1j * rng.standard_normal(n_samples)) / np.sqrt(2)
    z2 = rho * z1 + np.sqrt(1 - rho * rho) * w
    a, b = np.abs(z1), np.abs(z2)
    vals = (a - b) ** 2 / (a * a + b * b)
    return float(vals.mean()), float(vals.std(ddof=1) / np.sqrt(n_samples))


def autocorrelation(x: np.ndarray, lag: int) -> float:
    """Sample autocorrelation at the given lag (complex-aware)."""
    a, b = x[:-lag], x[lag:]
    num = np.mean((a - a.mean()) * np.conj(b - b.mean()))
    den = np.sqrt(np.mean(np.abs(a - a.mean()) ** 2) * np.mean(np.abs(b - b.mean()) ** 2))
    return float(num.real / den)


def fit_decay_reference(taus, ys, n_starts: int = 24) -> tuple[float, float]:
    """Multi-start bounded curve_fit of y = b * (1 - exp(-a * t)).

    Returns the (alpha, beta) with the lowest SSE over the starts; used only
    on well-conditioned inputs, so clamping policy does not matter here.
    """
    taus = np.asarray(taus, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)

    def model(t, a, b):
        return b * (1.0 - np.exp(-a * t))

    best = (np.inf, np.nan, np.nan)
    for a0 in np.geomspace(0.02, 15.0, n_starts):
        try:
            popt, _ = curve_fit(model, taus, ys, p0=[a0, min(max(ys.max(), 1e-3), 1.0)],
                                bounds=([1e-4, 0.0], [50.0, 1.0]), maxfev=2000)
        except RuntimeError:
            continue
        sse = float(np.sum((model(taus, *popt) - ys) ** 2))
        if sse < best[0]:
            best = (sse, float(popt[0]), float(popt[1]))
    return best[1], best[2]


def otsu_threshold_reference(values: np.ndarray, n_bins: int = 256) -> float:
    """Exhaustive between-class-variance scan over histogram cut points.

    Operates on the raw values handed in (callers pre-apply any log), and
    returns the chosen bin edge.
    """
    hist, edges = np.histogram(values, bins=n_bins)
    total = hist.sum()
    centers = 0.5 * (edges[:-1] + edges[1:])
    best_var, best_edge = -1.0, edges[1]
    for k in range(n_bins - 1):
        w0 = hist[:k + 1].sum()
        w1 = total - w0
        if w0 == 0 or w1 == 0:
            continue
        mu0 = (hist[:k + 1] * centers[:k + 1]).sum() / w0
        mu1 = (hist[k + 1:] * centers[k + 1:]).sum() / w1
        var_b = w0 * w1 * (mu0 - mu1) ** 2
        if var_b > best_var:
            best_var, best_edge = var_b, edges[k + 1]
    return float(best_edge)


def _fibonacci_sphere(n: int) -> np.ndarray:
    """(n, 3) roughly uniform unit directions."""
    k = np.arange(n) + 0.5
    phi = np.arccos(1.0 - 2.0 * k / n)
    theta = np.pi * (1.0 + np.sqrt(5.0)) * k
    return np.stack([np.sin(phi) * np.cos(theta),
                     np.sin(phi) * np.sin(theta),
                     np.cos(phi)], axis=1)


def oof_spatial(vol: np.ndarray, radius_um: float, spacing_um,
                sigma_um: float, points, n_dirs: int = 800):
    """Spatial-domain oriented-flux matrix at the given voxel indices.

    Direct realization of the definition: smooth the volume with a Gaussian,
    take its gradient with derivative-of-Gaussian filters, and average
    grad_i(x + r*nhat) * nhat_j over quadrature directions on the sphere
    (area-normalized flux). The volume is treated as periodic to match
    circular convolution. Returns (eigs, m) with eigenvalues sorted by
    descending magnitude, shape (len(points), 3).
    """
    spacing = np.asarray(spacing_um, dtype=np.float64)
    sig_px = sigma_um / spacing
    grads = [ndimage.gaussian_filter(vol.astype(np.float64), sig_px,
                                     order=tuple(int(i == ax) for ax in range(3)),
                                     mode="wrap", truncate=8.0) / spacing[i]
             for i in range(3)]
    dirs = _fibonacci_sphere(n_dirs)

    eigs = np.empty((len(points), 3))
    m_out = np.empty(len(points))
    for p_i, idx in enumerate(points):
        pos_um = np.asarray(idx, dtype=np.float64) * spacing
        sample_px = ((pos_um[None, :] + radius_um * dirs) / spacing).T
        q = np.zeros((3, 3))
        for i in range(3):
            gi = ndimage.map_coordinates(grads[i], sample_px, order=3,
                                         mode="grid-wrap")
            for j in range(3):
                q[i, j] = np.mean(gi * dirs[:, j])
        q = 0.5 * (q + q.T)
        ev = np.linalg.eigvalsh(q)
        ev = ev[np.argsort(-np.abs(ev), kind="stable")]
        eigs[p_i] = ev
        l1, l2 = ev[0], ev[1]
        both_neg = l1 <= 0 and l2 <= 0 and (l1 < 0 or l2 < 0)
        m_out[p_i] = np.sqrt(abs(l1 * l2)) if both_neg else 0.0
    return eigs, m_out


def lowess_point_reference(grid: np.ndarray, iy: int, ix: int,
                           window: int) -> float:
    """Weighted linear regression at one pixel with a tricube kernel.

    Mirrors the smoothing contract pointwise (truncated window at edges,
    NaN samples dropped) using an explicit design-matrix solve.
    """
    h = window // 2
    rows, cols, w, z = [], [], [], []
    radius = h + 0.5
    for du in range(-h, h + 1):
        for dv in range(-h, h + 1):
            u, v = iy + du, ix + dv
            if not (0 <= u < grid.shape[0] and 0 <= v < grid.shape[1]):
                continue
            val = grid[u, v]
            if not np.isfinite(val):
                continue
            r = np.sqrt(du * du + dv * dv) / radius
            wt = max(0.0, 1.0 - r ** 3) ** 3
            if wt <= 0:
                continue
            rows.append(du)
            cols.append(dv)
            w.append(wt)
            z.append(val)
    w = np.asarray(w)
    design = np.stack([np.ones(len(rows)), np.asarray(rows, float),
                       np.asarray(cols, float)], axis=1)
    wd = design * w[:, None]
    coef, *_ = np.linalg.lstsq(wd.T @ design, wd.T @ np.asarray(z), rcond=None)
    return float(coef[0])
