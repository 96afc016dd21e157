"""OCTA computation: pairwise decorrelation at all effective interscan times,
split-spectrum band averaging, and rigid inter-B-scan registration.

For repeats S_1..S_N (per band), interscan index M in 1..N-1 pairs S_j with
S_{j+M}. Per voxel:
  unnormalized(M) = mean over bands and pairs of |S_{j+M} - S_j|
  normalized(M)   = mean over bands and pairs of
                      (S_{j+M} - S_j)^2 / (S_{j+M}^2 + S_j^2)
with a pair contributing 0 when its denominator is 0. Squares act on
amplitudes by default; mode="complex" uses |dS|^2 / (|S1|^2 + |S2|^2).
"""

from __future__ import annotations

import numpy as np
from scipy import ndimage
from skimage.registration import phase_cross_correlation

from ._parallel import ordered_map
from .volume import OctVolume, OctaStack


def _pair_terms(s1, s2, mode):
    """Per-pair (unnorm term, norm term) for one repeat pair.

    Squares run in double precision: float32 amplitudes overflow their own
    square well inside the representable range.
    """
    if mode == "amplitude":
        s1 = np.asarray(s1, dtype=np.float64)
        s2 = np.asarray(s2, dtype=np.float64)
        diff = s1 - s2
        num = diff * diff
        den = s1 * s1 + s2 * s2
        un = np.abs(diff)
    else:
        s1 = np.asarray(s1, dtype=np.complex128)
        s2 = np.asarray(s2, dtype=np.complex128)
        diff = s1 - s2
        num = (diff * diff.conj()).real
        den = (s1 * s1.conj()).real + (s2 * s2.conj()).real
        un = np.abs(diff)
    norm = np.divide(num, den, out=np.zeros_like(num, dtype=np.float64),
                     where=den > 0)
    return un.astype(np.float64), norm


def octa_stack(vol: OctVolume, mode: str = "amplitude",
               workers: int | None = None) -> OctaStack:
    """Compute the OCTA stack over all M = 1..N-1."""
    if mode not in ("amplitude", "complex"):
        raise ValueError(f"bad mode {mode!r}")
    proto = vol.protocol
    n = proto.n_repeats
    if n < 2:
        raise ValueError("need at least 2 repeats")
    data = vol.data if (mode == "complex" and vol.kind == "complex") else vol.amplitudes()

    def one_m(m):
        un = np.zeros(proto.shape(), dtype=np.float64)
        no = np.zeros(proto.shape(), dtype=np.float64)
        count = proto.n_bands * (n - m)
        for b in range(proto.n_bands):
            for j in range(n - m):
                u, v = _pair_terms(data[b, j], data[b, j + m], mode)
                un += u
                no += v
        return (un / count).astype(np.float32), (no / count).astype(np.float32)

    results = ordered_map(one_m, range(1, n), workers)
    unnorm = np.stack([r[0] for r in results])
    norm = np.stack([r[1] for r in results])
    return OctaStack(unnormalized=unnorm, normalized=norm, protocol=proto)


def decorrelation_ratio(vol: OctVolume, voxel_mask: np.ndarray | None = None) -> np.ndarray:
    """Population decorrelation 0.5 * mean|dS|^2 / mean|S|^2 per interscan time.

    This is the ratio of the two averaged quantities (not the average of
    per-pair ratios, which is biased). Returns an (N-1,) array; exact for the
    complex field model where it equals beta*(1 - rho(tau)).
    """
    proto = vol.protocol
    n = proto.n_repeats
    data = vol.data
    if voxel_mask is not None:
        data = data[:, :, voxel_mask]  # (bands, repeats, n_vox)
    flat = data.reshape(proto.n_bands, n, -1)
    power = np.mean((flat * np.conj(flat)).real if np.iscomplexobj(flat) else flat**2)
    out = np.empty(n - 1)
    for m in range(1, n):
        d = flat[:, m:] - flat[:, :-m]
        msq = np.mean((d * np.conj(d)).real if np.iscomplexobj(d) else d**2)
        out[m - 1] = 0.5 * msq / power
    return out


MIN_REGISTER_CORR = 0.25


def _aligned_corr(ref: np.ndarray, moved: np.ndarray) -> float:
    """Pearson correlation over the shifted-in-frame part of moved."""
    sel = moved != 0
    if sel.sum() < 32:
        return 0.0
    a, b = ref[sel], moved[sel]
    sa, sb = a.std(), b.std()
    if sa == 0 or sb == 0:
        return 0.0
    return float(np.mean((a - a.mean()) * (b - b.mean())) / (sa * sb))


def register_bscans(stack: OctaStack, upsample: int = 10,
                    apply: bool = True) -> tuple[np.ndarray, OctaStack]:
    """Rigid (fast, depth) registration of each B-scan to its predecessor.

    Registration images are the per-position mean over the unnormalized
    stack's interscan times. Returns cumulative (dx, dz) shifts per slow
    position and, when apply=True, the shifted stack (spline order 1,
    zero fill outside the frame).

    A correlation peak found between two planes that do not actually
    resemble each other (pure noise, e.g. avascular regions) would send the
    cumulative track on a random walk, so a step is only accepted when the
    aligned planes correlate.
    """
    proto = stack.protocol
    ys = proto.n_bscans
    if ys < 2:
        raise ValueError("need at least 2 B-scan positions")
    ref_imgs = stack.unnormalized.mean(axis=0)  # (Y, X, Z)

    shifts = np.zeros((ys, 2))
    for y in range(1, ys):
        prev, cur = ref_imgs[y - 1], ref_imgs[y]
        if not prev.any() or not cur.any():
            continue  # degenerate B-scan, keep zero shift
        # classic cross-correlation: the default phase normalization whitens
        # the spectrum and loses subpixel accuracy on smooth images
        step, _, _ = phase_cross_correlation(prev, cur, upsample_factor=upsample,
                                             normalization=None)
        moved = ndimage.shift(cur, step, order=1, mode="constant", cval=0.0)
        if _aligned_corr(prev, moved) < MIN_REGISTER_CORR:
            step = 0.0  # peak is indistinguishable from noise
        shifts[y] = shifts[y - 1] + step
    if not apply or not shifts.any():
        return shifts, stack

    def shift_plane(args):
        plane, s = args
        if s[0] == 0 and s[1] == 0:
            return plane
        return ndimage.shift(plane, s, order=1, mode="constant", cval=0.0)

    unnorm = np.empty_like(stack.unnormalized)
    norm = np.empty_like(stack.normalized)
    for m in range(stack.unnormalized.shape[0]):
        planes_u = ordered_map(shift_plane, [(stack.unnormalized[m, y], shifts[y]) for y in range(ys)])
        planes_n = ordered_map(shift_plane, [(stack.normalized[m, y], shifts[y]) for y in range(ys)])
        unnorm[m] = np.stack(planes_u)
        norm[m] = np.stack(planes_n)
    norm = np.clip(norm, 0.0, 1.0)
    return shifts, OctaStack(unnormalized=unnorm, normalized=norm, protocol=proto)


def band_windows(n_samples: int, n_bands: int, crossing: float = 0.64):
    """Gaussian spectral windows crossing at `crossing` of their peaks.

    Adjacent centers are d = 2*sigma*sqrt(2*ln(1/crossing)) apart; sigma is
    sized so the window set spans the sweep with ~2 sigma margins.
    """
    if n_bands < 1:
        raise ValueError("n_bands < 1")
    k = np.arange(n_samples)
    if n_bands == 1:
        sigma = (n_samples - 1) / 4.0
        centers = [(n_samples - 1) / 2.0]
    else:
        spread = 2.0 * np.sqrt(2.0 * np.log(1.0 / crossing))
        sigma = (n_samples - 1) / ((n_bands - 1) * spread + 4.0)
        if sigma < 1.0:  # narrower than the sampling carries no band
            raise ValueError("too many bands for this fringe length")
        d = spread * sigma
        mid = (n_samples - 1) / 2.0
        centers = [mid + (l - (n_bands - 1) / 2.0) * d for l in range(n_bands)]
    return [np.exp(-0.5 * ((k - c) / sigma) ** 2) for c in centers]


def split_bands(fringes: np.ndarray, n_bands: int) -> np.ndarray:
    """Window spectral fringes into bands and transform to complex A-scans.

    fringes: (..., n_samples) real spectral interferogram samples.
    Returns (n_bands, ..., n_samples//2) complex A-scans (positive depths).
    """
    n_samples = fringes.shape[-1]
    if n_samples < 2 * n_bands:
        raise ValueError("fringe length too short for band count")
    wins = band_windows(n_samples, n_bands)
    half = n_samples // 2
    out = np.empty((n_bands,) + fringes.shape[:-1] + (half,), dtype=np.complex64)
    for i, w in enumerate(wins):
        spec = np.fft.fft(fringes * w, axis=-1)
        out[i] = spec[..., :half]
    return out
