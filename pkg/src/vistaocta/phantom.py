"""Synthetic OCT volume generator with per-segment ground truth.

Voxel signal model per split-spectrum band:
    S(t_j) = A_static * phasor + sqrt(P_dyn) * x(t_j) + noise
where x is a stationary unit-power complex Ornstein-Uhlenbeck process whose
instantaneous decay rate is alpha0 * (1 + g(t)) and g is the injected cardiac
pulsatility waveform. Repeats at one slow position are dt apart; successive
slow positions are N*dt apart. The PSF blurs the complex field in the
(fast, depth) plane only; blurring across slow positions would mix samples
taken N*dt apart and corrupt the temporal statistics. Receiver noise is added
after the blur.

Determinism: all draws come from counter-based Philox streams keyed by
(seed, channel, band, repeat), so output is bit-identical for any worker
count. Channels: 0 dynamic, 1 noise, 2 static phase.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.ndimage import gaussian_filter

from ._parallel import ordered_map
from .volume import OctVolume, ScanProtocol


@dataclass(frozen=True)
class TubeSpec:
    """Straight or polyline vessel segment with its own dynamics."""

    points_um: tuple          # ((x,y,z), (x,y,z), ...) centerline vertices
    radius_um: float
    alpha0: float             # decay rate, 1/ms
    dynamic_fraction: float   # dynamic power / total power inside the tube
    total_power: float = 1.21
    pulse_scale: float = 1.0
    pulse_phase: float = 0.0  # extra phase, fraction of a period


@dataclass(frozen=True)
class CuboidSpec:
    """Axis-aligned dynamic region (choroid analogue / bulk test regions)."""

    origin_um: tuple          # (x, y, z) of the low corner
    size_um: tuple
    alpha0: float
    dynamic_fraction: float
    total_power: float = 1.21
    pulse_scale: float = 0.0
    pulse_phase: float = 0.0


@dataclass(frozen=True)
class PlanarLayer:
    """Static reflectivity band spanning the full FOV."""

    depth_um: float
    thickness_um: float
    reflectivity: float       # static amplitude inside the band


@dataclass(frozen=True)
class PulseSpec:
    kind: str = "none"        # none | gamma | sinusoid
    rate_hz: float = 1.0
    magnitude: float = 0.0
    phase: float = 0.0        # acquisition start phase, fraction of a period

    @property
    def period_ms(self) -> float:
        return 1000.0 / self.rate_hz


@dataclass
class PhantomSpec:
    protocol: ScanProtocol
    vessels: list = field(default_factory=list)    # TubeSpec
    cuboids: list = field(default_factory=list)    # CuboidSpec
    layers: list = field(default_factory=list)     # PlanarLayer
    background_amplitude: float = 0.08
    psf_sigma_um: tuple = (2.0, 2.0)               # (transverse, axial)
    noise_sigma: float = 0.06                      # complex noise std (total)
    pulse: PulseSpec = field(default_factory=PulseSpec)
    seed: int = 1234
    kind: str = "amplitude"                        # amplitude | complex output

    def validate(self):
        for v in self.vessels:
            if v.alpha0 <= 0 or v.radius_um <= 0:
                raise ValueError("vessel needs alpha0 > 0 and radius > 0")
            if not (0 <= v.dynamic_fraction <= 1):
                raise ValueError("dynamic_fraction outside [0, 1]")
        for c in self.cuboids:
            if c.alpha0 <= 0 or not (0 <= c.dynamic_fraction <= 1):
                raise ValueError("bad cuboid dynamics")
        if self.pulse.magnitude < 0:
            raise ValueError("pulse magnitude < 0")


@dataclass
class PhantomTruth:
    """Ground truth emitted alongside the synthetic volume."""

    ids: np.ndarray                 # (Y, X, Z) uint32, 0 = background
    alpha0: dict                    # id -> ground-truth decay rate
    segment_kind: dict              # id -> "vessel" | "cuboid"
    g_rows: Optional[np.ndarray]    # (n_ids, Y) injected g at row mid-times
    g_rep_rows: Optional[np.ndarray]  # (Y,) FOV waveform at row mid-times
    row_times_ms: np.ndarray        # (Y,) mid-acquisition time per slow row
    pulse: PulseSpec


_GAMMA_GRID = 4096


def pulsatility_waveform(kind: str, rate_hz: float, magnitude: float,
                         t_ms, phase: float = 0.0):
    """Periodic zero-mean pulsatility scale factor g(t).

    gamma kind: fast rise (rise time 0.15 of the period) and slow recovery,
    g(t) = m * (gamma(t mod T) - mean gamma) with the mean taken over one
    period so the time average is zero.
    """
    t = np.asarray(t_ms, dtype=np.float64)
    if magnitude == 0.0 or kind == "none":
        return np.zeros_like(t)
    period = 1000.0 / rate_hz
    tt = t + phase * period
    if kind == "sinusoid":
        return magnitude * np.sin(2 * np.pi * tt / period)
    if kind == "gamma":
        t_r = 0.15 * period
        u = np.mod(tt, period)
        pulse = (u / t_r) * np.exp(1.0 - u / t_r)
        grid = (np.arange(_GAMMA_GRID) + 0.5) * (period / _GAMMA_GRID)
        mean = np.mean((grid / t_r) * np.exp(1.0 - grid / t_r))
        return magnitude * (pulse - mean)
    raise ValueError(f"unknown pulsatility kind {kind!r}")


def ou_series(alpha: float, dt_ms: float, n: int, seed: int = 0) -> np.ndarray:
    """Stationary unit-power complex OU series; lag-m autocorrelation e^(-alpha*m*dt)."""
    if alpha < 0 or dt_ms <= 0 or n < 1:
        raise ValueError("need alpha >= 0, dt > 0, n >= 1")
    rng = np.random.default_rng(seed)
    x = np.empty(n, dtype=np.complex128)
    x[0] = (rng.standard_normal() + 1j * rng.standard_normal()) / np.sqrt(2)
    a = np.exp(-alpha * dt_ms)
    s = np.sqrt(max(0.0, 1.0 - a * a))
    for k in range(1, n):
        xi = (rng.standard_normal() + 1j * rng.standard_normal()) / np.sqrt(2)
        x[k] = a * x[k - 1] + s * xi
    return x


def _stream(seed: int, channel: int, band: int, step: int) -> np.random.Generator:
    key = (np.uint64(channel) << np.uint64(48)) | (np.uint64(band) << np.uint64(32)) \
        | np.uint64(step)
    return np.random.Generator(np.random.Philox(key=[np.uint64(seed), key]))


def _complex_normal(rng, shape) -> np.ndarray:
    re = rng.standard_normal(shape, dtype=np.float64)
    im = rng.standard_normal(shape, dtype=np.float64)
    return ((re + 1j * im) / np.sqrt(2)).astype(np.complex64)


def _voxel_centers(proto: ScanProtocol):
    x = np.arange(proto.ascans_per_bscan) * proto.ascan_spacing_um
    y = np.arange(proto.n_bscans) * proto.ascan_spacing_um
    z = np.arange(proto.n_depth) * proto.axial_spacing_um
    return x, y, z


def _rasterize(spec: PhantomSpec):
    """Paint ids, static amplitude, dynamic power, alpha0 onto the voxel grid."""
    proto = spec.protocol
    shape = proto.shape()
    xs, ys, zs = _voxel_centers(proto)
    ids = np.zeros(shape, dtype=np.uint32)
    best = np.full(shape, np.inf, dtype=np.float32)
    static = np.full(shape, spec.background_amplitude, dtype=np.float32)
    dyn_power = np.zeros(shape, dtype=np.float32)
    alpha0_vol = np.zeros(shape, dtype=np.float32)

    for layer in spec.layers:
        z0, z1 = layer.depth_um, layer.depth_um + layer.thickness_um
        zmask = (zs >= z0) & (zs < z1)
        static[:, :, zmask] = layer.reflectivity

    alpha_by_id, kind_by_id = {}, {}
    next_id = 1
    for tube in spec.vessels:
        pts = np.asarray(tube.points_um, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[0] < 2:
            raise ValueError("tube needs >= 2 centerline points")
        lo = pts.min(axis=0) - tube.radius_um
        hi = pts.max(axis=0) + tube.radius_um
        xi = np.nonzero((xs >= lo[0]) & (xs <= hi[0]))[0]
        yi = np.nonzero((ys >= lo[1]) & (ys <= hi[1]))[0]
        zi = np.nonzero((zs >= lo[2]) & (zs <= hi[2]))[0]
        if not (len(xi) and len(yi) and len(zi)):
            raise ValueError("tube lies outside the volume")
        yy, xx, zz = np.meshgrid(ys[yi], xs[xi], zs[zi], indexing="ij")
        p = np.stack([xx, yy, zz], axis=-1)
        dist = np.full(p.shape[:3], np.inf)
        for a, b in zip(pts[:-1], pts[1:]):
            ab = b - a
            denom = float(ab @ ab)
            w = p - a
            t = np.clip((w @ ab) / denom, 0.0, 1.0) if denom > 0 else np.zeros(p.shape[:3])
            closest = a + t[..., None] * ab
            dist = np.minimum(dist, np.linalg.norm(p - closest, axis=-1))
        sub = np.ix_(yi, xi, zi)
        inside = (dist <= tube.radius_um) & (dist < best[sub])
        sel = tuple(ix[inside.nonzero()[k]] for k, ix in enumerate((yi, xi, zi)))
        ids[sel] = next_id
        best[sub] = np.where(inside, dist.astype(np.float32), best[sub])
        static[sel] = np.sqrt(tube.total_power * (1.0 - tube.dynamic_fraction))
        dyn_power[sel] = tube.total_power * tube.dynamic_fraction
        alpha0_vol[sel] = tube.alpha0
        alpha_by_id[next_id] = tube.alpha0
        kind_by_id[next_id] = "vessel"
        next_id += 1

    for cub in spec.cuboids:
        o = np.asarray(cub.origin_um)
        s = np.asarray(cub.size_um)
        xi = (xs >= o[0]) & (xs < o[0] + s[0])
        yi = (ys >= o[1]) & (ys < o[1] + s[1])
        zi = (zs >= o[2]) & (zs < o[2] + s[2])
        sub = np.ix_(yi.nonzero()[0], xi.nonzero()[0], zi.nonzero()[0])
        ids[sub] = next_id
        static[sub] = np.sqrt(cub.total_power * (1.0 - cub.dynamic_fraction))
        dyn_power[sub] = cub.total_power * cub.dynamic_fraction
        alpha0_vol[sub] = cub.alpha0
        alpha_by_id[next_id] = cub.alpha0
        kind_by_id[next_id] = "cuboid"
        next_id += 1

    return ids, static, dyn_power, alpha0_vol, alpha_by_id, kind_by_id


def build_phantom(spec: PhantomSpec, workers: int | None = None
                  ) -> tuple[OctVolume, PhantomTruth]:
    """Synthesize the OCT volume and its ground-truth sidecar."""
    spec.validate()
    proto = spec.protocol
    shape = proto.shape()
    n_rep, n_bands = proto.n_repeats, proto.n_bands
    ids, static, dyn_power, alpha0_vol, alpha_by_id, kind_by_id = _rasterize(spec)
    dyn_amp = np.sqrt(dyn_power)

    pulse = spec.pulse
    pulsing = pulse.kind != "none" and pulse.magnitude > 0
    seg_ids = sorted(alpha_by_id)
    scales = {i: 0.0 for i in seg_ids}
    phases = {i: 0.0 for i in seg_ids}
    for sid, obj in zip(seg_ids, list(spec.vessels) + list(spec.cuboids)):
        scales[sid], phases[sid] = obj.pulse_scale, obj.pulse_phase

    # per-voxel segment index (0 = background) for pulse lookups
    idx_vol = np.zeros(shape, dtype=np.int32)
    for k, sid in enumerate(seg_ids, start=1):
        idx_vol[ids == sid] = k
    yy_vol = np.arange(proto.n_bscans, dtype=np.int32)[:, None, None]
    yy_vol = np.broadcast_to(yy_vol, shape)

    def g_table(t_row: np.ndarray) -> np.ndarray:
        """(n_segments+1, Y) injected g at the given row times; row 0 is background."""
        tab = np.zeros((len(seg_ids) + 1, proto.n_bscans))
        if pulsing:
            for k, sid in enumerate(seg_ids, start=1):
                tab[k] = scales[sid] * pulsatility_waveform(
                    pulse.kind, pulse.rate_hz, pulse.magnitude, t_row,
                    phase=pulse.phase + phases[sid])
        return tab

    sx = spec.psf_sigma_um[0] / proto.ascan_spacing_um
    sz = spec.psf_sigma_um[1] / proto.axial_spacing_um

    def blur(fld: np.ndarray) -> np.ndarray:
        if sx <= 0 and sz <= 0:
            return fld
        re = gaussian_filter(fld.real, sigma=(0, sx, sz))
        im = gaussian_filter(fld.imag, sigma=(0, sx, sz))
        return (re + 1j * im).astype(np.complex64)

    out_dtype = np.complex64 if spec.kind == "complex" else np.float32
    out = np.empty((n_bands, n_rep) + shape, dtype=out_dtype)
    y_rows = np.arange(proto.n_bscans)

    # fast path: no pulsatility means the per-step decay factor is constant
    a_const = np.exp(-alpha0_vol * proto.dt_ms).astype(np.float32)
    s_const = np.sqrt(np.clip(1.0 - a_const**2, 0.0, None)).astype(np.float32)

    def synth_band(band: int):
        phasor = np.exp(2j * np.pi * _stream(spec.seed, 2, band, 0)
                        .random(shape, dtype=np.float64)).astype(np.complex64)
        static_field = blur(static.astype(np.complex64) * phasor)
        state = _complex_normal(_stream(spec.seed, 0, band, 0), shape)
        for j in range(n_rep):
            if j > 0:
                if pulsing:
                    t_mid = (y_rows * n_rep + j - 0.5) * proto.dt_ms
                    g_vox = g_table(t_mid)[idx_vol, yy_vol]
                    a = np.exp(-alpha0_vol * (1.0 + g_vox) * proto.dt_ms).astype(np.float32)
                    s = np.sqrt(np.clip(1.0 - a**2, 0.0, None)).astype(np.float32)
                else:
                    a, s = a_const, s_const
                xi = _complex_normal(_stream(spec.seed, 0, band, j), shape)
                state = a * state + s * xi
            fld = static_field + blur(dyn_amp.astype(np.complex64) * state)
            if spec.noise_sigma > 0:
                fld = fld + spec.noise_sigma * _complex_normal(
                    _stream(spec.seed, 1, band, j), shape)
            out[band, j] = fld if spec.kind == "complex" else np.abs(fld)
        return band

    ordered_map(synth_band, range(n_bands), workers)

    t_row = (y_rows * n_rep + (n_rep - 1) / 2.0) * proto.dt_ms
    if pulsing:
        g_rows = g_table(t_row)[1:]
        g_rep_rows = pulsatility_waveform(pulse.kind, pulse.rate_hz,
                                          pulse.magnitude, t_row, phase=pulse.phase)
    else:
        g_rows = np.zeros((len(seg_ids), proto.n_bscans))
        g_rep_rows = np.zeros(proto.n_bscans)
    truth = PhantomTruth(ids=ids, alpha0=alpha_by_id, segment_kind=kind_by_id,
                         g_rows=g_rows, g_rep_rows=g_rep_rows,
                         row_times_ms=t_row, pulse=pulse)
    vol = OctVolume(data=out, protocol=proto, kind=spec.kind)
    return vol, truth
