"""Core data model: scan protocols, OCT volumes, OCTA stacks, surfaces, slabs.

Conventions used everywhere: lengths in um, times in ms, decay rates in 1/ms.
Array index order is [band][repeat][slow y][fast x][depth z] for OCT data and
[interscan index][y][x][z] for OCTA stacks.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np


def round_half_up(x: float) -> int:
    """round() with ties away from zero; Python's round() is banker's."""
    return int(np.floor(x + 0.5)) if x >= 0 else -int(np.floor(-x + 0.5))


@dataclass(frozen=True)
class ScanProtocol:
    """Acquisition geometry and timing for one OCTA protocol."""

    name: str
    fov_mm: tuple[float, float]        # (fast, slow) extent
    dt_ms: float                       # fundamental interscan time
    n_repeats: int                     # repeated B-scans per slow position
    ascan_spacing_um: float            # transverse sampling, fast and slow
    axial_spacing_um: float            # depth sampling (in tissue)
    ascans_per_bscan: int              # X
    n_bscans: int                      # Y
    n_depth: int                       # Z
    n_bands: int = 3                   # split-spectrum bands
    duty_cycle: float = 0.75

    @property
    def interscan_times_ms(self) -> np.ndarray:
        """Effective interscan times dt .. (N-1)*dt."""
        return self.dt_ms * np.arange(1, self.n_repeats)

    @property
    def acquisition_ms(self) -> float:
        return self.n_bscans * self.n_repeats * self.dt_ms

    @property
    def bscan_period_ms(self) -> float:
        """Time between successive slow positions."""
        return self.n_repeats * self.dt_ms

    def voxel_time_ms(self, y: int | np.ndarray, j: int | np.ndarray):
        """Acquisition time of repeat j at slow position y."""
        return (np.asarray(y) * self.n_repeats + np.asarray(j)) * self.dt_ms

    def shape(self) -> tuple[int, int, int]:
        return (self.n_bscans, self.ascans_per_bscan, self.n_depth)


def validate_protocol(p: ScanProtocol) -> list[str]:
    """Return invariant violations (empty list means valid)."""
    bad = []
    if p.n_repeats < 2:
        bad.append("n_repeats < 2")
    if p.dt_ms <= 0:
        bad.append("dt_fundamental_ms <= 0")
    if p.n_bands < 1:
        bad.append("n_bands < 1")
    if min(p.ascans_per_bscan, p.n_bscans, p.n_depth) < 1:
        bad.append("volume dims < 1")
    if not (0 < p.duty_cycle <= 1):
        bad.append("duty_cycle outside (0, 1]")
    if p.ascan_spacing_um <= 0 or p.axial_spacing_um <= 0:
        bad.append("spacing <= 0")
    return bad


# Published protocol presets. The scaled variants keep timing and sampling but
# shrink the field of view to ~1x1 mm so a full run fits on a desktop.
PROTOCOLS = {
    "table1-3x3": ScanProtocol(
        name="table1-3x3", fov_mm=(3.0, 3.0), dt_ms=1.0, n_repeats=8,
        ascan_spacing_um=6.7, axial_spacing_um=2.7,
        ascans_per_bscan=450, n_bscans=450, n_depth=320,
        n_bands=3, duty_cycle=0.75,
    ),
    "table1-5x5": ScanProtocol(
        name="table1-5x5", fov_mm=(5.0, 5.0), dt_ms=1.25, n_repeats=5,
        ascan_spacing_um=8.8, axial_spacing_um=2.7,
        ascans_per_bscan=570, n_bscans=570, n_depth=320,
        n_bands=3, duty_cycle=0.76,
    ),
    "table1-3x3-scaled": ScanProtocol(
        name="table1-3x3-scaled", fov_mm=(1.005, 1.005), dt_ms=1.0, n_repeats=8,
        ascan_spacing_um=6.7, axial_spacing_um=2.7,
        ascans_per_bscan=150, n_bscans=150, n_depth=160,
        n_bands=3, duty_cycle=0.75,
    ),
    "table1-5x5-scaled": ScanProtocol(
        name="table1-5x5-scaled", fov_mm=(1.0032, 1.0032), dt_ms=1.25, n_repeats=5,
        ascan_spacing_um=8.8, axial_spacing_um=2.7,
        ascans_per_bscan=114, n_bscans=114, n_depth=160,
        n_bands=3, duty_cycle=0.76,
    ),
}


def get_protocol(name: str, **overrides) -> ScanProtocol:
    if name not in PROTOCOLS:
        raise KeyError(f"unknown protocol {name!r}; have {sorted(PROTOCOLS)}")
    p = PROTOCOLS[name]
    return replace(p, **overrides) if overrides else p


@dataclass
class OctVolume:
    """Repeated-B-scan OCT data, per split-spectrum band.

    data shape: (n_bands, n_repeats, Y, X, Z); float32 amplitudes or
    complex64 fields depending on kind.
    """

    data: np.ndarray
    protocol: ScanProtocol
    kind: str = "amplitude"  # amplitude | complex

    def __post_init__(self):
        if self.kind not in ("amplitude", "complex"):
            raise ValueError(f"bad kind {self.kind!r}")
        expect = (self.protocol.n_bands, self.protocol.n_repeats) + self.protocol.shape()
        if self.data.shape != expect:
            raise ValueError(f"data shape {self.data.shape} != protocol shape {expect}")
        if self.kind == "amplitude" and np.iscomplexobj(self.data):
            raise ValueError("amplitude kind with complex samples")

    def amplitudes(self) -> np.ndarray:
        return np.abs(self.data) if self.kind == "complex" else self.data


@dataclass
class OctaStack:
    """Unnormalized and normalized OCTA at every effective interscan time."""

    unnormalized: np.ndarray   # (N-1, Y, X, Z) float32, >= 0
    normalized: np.ndarray     # (N-1, Y, X, Z) float32 in [0, 1]
    protocol: ScanProtocol

    def __post_init__(self):
        n_m = self.protocol.n_repeats - 1
        expect = (n_m,) + self.protocol.shape()
        if self.unnormalized.shape != expect or self.normalized.shape != expect:
            raise ValueError(f"stack shape != {expect}")

    @property
    def interscan_times_ms(self) -> np.ndarray:
        return self.protocol.interscan_times_ms


SURFACE_NAMES = ("ilm", "rnfl_posterior", "inl_center", "rpe", "rpe_fine")


@dataclass
class LayerSurfaces:
    """Per-(y, x) layer depths in um from the volume top."""

    ilm: np.ndarray
    rnfl_posterior: np.ndarray
    inl_center: np.ndarray
    rpe: np.ndarray
    rpe_fine: Optional[np.ndarray] = None
    flagged: Optional[np.ndarray] = None  # bool (y, x), columns with in-filled values

    def check_ordering(self) -> np.ndarray:
        """Bool grid where ilm < rnfl_posterior < inl_center < rpe holds."""
        return (self.ilm < self.rnfl_posterior) & \
               (self.rnfl_posterior < self.inl_center) & \
               (self.inl_center < self.rpe)


@dataclass(frozen=True)
class SlabSpec:
    """Depth slab bounded by two surfaces with signed um offsets."""

    name: str
    anterior_surface: str      # one of SURFACE_NAMES
    anterior_offset_um: float
    posterior_surface: str
    posterior_offset_um: float

    def bounds_um(self, surfaces: LayerSurfaces) -> tuple[np.ndarray, np.ndarray]:
        def grid(which, off):
            g = getattr(surfaces, which)
            if g is None:
                raise ValueError(f"surface {which} not available")
            return g + off
        return (grid(self.anterior_surface, self.anterior_offset_um),
                grid(self.posterior_surface, self.posterior_offset_um))


# Slab definitions used by the capillary pipeline. Choroid slabs sit behind
# the RPE and are 8 um thick.
SLABS = {
    "rnflp": SlabSpec("rnflp", "ilm", 19.0, "rnfl_posterior", 0.0),
    "scp_icp": SlabSpec("scp_icp", "rnfl_posterior", 0.0, "inl_center", 0.0),
    "dcp": SlabSpec("dcp", "inl_center", 0.0, "rpe", -80.0),
    "choroid1": SlabSpec("choroid1", "rpe", 13.0, "rpe", 21.0),
    "choroid2": SlabSpec("choroid2", "rpe", 27.0, "rpe", 35.0),
    "choroid3": SlabSpec("choroid3", "rpe", 40.0, "rpe", 48.0),
}
