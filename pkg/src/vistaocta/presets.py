"""Ready-made phantom builds: layered retina analogue with capillary tubes.

All presets share one layer stack (vitreous, RNFL, inner retina with a dark
nuclear band, RPE, choroid); tubes sit in the two capillary slabs at fixed
depths. Geometry is specified in um so the same scene can be sampled by any
protocol.
"""

from __future__ import annotations

import numpy as np

from .phantom import CuboidSpec, PhantomSpec, PlanarLayer, PulseSpec, TubeSpec
from .volume import ScanProtocol, get_protocol

TUBE_RADIUS_UM = 15.0
TUBE_POWER = 1.21
TUBE_DYNAMIC_FRACTION = 0.45
SCP_DEPTH_UM = 122.0
DCP_DEPTH_UM = 162.0

RETINA_LAYERS = (
    PlanarLayer(depth_um=60.0, thickness_um=200.0, reflectivity=0.5),   # retina body
    PlanarLayer(depth_um=60.0, thickness_um=40.0, reflectivity=0.95),   # RNFL
    PlanarLayer(depth_um=134.0, thickness_um=14.0, reflectivity=0.3),   # nuclear band
    PlanarLayer(depth_um=260.0, thickness_um=8.0, reflectivity=1.8),    # RPE
    PlanarLayer(depth_um=268.0, thickness_um=164.0, reflectivity=0.5),  # choroid
)


def _tube(y_um: float, z_um: float, alpha0: float, x0_um: float, x1_um: float,
          pulse_scale: float = 0.0) -> TubeSpec:
    return TubeSpec(points_um=((x0_um, y_um, z_um), (x1_um, y_um, z_um)),
                    radius_um=TUBE_RADIUS_UM, alpha0=alpha0,
                    dynamic_fraction=TUBE_DYNAMIC_FRACTION,
                    total_power=TUBE_POWER, pulse_scale=pulse_scale)


def _base_spec(proto: ScanProtocol, seed: int, **kw) -> PhantomSpec:
    return PhantomSpec(protocol=proto, layers=list(RETINA_LAYERS),
                       background_amplitude=0.08, psf_sigma_um=(2.0, 2.0),
                       noise_sigma=0.06, seed=seed, **kw)


# interleaved per-depth rate assignment: 5 tubes of each rate over 20 tubes
_A1_SCP = (0.3, 0.7, 1.2, 2.0, 0.3, 0.7, 1.2, 2.0, 0.3, 0.7)
_A1_DCP = (1.2, 2.0, 0.3, 0.7, 1.2, 2.0, 0.3, 0.7, 1.2, 2.0)


def tube_grid_phantom(proto: ScanProtocol, scp_rates, dcp_rates, seed: int,
                      pulse: PulseSpec | None = None,
                      pulse_scale: float = 0.0) -> PhantomSpec:
    """Straight full-width tubes on a uniform slow-axis pitch, two depths."""
    fov_um = proto.n_bscans * proto.ascan_spacing_um
    x0, x1 = 50.0, proto.ascans_per_bscan * proto.ascan_spacing_um - 50.0
    pitch = (fov_um - 2 * 60.0) / max(len(scp_rates) + len(dcp_rates) - 1, 1) * 2
    vessels = []
    for i, a0 in enumerate(scp_rates):
        vessels.append(_tube(60.0 + i * pitch, SCP_DEPTH_UM, a0, x0, x1,
                             pulse_scale))
    for i, a0 in enumerate(dcp_rates):
        vessels.append(_tube(60.0 + pitch / 2 + i * pitch, DCP_DEPTH_UM, a0,
                             x0, x1, pulse_scale))
    spec = _base_spec(proto, seed, vessels=vessels)
    if pulse is not None:
        spec.pulse = pulse
    return spec


def a1_phantom(seed: int = 20) -> PhantomSpec:
    """20 tube segments, 5 per rate in {0.3, 0.7, 1.2, 2.0} 1/ms."""
    return tube_grid_phantom(get_protocol("table1-3x3-scaled"),
                             _A1_SCP, _A1_DCP, seed)


# region -> (depth, fast-axis half, rate); every slow position holds tubes of
# all four regions so sliding-band pulsatility sees a constant composition
_A5_REGION_RATES = {
    ("scp_icp", "left"): 0.5, ("scp_icp", "right"): 1.1,
    ("dcp", "left"): 0.8, ("dcp", "right"): 1.4,
}
_A5_ROWS = 6


def a5_phantom(proto: ScanProtocol, seed: int = 21) -> PhantomSpec:
    """Four rate regions (two depths x two fast-axis halves), same scene
    for any protocol; every slow position carries all four rates."""
    fov_y = proto.n_bscans * proto.ascan_spacing_um
    fov_x = proto.ascans_per_bscan * proto.ascan_spacing_um
    pitch = (fov_y - 120.0) / (_A5_ROWS - 1)
    vessels = []
    for i in range(_A5_ROWS):
        y = 60.0 + i * pitch
        for (slab, side), a0 in sorted(_A5_REGION_RATES.items()):
            depth = SCP_DEPTH_UM if slab == "scp_icp" else DCP_DEPTH_UM
            if side == "left":
                x0, x1 = 25.0, fov_x / 2 - 25.0
            else:
                x0, x1 = fov_x / 2 + 25.0, fov_x - 25.0
            vessels.append(_tube(y, depth, a0, x0, x1))
    return _base_spec(proto, seed, vessels=vessels)


def a5_regions(proto: ScanProtocol) -> dict:
    """(slab, side) -> (Y, X) bool mask matching a5_phantom placement."""
    ny, nx = proto.n_bscans, proto.ascans_per_bscan
    out = {}
    for slab, side in _A5_REGION_RATES:
        m = np.zeros((ny, nx), bool)
        if side == "left":
            m[:, :nx // 2] = True
        else:
            m[:, nx // 2:] = True
        out[(slab, side)] = m
    return out


def a9_phantom(seed: int = 22) -> PhantomSpec:
    """Deep tubes at 1.4 1/ms directly beneath superficial tubes at 2.0.

    Pairing the depths at each slow position keeps the sliding-band
    composition uniform, so pulsatility compensation stays neutral."""
    proto = get_protocol("table1-3x3-scaled")
    fov_y = proto.n_bscans * proto.ascan_spacing_um
    x0, x1 = 50.0, proto.ascans_per_bscan * proto.ascan_spacing_um - 50.0
    pitch = (fov_y - 120.0) / 3
    vessels = []
    for i in range(4):
        y = 60.0 + i * pitch
        vessels.append(_tube(y, SCP_DEPTH_UM, 2.0, x0, x1))
        vessels.append(_tube(y, DCP_DEPTH_UM, 1.4, x0, x1))
    return _base_spec(proto, seed, vessels=vessels)


def a4_phantom(phase: float, seed: int) -> PhantomSpec:
    """Uniform-rate tubes with a strong FOV-wide pulse at the given phase."""
    pulse = PulseSpec(kind="gamma", rate_hz=1.0, magnitude=0.2, phase=phase)
    return tube_grid_phantom(get_protocol("table1-3x3-scaled"),
                             (1.0,) * 10, (1.0,) * 10, seed,
                             pulse=pulse, pulse_scale=1.0)


def ou_block_phantom(alpha0: float = 1.0, beta: float = 0.5,
                     n: int = 48, seed: int = 7) -> PhantomSpec:
    """Bare dynamic block: no layers, no blur, no noise, complex output.

    Every voxel follows the same relaxation so population statistics can be
    checked against the closed form; beta is the dynamic power fraction.
    """
    proto = ScanProtocol(name="ou-block", fov_mm=(n * 6.7e-3, n * 6.7e-3),
                         dt_ms=1.0, n_repeats=8, ascan_spacing_um=6.7,
                         axial_spacing_um=2.7, ascans_per_bscan=n, n_bscans=n,
                         n_depth=n, n_bands=1)
    cub = CuboidSpec(origin_um=(-1.0, -1.0, -1.0),
                     size_um=(n * 6.7 + 2, n * 6.7 + 2, n * 2.7 + 2),
                     alpha0=alpha0, dynamic_fraction=beta, total_power=2.0)
    return PhantomSpec(protocol=proto, cuboids=[cub], layers=[],
                       background_amplitude=0.0, psf_sigma_um=(0.0, 0.0),
                       noise_sigma=0.0, seed=seed, kind="complex")


def demo_phantom(seed: int = 5) -> PhantomSpec:
    """Small scene for quick CLI runs and tests: two depth-paired tube rows."""
    proto = get_protocol("table1-3x3-scaled", ascans_per_bscan=72, n_bscans=72,
                         n_depth=160,
                         fov_mm=(72 * 6.7e-3, 72 * 6.7e-3))
    x1 = 72 * 6.7 - 40.0
    vessels = [_tube(150.0, SCP_DEPTH_UM, 0.8, 40.0, x1),
               _tube(150.0, DCP_DEPTH_UM, 1.2, 40.0, x1),
               _tube(330.0, SCP_DEPTH_UM, 1.6, 40.0, x1),
               _tube(330.0, DCP_DEPTH_UM, 0.5, 40.0, x1)]
    return _base_spec(proto, seed, vessels=vessels)


PRESETS = {
    "a1": lambda seed=20: a1_phantom(seed),
    "a4-p0": lambda seed=101: a4_phantom(0.0, seed),
    "a4-p25": lambda seed=102: a4_phantom(0.25, seed),
    "a4-p50": lambda seed=103: a4_phantom(0.5, seed),
    "a4-p75": lambda seed=104: a4_phantom(0.75, seed),
    "a5-3x3": lambda seed=21: a5_phantom(get_protocol("table1-3x3-scaled"), seed),
    "a5-5x5": lambda seed=21: a5_phantom(get_protocol("table1-5x5-scaled"), seed),
    "a9": lambda seed=22: a9_phantom(seed),
    "ou-block": lambda seed=7: ou_block_phantom(seed=seed),
    "demo": lambda seed=5: demo_phantom(seed),
}


def build_preset(name: str, seed: int | None = None):
    if name not in PRESETS:
        raise KeyError(f"unknown preset {name!r}; have {sorted(PRESETS)}")
    return PRESETS[name]() if seed is None else PRESETS[name](seed)
