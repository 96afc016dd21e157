"""Interscan-time OCTA: decorrelation-rate imaging of capillary flow.

The package turns repeated-B-scan OCT volumes into quantitative flow-rate
maps: pairwise decorrelation at every effective interscan time, layer-guided
slab projection, vessel graphs, per-segment exponential-saturation fits,
cardiac-pulsatility compensation, and deterministic color rendering.
"""

__version__ = "0.1.0"

from .volume import (OctVolume, OctaStack, LayerSurfaces, ScanProtocol,
                     SlabSpec, PROTOCOLS, SLABS, get_protocol,
                     validate_protocol, round_half_up)
from .container import read_array, read_volume, write_array, write_volume
from .octa import octa_stack, decorrelation_ratio, register_bscans, split_bands
from .phantom import (PhantomSpec, PhantomTruth, PulseSpec, PlanarLayer,
                      TubeSpec, CuboidSpec, build_phantom, ou_series,
                      pulsatility_waveform)
from .decay import DecayFit, fit_decay, fit_all_segments, compile_matrix
from .layers import (LayerConfig, lowess_2d, segment_rpe, flatten,
                     flatten_shifts, segment_inner_layers, refine_rpe,
                     extract_slab, slab_mask)
from .vessels import (VesselGraph, vesselness_2d, otsu_log_threshold,
                      oof_response, mask_3d, skeletonize_graph, project_ids)
from .pulsatility import (PulseTrace, band_pulsatility, compensate,
                          mmode_alpha_series, band_rows)
from .render import (vista_image, alpha_hue, depth_colorcode, enface,
                     save_png, segment_alpha_map)
from .analysis import (cv, region_stats, consistency_fit,
                       protocol_feasibility, FeasibilityReport)
from .pipeline import RunConfig, process_volume, save_results
from .presets import PRESETS, build_preset

__all__ = [n for n in dir() if not n.startswith("_")]
