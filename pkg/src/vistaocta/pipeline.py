"""End-to-end processing: OCT volume in, rate maps and reports out.

Stages: OCTA stack -> optional registration -> layer surfaces on the mean
volume -> flattening -> per-slab en-face, vessel mask, centerline graph,
per-segment decay fits -> pulsatility trace and compensation -> rendering.
Everything below is deterministic for a fixed input; worker counts only
change scheduling, never values.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from ._parallel import ordered_map
from .analysis import region_stats
from .container import write_array
from .decay import N_MIN_VOXELS, fit_all_segments
from .layers import (LayerConfig, flatten, flatten_shifts, mean_amplitude,
                     refine_rpe, segment_inner_layers, segment_rpe_from_mean,
                     slab_mask)
from .octa import octa_stack, register_bscans
from .pulsatility import PulseTrace, band_pulsatility, compensate
from .render import (ALPHA_RANGE, MEDIAN_WINDOW, VALUE_PERCENTILE, enface,
                     save_png, segment_alpha_map, vista_image)
from .vessels import (DEFAULT_SCALE_FACTORS, mask_3d, otsu_log_threshold,
                      project_ids, skeletonize_graph, vesselness_2d)
from .volume import SLABS, OctVolume, OctaStack, get_protocol


@dataclass
class RunConfig:
    protocol: str = "table1-3x3-scaled"
    mode: str = "amplitude"              # octa estimator mode
    register: bool = False
    slabs: tuple = ("scp_icp", "dcp")
    oof_radius_factor: float = 2.0       # sphere radius, x A-scan spacing
    oof_sigma_um: float | None = None
    vessel_scale_factors: tuple = DEFAULT_SCALE_FACTORS
    pulse_window_ms: float = 100.0
    compensate_pulse: bool = True
    n_min_voxels: int = N_MIN_VOXELS
    alpha_display_range: tuple = ALPHA_RANGE
    render_median_window: int = MEDIAN_WINDOW
    render_value_percentile: float = VALUE_PERCENTILE
    layer_overrides: list = field(default_factory=list)
    save_stack: bool = False
    workers: int | None = None           # None = VISTA_THREADS or cpu default

    def manifest_dict(self) -> dict:
        d = asdict(self)
        d.pop("workers")                 # scheduling detail, not provenance
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    @classmethod
    def from_yaml(cls, path) -> "RunConfig":
        with open(path) as fh:
            doc = yaml.safe_load(fh) or {}
        known = {f for f in cls.__dataclass_fields__}
        bad = set(doc) - known
        if bad:
            raise ValueError(f"unknown config keys: {sorted(bad)}")
        for key in ("slabs", "vessel_scale_factors", "alpha_display_range"):
            if key in doc and isinstance(doc[key], list):
                doc[key] = tuple(doc[key])
        return cls(**doc)


@dataclass
class SlabResult:
    name: str
    enface_flow: np.ndarray              # (Y, X) slab-mean unnormalized OCTA
    vesselness: np.ndarray               # (Y, X) multiscale ridge response
    mask2d: np.ndarray
    graph: object
    id_image: np.ndarray                 # (Y, X) u32
    ids3d: np.ndarray                    # (Y, X, Z) u32
    fits: dict                           # segment id -> DecayFit
    alpha_map: np.ndarray                # (Y, X) skeleton rates, NaN elsewhere
    alpha0_map: np.ndarray               # compensated rates
    alpha0_by_segment: dict              # id -> mean compensated rate
    render: np.ndarray                   # uint8 RGB
    render_info: object
    empty_columns: np.ndarray


@dataclass
class PipelineResult:
    protocol: object
    config: RunConfig
    stack: OctaStack
    shifts: np.ndarray | None
    flatten_px: np.ndarray               # (Y, X) axial shifts applied per column
    surfaces: object
    mask3d: np.ndarray
    oof_threshold: float
    trace: PulseTrace | None             # FOV-level band trace, all vessel voxels
    slabs: dict                          # name -> SlabResult


def _flatten_stack(stack: OctaStack, shifts: np.ndarray) -> OctaStack:
    if not shifts.any():
        return stack
    un = np.stack([flatten(stack.unnormalized[m], shifts)
                   for m in range(stack.unnormalized.shape[0])])
    no = np.stack([flatten(stack.normalized[m], shifts)
                   for m in range(stack.normalized.shape[0])])
    return OctaStack(unnormalized=un, normalized=no, protocol=stack.protocol)


def process_volume(vol: OctVolume, cfg: RunConfig | None = None) -> PipelineResult:
    cfg = cfg or RunConfig()
    proto = vol.protocol
    stack = octa_stack(vol, mode=cfg.mode, workers=cfg.workers)
    shifts = None
    if cfg.register:
        shifts, stack = register_bscans(stack)

    mean_vol = mean_amplitude(vol)
    rpe_coarse = segment_rpe_from_mean(mean_vol, proto)
    col_shifts, rpe_ref_px = flatten_shifts(rpe_coarse, proto)
    flat_mean = flatten(mean_vol, col_shifts)
    flat_stack = _flatten_stack(stack, col_shifts)

    layer_cfg = LayerConfig()
    surfaces = segment_inner_layers(flat_mean, rpe_ref_px, proto, layer_cfg,
                                    overrides=cfg.layer_overrides or None)
    rpe_fine, _ = refine_rpe(flat_mean, rpe_ref_px, proto, layer_cfg)
    surfaces.rpe_fine = rpe_fine
    surfaces.rpe = rpe_fine

    mean_unnorm = flat_stack.unnormalized.mean(axis=0)
    spacing = (proto.ascan_spacing_um, proto.ascan_spacing_um,
               proto.axial_spacing_um)
    radius_um = cfg.oof_radius_factor * proto.ascan_spacing_um
    vessel_mask3d, _, oof_thr = mask_3d(mean_unnorm, radius_um, spacing,
                                        cfg.oof_sigma_um)

    def locate_slab(name):
        smask, empty = slab_mask(SLABS[name], surfaces, proto, proto.n_depth)
        flow = enface(mean_unnorm, smask).astype(np.float32)
        vness = vesselness_2d(flow, proto.ascan_spacing_um,
                              cfg.vessel_scale_factors)
        mask2d, _ = otsu_log_threshold(vness)
        graph, id_img = skeletonize_graph(mask2d)
        ids3d = project_ids(id_img, vessel_mask3d, smask)
        return name, flow, vness, mask2d, graph, id_img, ids3d, empty

    located = ordered_map(locate_slab, list(cfg.slabs), workers=1)

    # one FOV-level trace over every vessel voxel, shared by all slab maps
    trace = None
    vessel_any = np.zeros(flat_mean.shape, dtype=bool)
    for _, _, _, _, _, _, ids3d, _ in located:
        vessel_any |= ids3d > 0
    if cfg.compensate_pulse and vessel_any.any():
        trace = band_pulsatility(flat_stack.normalized, vessel_any, proto,
                                 cfg.pulse_window_ms)

    def finish_slab(args):
        name, flow, vness, mask2d, graph, id_img, ids3d, empty = args
        fits, alpha_map = fit_all_segments(ids3d, flat_stack.normalized, graph,
                                           proto, cfg.n_min_voxels, cfg.workers)
        alpha0_map = alpha_map.copy()
        if trace is not None:
            alpha0_map, _ = compensate(alpha_map, trace)
        alpha0_by_seg = {}
        for link in graph.links:
            fit = fits.get(link.segment_id)
            if fit is None or fit.status == "insufficient":
                continue
            px = np.asarray(link.pixels)
            vals = alpha0_map[px[:, 0], px[:, 1]]
            vals = vals[np.isfinite(vals)]
            if vals.size:
                alpha0_by_seg[link.segment_id] = float(vals.mean())
        seg_alpha = {sid: f.alpha for sid, f in fits.items()
                     if f.status != "insufficient" and np.isfinite(f.alpha)}
        full_map = segment_alpha_map(id_img, seg_alpha)
        img, info = vista_image(full_map, flow,
                                alpha_range=cfg.alpha_display_range,
                                median_window=cfg.render_median_window,
                                value_percentile=cfg.render_value_percentile)
        return SlabResult(name=name, enface_flow=flow, vesselness=vness,
                          mask2d=mask2d, graph=graph, id_image=id_img,
                          ids3d=ids3d, fits=fits, alpha_map=alpha_map,
                          alpha0_map=alpha0_map,
                          alpha0_by_segment=alpha0_by_seg, render=img,
                          render_info=info, empty_columns=empty)

    slab_results = ordered_map(finish_slab, located, workers=1)
    slabs = {r.name: r for r in slab_results}
    return PipelineResult(protocol=proto, config=cfg, stack=flat_stack,
                          shifts=shifts, flatten_px=col_shifts,
                          surfaces=surfaces, mask3d=vessel_mask3d,
                          oof_threshold=oof_thr, trace=trace, slabs=slabs)


def _fmt(x) -> str:
    if isinstance(x, float):
        if np.isnan(x):
            return "nan"
        return format(x, ".9g")
    return str(x)


def _segments_csv(result: PipelineResult) -> str:
    rows = ["slab,segment_id,n_voxels,alpha,beta,residual_rms,status,alpha0"]
    for name in result.config.slabs:
        sr = result.slabs[name]
        for sid in sorted(sr.fits):
            f = sr.fits[sid]
            a0 = sr.alpha0_by_segment.get(sid, float("nan"))
            rows.append(",".join([name, str(sid), str(f.n_voxels),
                                  _fmt(f.alpha), _fmt(f.beta),
                                  _fmt(f.residual_rms), f.status, _fmt(a0)]))
    return "\n".join(rows) + "\n"


def _trace_csv(result: PipelineResult) -> str:
    rows = ["y_center,time_ms,alpha_band,g_rep,flagged"]
    tr = result.trace
    if tr is not None:
        for i in range(len(tr.y_centers)):
            rows.append(",".join([str(int(tr.y_centers[i])),
                                  _fmt(float(tr.times_ms[i])),
                                  _fmt(float(tr.alpha_band[i])),
                                  _fmt(float(tr.g_rep[i])),
                                  str(int(tr.flags[i]))]))
    return "\n".join(rows) + "\n"


def save_results(result: PipelineResult, out_dir,
                 input_digest: str | None = None) -> dict:
    """Write all artifacts; returns the manifest dict."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    proto = result.protocol
    artifacts = []

    def record(name):
        artifacts.append(name)
        return out / name

    surf = np.stack([result.surfaces.ilm, result.surfaces.rnfl_posterior,
                     result.surfaces.inl_center, result.surfaces.rpe])
    write_array(record("surfaces.vvol"), surf.astype(np.float32), "surface",
                proto, meta={"order": ["ilm", "rnfl_posterior",
                                       "inl_center", "rpe"]})
    write_array(record("vessel_mask3d.vvol"),
                result.mask3d.astype(np.uint8), "mask", proto)
    if result.config.save_stack:
        write_array(record("octa_unnorm.vvol"), result.stack.unnormalized,
                    "octa_unnorm", proto)
        write_array(record("octa_norm.vvol"), result.stack.normalized,
                    "octa_norm", proto)

    for name in result.config.slabs:
        sr = result.slabs[name]
        write_array(record(f"enface_{name}.vvol"), sr.enface_flow,
                    "octa_unnorm", proto)
        write_array(record(f"ids_{name}.vvol"), sr.id_image, "ids", proto)
        write_array(record(f"alpha_{name}.vvol"),
                    sr.alpha_map.astype(np.float32), "alpha", proto)
        write_array(record(f"alpha0_{name}.vvol"),
                    sr.alpha0_map.astype(np.float32), "alpha", proto)
        save_png(sr.render, record(f"vista_{name}.png"), sr.render_info)
        artifacts.append(f"vista_{name}.png.json")
        (out / f"graph_{name}.json").write_text(sr.graph.to_json() + "\n")
        artifacts.append(f"graph_{name}.json")

    (out / "segments.csv").write_text(_segments_csv(result))
    artifacts.append("segments.csv")
    (out / "trace.csv").write_text(_trace_csv(result))
    artifacts.append("trace.csv")

    manifest = {
        "package": "vistaocta",
        "version": __version__,
        "protocol": proto.name,
        "config": result.config.manifest_dict(),
        "input_sha256": input_digest,
        "artifacts": sorted(artifacts),
    }
    with open(out / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
        fh.write("\n")
    return manifest


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def slab_region_stats(result: PipelineResult, slab: str, regions: dict) -> dict:
    """Region means of the compensated rate map of one slab."""
    return region_stats(result.slabs[slab].alpha0_map, regions)
