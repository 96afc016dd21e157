"""Command line interface.

Subcommands mirror the pipeline stages so any intermediate can be produced
or consumed on its own; `run` executes the whole chain from a YAML config.
Exit codes: 0 success, 1 processing error, 2 usage / missing input.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .analysis import consistency_fit, cv, protocol_feasibility, region_stats
from .container import read_array, read_volume, write_array, write_volume
from .decay import fit_all_segments
from .layers import segment_rpe
from .octa import octa_stack, register_bscans
from .phantom import build_phantom
from .pipeline import (RunConfig, file_digest, process_volume, save_results)
from .presets import PRESETS, build_preset
from .pulsatility import band_pulsatility
from .render import save_png, vista_image
from .vessels import (mask_3d, otsu_log_threshold, skeletonize_graph,
                      vesselness_2d)
from .volume import PROTOCOLS, get_protocol, validate_protocol


def _cmd_phantom(args):
    spec = build_preset(args.preset, args.seed)
    vol, truth = build_phantom(spec, workers=args.workers)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_volume(out, vol)
    if args.truth:
        tdir = Path(args.truth)
        tdir.mkdir(parents=True, exist_ok=True)
        write_array(tdir / "ids.vvol", truth.ids, "ids", spec.protocol)
        doc = {"alpha0": {str(k): v for k, v in truth.alpha0.items()},
               "segment_kind": truth.segment_kind,
               "g_rep_rows": truth.g_rep_rows.tolist(),
               "row_times_ms": truth.row_times_ms.tolist()}
        (tdir / "truth.json").write_text(json.dumps(doc, sort_keys=True) + "\n")
    print(f"wrote {out}")


def _cmd_octa(args):
    vol = read_volume(args.input)
    stack = octa_stack(vol, mode=args.mode, workers=args.workers)
    if args.register:
        _, stack = register_bscans(stack)
    write_array(args.out_unnorm, stack.unnormalized, "octa_unnorm", vol.protocol)
    write_array(args.out_norm, stack.normalized, "octa_norm", vol.protocol)
    print(f"wrote {args.out_unnorm} and {args.out_norm}")


def _cmd_layers(args):
    vol = read_volume(args.input)
    rpe = segment_rpe(vol)
    write_array(args.out, rpe.astype(np.float32), "surface", vol.protocol,
                meta={"surface": "rpe_coarse"})
    print(f"wrote {args.out}")


def _cmd_vessels(args):
    enface, header = read_array(args.enface)
    proto = get_protocol(header["protocol"]["name"]) if header.get("protocol") \
        else None
    spacing = proto.ascan_spacing_um if proto else args.spacing_um
    resp = vesselness_2d(enface.astype(np.float64), spacing)
    mask, _ = otsu_log_threshold(resp)
    graph, id_img = skeletonize_graph(mask)
    write_array(args.out_ids, id_img, "ids", proto)
    Path(args.out_graph).write_text(graph.to_json() + "\n")
    print(f"wrote {args.out_ids} and {args.out_graph}")


def _cmd_fit(args):
    ids, _ = read_array(args.ids)
    norm, header = read_array(args.norm)
    from .container import _protocol_from_dict
    proto = _protocol_from_dict(header["protocol"])

    class _Link:
        def __init__(self, sid):
            self.segment_id = sid
            self.pixels = np.empty((0, 2), int)

    class _Graph:
        links = [_Link(int(s)) for s in np.unique(ids) if s != 0]

    fits, _ = fit_all_segments(ids, norm, _Graph(), proto, args.n_min)
    rows = ["segment_id,n_voxels,alpha,beta,residual_rms,status"]
    for sid in sorted(fits):
        f = fits[sid]
        rows.append(f"{sid},{f.n_voxels},{f.alpha:.9g},{f.beta:.9g},"
                    f"{f.residual_rms:.9g},{f.status}")
    Path(args.out).write_text("\n".join(rows) + "\n")
    print(f"wrote {args.out}")


def _cmd_pulse(args):
    norm, header = read_array(args.norm)
    ids, _ = read_array(args.ids)
    from .container import _protocol_from_dict
    proto = _protocol_from_dict(header["protocol"])
    trace = band_pulsatility(norm, ids > 0, proto, args.window_ms)
    rows = ["y_center,time_ms,alpha_band,g_rep,flagged"]
    for i in range(len(trace.y_centers)):
        rows.append(f"{int(trace.y_centers[i])},{trace.times_ms[i]:.9g},"
                    f"{trace.alpha_band[i]:.9g},{trace.g_rep[i]:.9g},"
                    f"{int(trace.flags[i])}")
    Path(args.out).write_text("\n".join(rows) + "\n")
    print(f"wrote {args.out}")


def _cmd_render(args):
    alpha, _ = read_array(args.alpha)
    enface, _ = read_array(args.enface)
    img, info = vista_image(np.where(alpha == 0, np.nan, alpha)
                            if args.zero_is_undefined else alpha, enface)
    save_png(img, args.out, info)
    print(f"wrote {args.out}")


def _cmd_analyze(args):
    if args.what == "feasibility":
        proto = get_protocol(args.protocol)
        report = protocol_feasibility((args.alpha_min, args.alpha_max), proto)
        print(json.dumps(report.as_dict(), indent=1, sort_keys=True))
        return
    raise ValueError(f"unknown analysis {args.what!r}")


def _cmd_protocols(args):
    for name, p in PROTOCOLS.items():
        bad = validate_protocol(p)
        state = "ok" if not bad else f"invalid: {bad}"
        print(f"{name}: {p.n_bscans}x{p.ascans_per_bscan}x{p.n_depth}, "
              f"dt={p.dt_ms} ms, N={p.n_repeats}, {state}")


def _cmd_run(args):
    cfg = RunConfig.from_yaml(args.config) if args.config else RunConfig()
    if args.workers is not None:
        cfg.workers = args.workers
    digest = None
    if args.input:
        vol = read_volume(args.input)
        digest = file_digest(args.input)
    else:
        preset = args.preset or "demo"
        spec = build_preset(preset, args.seed)
        vol, _ = build_phantom(spec, workers=cfg.workers)
    result = process_volume(vol, cfg)
    manifest = save_results(result, args.out, digest)
    print(f"wrote {len(manifest['artifacts'])} artifacts to {args.out}")


def make_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="vista",
                                 description="interscan-time OCTA processing")
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", help="synthesize a preset phantom volume")
    p.add_argument("--preset", default="demo", choices=sorted(PRESETS))
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--truth", default=None, help="directory for ground truth")
    p.add_argument("--workers", type=int, default=None)
    p.set_defaults(fn=_cmd_phantom)

    p = sub.add_parser("octa", help="compute the OCTA stack")
    p.add_argument("--input", required=True)
    p.add_argument("--out-unnorm", required=True)
    p.add_argument("--out-norm", required=True)
    p.add_argument("--mode", default="amplitude", choices=["amplitude", "complex"])
    p.add_argument("--register", action="store_true")
    p.add_argument("--workers", type=int, default=None)
    p.set_defaults(fn=_cmd_octa)

    p = sub.add_parser("layers", help="coarse outer-band surface")
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_layers)

    p = sub.add_parser("vessels", help="en-face vessel mask and graph")
    p.add_argument("--enface", required=True)
    p.add_argument("--out-ids", required=True)
    p.add_argument("--out-graph", required=True)
    p.add_argument("--spacing-um", type=float, default=6.7)
    p.set_defaults(fn=_cmd_vessels)

    p = sub.add_parser("fit", help="per-segment decay fits")
    p.add_argument("--ids", required=True)
    p.add_argument("--norm", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--n-min", type=int, default=10)
    p.set_defaults(fn=_cmd_fit)

    p = sub.add_parser("pulse", help="slow-axis pulsatility trace")
    p.add_argument("--norm", required=True)
    p.add_argument("--ids", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--window-ms", type=float, default=100.0)
    p.set_defaults(fn=_cmd_pulse)

    p = sub.add_parser("render", help="rate-colored en-face image")
    p.add_argument("--alpha", required=True)
    p.add_argument("--enface", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--zero-is-undefined", action="store_true")
    p.set_defaults(fn=_cmd_render)

    p = sub.add_parser("analyze", help="summary analytics")
    p.add_argument("what", choices=["feasibility"])
    p.add_argument("--protocol", default="table1-3x3")
    p.add_argument("--alpha-min", type=float, default=0.3)
    p.add_argument("--alpha-max", type=float, default=2.5)
    p.set_defaults(fn=_cmd_analyze)

    p = sub.add_parser("protocols", help="list protocol presets")
    p.set_defaults(fn=_cmd_protocols)

    p = sub.add_parser("run", help="full pipeline")
    p.add_argument("--config", default=None)
    p.add_argument("--input", default=None, help="volume .vvol (default: phantom)")
    p.add_argument("--preset", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--workers", type=int, default=None)
    p.set_defaults(fn=_cmd_run)
    return ap


def main(argv=None) -> int:
    ap = make_parser()
    args = ap.parse_args(argv)
    try:
        args.fn(args)
    except FileNotFoundError as exc:
        print(f"error: missing file: {exc}", file=sys.stderr)
        return 2
    except (KeyError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # processing failure
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
