"""Command-line pipeline: synth, detect, fit, label, render, export-tensor.

Each subcommand is one stage; stages communicate through files so they
can be chained or re-run independently.  Edge pixel sets travel as
black-and-white PNGs (white = edge pixel), site parameters as the JSON
parameter file, labelings as the text serialization, and training
tensors as the packed binary format.  Exit status is 0 on success, 2 for
command-line usage errors and 1 for runtime failures (missing files,
malformed inputs, diverged fits).  The CSVD_THREADS environment variable
caps worker threads for the raster stages (0 or unset picks a default).
"""

import argparse
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from .diagram import init_grid, rasterize_assignment
from .energy import EdgePixelSet, EnergyConfig
from .fitter import FitConfig, fit
from .labeling import (DEFAULT_MERGE_THRESHOLD, DEFAULT_TOL_PX, coincidence,
                       load_labeling, merge, save_labeling)
from .params_io import ParamFile, export_tensor, load_params, save_params
from .pixels import SynthSpec, detect_edges, load_gray, synth_batch
from .render import RENDER_MODES, render


def save_edge_image(edges: EdgePixelSet, path) -> None:
    """Write an edge set as a white-on-black PNG at its source resolution."""
    w, h = edges.source_resolution
    scale = float(max(w, h))
    data = np.zeros((h, w), dtype=np.uint8)
    xs = np.rint(edges.xs * scale - 0.5).astype(int)
    ys = np.rint(edges.ys * scale - 0.5).astype(int)
    data[ys, xs] = 255
    Image.fromarray(data, mode="L").save(Path(path), format="PNG")


def load_edge_image(path) -> EdgePixelSet:
    """Read a white-on-black edge PNG back into an edge pixel set."""
    img = load_gray(path)
    ys, xs = np.nonzero(img.values >= 0.5)
    pixels = np.column_stack([xs, ys]).astype(np.int64)
    return EdgePixelSet.from_pixels(pixels, img.width, img.height)


def _grid_pair(text: str):
    try:
        m, n = text.lower().split("x")
        m, n = int(m), int(n)
    except ValueError:
        raise argparse.ArgumentTypeError(f"grid must look like 16x16, got {text!r}")
    if m < 1 or n < 1:
        raise argparse.ArgumentTypeError(f"grid sides must be positive, got {text!r}")
    return m, n


def _cmd_synth(args) -> int:
    spec = SynthSpec(seed_count=args.seeds, rng_seed=args.rng, size=args.size)
    records = synth_batch(spec, args.count, args.out)
    print(f"wrote {len(records)} images to {args.out}")
    return 0


def _cmd_detect(args) -> int:
    img = load_gray(args.input)
    edges = detect_edges(img, method=args.method, threshold=args.threshold,
                         thin=args.thin)
    save_edge_image(edges, args.out)
    print(f"{len(edges)} edge pixels -> {args.out}")
    return 0


def _cmd_fit(args) -> int:
    omega = load_edge_image(args.edges)
    m, n = args.grid
    grid = init_grid(m, n, args.ne)
    energy = EnergyConfig(lambda1=args.lambda1, lambda2=args.lambda2,
                          epsilon=args.epsilon, delta=args.delta)
    config = FitConfig(iterations=args.iters, step_size=args.step, energy=energy)
    report = fit(grid, omega, config)
    save_params(ParamFile.from_grid(report.final_grid), args.out)
    first, last = report.energy_history[0], report.energy_history[-1]
    print(f"energy {first.total:.6f} -> {last.total:.6f} over {args.iters} "
          f"iterations, edge coverage {report.coverage:.3f} -> {args.out}")
    return 0


def _cmd_label(args) -> int:
    param_file = load_params(args.params)
    omega = load_edge_image(args.edges)
    w, h = omega.source_resolution
    assign = rasterize_assignment(param_file.grid, w, h)
    table = coincidence(assign, omega, tol_px=args.tol,
                        site_count=param_file.grid.site_count)
    labeling = merge(table, threshold=args.threshold)
    save_labeling(labeling, args.out)
    print(f"{labeling.label_count} labels over {param_file.grid.site_count} "
          f"sites -> {args.out}")
    return 0


def _cmd_render(args) -> int:
    param_file = load_params(args.params)
    site_to_label = None
    if args.labels is not None:
        site_to_label = load_labeling(args.labels).site_to_label
    render(param_file.grid, args.size, args.mode, args.out, site_to_label)
    print(f"rendered {args.mode} -> {args.out}")
    return 0


def _cmd_export_tensor(args) -> int:
    param_file = load_params(args.params)
    if args.labels is not None:
        labeling = load_labeling(args.labels)
        param_file = ParamFile(param_file.grid, labeling.site_to_label)
    export_tensor(param_file, args.out)
    size = Path(args.out).stat().st_size
    print(f"tensor {param_file.grid.m}x{param_file.grid.n} -> {args.out} "
          f"({size} bytes)")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="csvd",
        description="Fit convex-set-distance Voronoi diagrams to image edges.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate synthetic cell-structure images")
    p.add_argument("--seeds", type=int, required=True)
    p.add_argument("--size", type=int, default=128)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--rng", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(handler=_cmd_synth)

    p = sub.add_parser("detect", help="extract edge pixels from an image")
    p.add_argument("--input", required=True)
    p.add_argument("--method", choices=("sobel", "log"), default="sobel")
    p.add_argument("--threshold", type=float, default=0.3)
    p.add_argument("--thin", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(handler=_cmd_detect)

    p = sub.add_parser("fit", help="fit a site grid to an edge image")
    p.add_argument("--edges", required=True)
    p.add_argument("--grid", type=_grid_pair, default=(16, 16))
    p.add_argument("--ne", type=int, default=6)
    p.add_argument("--iters", type=int, default=2000)
    p.add_argument("--step", type=float, default=1e-3)
    p.add_argument("--lambda1", type=float, default=1.0)
    p.add_argument("--lambda2", type=float, default=1.0)
    p.add_argument("--epsilon", type=float, default=None)
    p.add_argument("--delta", type=float, default=0.25)
    p.add_argument("--out", required=True)
    p.set_defaults(handler=_cmd_fit)

    p = sub.add_parser("label", help="merge cells by edge coincidence")
    p.add_argument("--params", required=True)
    p.add_argument("--edges", required=True)
    p.add_argument("--tol", type=float, default=DEFAULT_TOL_PX)
    p.add_argument("--threshold", type=float, default=DEFAULT_MERGE_THRESHOLD)
    p.add_argument("--out", required=True)
    p.set_defaults(handler=_cmd_label)

    p = sub.add_parser("render", help="draw cells, edges or contours")
    p.add_argument("--params", required=True)
    p.add_argument("--labels", default=None)
    p.add_argument("--size", type=int, default=512)
    p.add_argument("--mode", choices=RENDER_MODES, default="cells")
    p.add_argument("--out", required=True)
    p.set_defaults(handler=_cmd_render)

    p = sub.add_parser("export-tensor", help="pack parameters into the "
                       "binary training tensor")
    p.add_argument("--params", required=True)
    p.add_argument("--labels", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(handler=_cmd_export_tensor)
    return parser


def cli(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.handler(args)
    except (OSError, ValueError, KeyError) as exc:
        print(f"csvd {args.command}: error: {exc}", file=sys.stderr)
        return 1


def main() -> int:
    return cli(sys.argv[1:])


if __name__ == "__main__":
    sys.exit(main())
