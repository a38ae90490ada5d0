"""Rendering diagrams, labelings and contours to PNG and SVG.

PNG output paints the label raster directly: ``cells`` colors every
site's region with a stable palette, ``edges`` draws the label-change
pixels black on white, and ``contours`` does the same after mapping
sites through a merge labeling so redundant interior walls disappear.
SVG output traces the same label raster's region boundaries as
axis-aligned polylines along pixel edges (the raster is the source of
truth; no analytic curves are fitted).  Both formats are deterministic:
identical parameters produce identical bytes.
"""

import colorsys
from pathlib import Path

import numpy as np
from PIL import Image

from .diagram import SiteGrid, rasterize_assignment

RENDER_MODES = ("cells", "edges", "contours")

# Golden-ratio hue stepping keeps nearby labels visually distinct while
# staying reproducible for any label count.
_HUE_STEP = 0.6180339887498949


def palette(count: int) -> np.ndarray:
    """(count, 3) uint8 colors, stable across runs and label counts."""
    colors = np.empty((max(count, 1), 3), dtype=np.uint8)
    for k in range(max(count, 1)):
        rgb = colorsys.hsv_to_rgb((k * _HUE_STEP) % 1.0, 0.55, 0.95)
        colors[k] = [round(c * 255) for c in rgb]
    return colors


def label_raster(grid: SiteGrid, size: int, mode: str, site_to_label=None,
                 threads=None) -> np.ndarray:
    """The (size, size) int label image a render mode draws from."""
    if mode not in RENDER_MODES:
        raise ValueError(f"unknown render mode {mode!r}")
    assign = rasterize_assignment(grid, size, size, threads=threads)
    labels = assign.labels
    if mode == "contours":
        if site_to_label is None:
            raise ValueError("contours mode needs a merge labeling")
        mapping = np.asarray(site_to_label, dtype=np.int32)
        if mapping.shape != (grid.site_count,):
            raise ValueError(f"labeling covers {mapping.shape[0]} sites, "
                             f"expected {grid.site_count}")
        labels = mapping[labels]
    elif site_to_label is not None and mode == "cells":
        labels = np.asarray(site_to_label, dtype=np.int32)[labels]
    return labels


def _boundary_mask(labels: np.ndarray) -> np.ndarray:
    """Pixels whose right or down 4-neighbor has a different label."""
    mask = np.zeros(labels.shape, dtype=bool)
    horiz = labels[:, 1:] != labels[:, :-1]
    vert = labels[1:, :] != labels[:-1, :]
    mask[:, :-1] |= horiz
    mask[:, 1:] |= horiz
    mask[:-1, :] |= vert
    mask[1:, :] |= vert
    return mask


def render_png(grid: SiteGrid, size: int, mode: str, path, site_to_label=None,
               threads=None) -> None:
    labels = label_raster(grid, size, mode, site_to_label, threads)
    if mode == "cells":
        colors = palette(int(labels.max()) + 1)
        pixels = colors[labels]
    else:
        mask = _boundary_mask(labels)
        pixels = np.where(mask[..., None], 0, 255).astype(np.uint8)
        pixels = np.repeat(pixels, 3, axis=2)
    Image.fromarray(pixels, mode="RGB").save(Path(path), format="PNG")


def _boundary_polylines(labels: np.ndarray):
    """Closed/open chains of lattice points separating unequal labels.

    Each unit edge of the pixel grid that lies between two pixels with
    different labels contributes a segment between its lattice endpoints;
    segments are chained greedily in sorted order so output is stable.
    """
    h, w = labels.shape
    segments = set()
    for y in range(h):
        for x in range(w - 1):
            if labels[y, x] != labels[y, x + 1]:
                segments.add(((x + 1, y), (x + 1, y + 1)))
    for y in range(h - 1):
        for x in range(w):
            if labels[y, x] != labels[y + 1, x]:
                segments.add(((x, y + 1), (x + 1, y + 1)))
    adjacency = {}
    for a, b in segments:
        adjacency.setdefault(a, []).append(b)
        adjacency.setdefault(b, []).append(a)
    for nbrs in adjacency.values():
        nbrs.sort()
    unused = set(segments)

    def take(a, b):
        key = (a, b) if (a, b) in unused else (b, a)
        if key in unused:
            unused.discard(key)
            return True
        return False

    polylines = []
    for start in sorted(adjacency):
        for first in list(adjacency[start]):
            if not take(start, first):
                continue
            chain = [start, first]
            while True:
                here = chain[-1]
                step = next((n for n in adjacency[here] if take(here, n)), None)
                if step is None:
                    break
                chain.append(step)
            polylines.append(chain)
    return polylines


def render_svg(grid: SiteGrid, size: int, mode: str, path, site_to_label=None,
               threads=None) -> None:
    labels = label_raster(grid, size, mode, site_to_label, threads)
    lines = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" '
        f'viewBox="0 0 {size} {size}">',
        f'<rect width="{size}" height="{size}" fill="white"/>',
    ]
    for chain in _boundary_polylines(labels):
        points = " ".join(f"{x},{y}" for x, y in chain)
        lines.append(f'<polyline points="{points}" fill="none" stroke="black" '
                     f'stroke-width="1"/>')
    lines.append("</svg>")
    Path(path).write_text("\n".join(lines) + "\n", encoding="ascii")


def render(grid: SiteGrid, size: int, mode: str, path, site_to_label=None,
           threads=None) -> None:
    """Dispatch on the output suffix: .png paints pixels, .svg traces lines."""
    suffix = Path(path).suffix.lower()
    if suffix == ".png":
        render_png(grid, size, mode, path, site_to_label, threads)
    elif suffix == ".svg":
        render_svg(grid, size, mode, path, site_to_label, threads)
    else:
        raise ValueError(f"unsupported render output suffix {suffix!r}")
