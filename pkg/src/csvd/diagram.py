"""Grids of convex sites and locally min-pooled assignment rasters.

Sites live at the centers of an m-by-n grid over the unit square.  For a
query point, only sites whose grid cell is within a small Chebyshev
radius of the query's cell are considered; over that candidate set we
take the smallest and second-smallest convex set distances.  The window
is the definition, not a shortcut: a site outside it is never assigned,
even if its cell has grown to reach the query.  On freshly initialized
grids this agrees with a global search everywhere; after fitting it can
differ on a small fraction of pixels in regions the cells evacuated.
Rasterizing the winner index over pixel centers yields the diagram:
per-pixel labels, the pixels where labels change (the diagram's edges),
and the shared boundary pixels per adjacent site pair.

All heavy paths are vectorized over queries.  Distances are computed with
one fixed sequence of elementwise operations, so local and brute-force
evaluations of the same (site, query) pair agree bit for bit and rasters
are reproducible regardless of threading.
"""

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .geometry import ConvexSite, HalfPlaneEdge, Point2

DEFAULT_NEIGHBORHOOD_RADIUS = 2

# params column layout, per site: x, y, n_e angles, n_e offsets, radius
_POS = slice(0, 2)


def param_width(n_e: int) -> int:
    return 2 * n_e + 3


@dataclass
class SiteGrid:
    """m*n convex sites with parameters packed in one float64 array.

    Row k of ``params`` holds site k = i*n + j (site (i, j) starts at the
    grid cell center ((i+0.5)/m, (j+0.5)/n)).  Columns are the position
    pair, then ``n_e`` edge normal angles, then ``n_e`` edge offsets, then
    the disk radius.  The packed layout is the working representation for
    the vectorized evaluators and the optimizer; ``site(k)`` unpacks one
    row into geometry objects.
    """

    m: int
    n: int
    n_e: int
    params: np.ndarray
    neighborhood_radius: int = DEFAULT_NEIGHBORHOOD_RADIUS

    def __post_init__(self):
        if self.m < 1 or self.n < 1:
            raise ValueError(f"grid resolution must be >= 1, got {self.m}x{self.n}")
        if self.n_e < 1:
            raise ValueError(f"need at least one edge per site, got {self.n_e}")
        if self.neighborhood_radius < 1:
            raise ValueError("neighborhood radius must be >= 1")
        want = (self.m * self.n, param_width(self.n_e))
        self.params = np.ascontiguousarray(self.params, dtype=np.float64)
        if self.params.shape != want:
            raise ValueError(f"params shape {self.params.shape}, expected {want}")
        if not np.all(np.isfinite(self.params)):
            raise ValueError("non-finite site parameter")
        if np.any(self.offsets <= 0) or np.any(self.radii <= 0):
            raise ValueError("edge offsets and radii must be positive")

    @property
    def site_count(self) -> int:
        return self.m * self.n

    @property
    def positions(self) -> np.ndarray:
        return self.params[:, _POS]

    @property
    def angles(self) -> np.ndarray:
        return self.params[:, 2:2 + self.n_e]

    @property
    def offsets(self) -> np.ndarray:
        return self.params[:, 2 + self.n_e:2 + 2 * self.n_e]

    @property
    def radii(self) -> np.ndarray:
        return self.params[:, 2 + 2 * self.n_e]

    @property
    def cell_extent(self) -> tuple[float, float]:
        return (1.0 / self.m, 1.0 / self.n)

    @property
    def min_cell_extent(self) -> float:
        return min(1.0 / self.m, 1.0 / self.n)

    def flat_index(self, i: int, j: int) -> int:
        return i * self.n + j

    def home_cell(self, k: int) -> tuple[int, int]:
        return divmod(k, self.n)

    def cell_of(self, x: float, y: float) -> tuple[int, int]:
        """Grid cell containing a unit-square point (edges clip inward)."""
        i = min(max(int(x * self.m), 0), self.m - 1)
        j = min(max(int(y * self.n), 0), self.n - 1)
        return i, j

    def site(self, k: int) -> ConvexSite:
        row = self.params[k]
        edges = tuple(
            HalfPlaneEdge(float(row[2 + e]), float(row[2 + self.n_e + e]))
            for e in range(self.n_e)
        )
        return ConvexSite(Point2(float(row[0]), float(row[1])), edges,
                          float(row[2 + 2 * self.n_e]))

    def copy(self) -> "SiteGrid":
        return SiteGrid(self.m, self.n, self.n_e, self.params.copy(),
                        self.neighborhood_radius)


def init_grid(m: int, n: int, n_e: int, jitter_seed=None) -> SiteGrid:
    """Regular starting grid: congruent polygon-plus-disk sites, one per cell.

    Each site sits at its cell center with disk radius equal to the cell
    spacing and a regular polygon whose vertices lie on the circle of half
    that radius, i.e. every offset is the polygon's apothem.  Without
    ``jitter_seed`` the first normal of every site points along +x; with
    it, each site gets a uniform random rotation within one edge period so
    the polygons are still congruent but differently oriented.
    """
    if m < 2 or n < 2:
        raise ValueError(f"grid resolution must be >= 2 per axis, got {m}x{n}")
    if n_e < 3:
        raise ValueError(f"sites need >= 3 polygon edges, got {n_e}")

    spacing = min(1.0 / m, 1.0 / n)
    apothem = (spacing / 2.0) * math.cos(math.pi / n_e)

    count = m * n
    params = np.empty((count, param_width(n_e)), dtype=np.float64)
    i = np.repeat(np.arange(m), n)
    j = np.tile(np.arange(n), m)
    params[:, 0] = (i + 0.5) / m
    params[:, 1] = (j + 0.5) / n

    if jitter_seed is None:
        rot = np.zeros(count)
    else:
        rng = np.random.default_rng(jitter_seed)
        rot = rng.uniform(0.0, 2.0 * math.pi / n_e, size=count)
    steps = 2.0 * math.pi * np.arange(n_e) / n_e
    params[:, 2:2 + n_e] = rot[:, None] + steps[None, :]
    params[:, 2 + n_e:2 + 2 * n_e] = apothem
    params[:, 2 + 2 * n_e] = spacing
    return SiteGrid(m, n, n_e, params)


@lru_cache(maxsize=64)
def candidate_table(m: int, n: int, radius: int) -> np.ndarray:
    """Per-cell candidate site indices within the Chebyshev radius.

    Shape (m*n, (2*radius+1)**2), padded with -1 where the window leaves
    the grid.  Valid entries are in ascending site-index order, which is
    what makes first-occurrence argmin break distance ties toward the
    lowest index.
    """
    k = np.arange(m * n)
    ci, cj = np.divmod(k, n)
    offs = np.arange(-radius, radius + 1)
    di = np.repeat(offs, len(offs))
    dj = np.tile(offs, len(offs))
    ii = ci[:, None] + di[None, :]
    jj = cj[:, None] + dj[None, :]
    ok = (ii >= 0) & (ii < m) & (jj >= 0) & (jj < n)
    table = np.where(ok, ii * n + jj, -1).astype(np.int32)
    table.setflags(write=False)
    return table


class SiteArrays:
    """Contiguous per-edge views of a grid's parameters, trig precomputed.

    Built once per evaluation pass over the full site table so every
    candidate subset gathers from identical floats.
    """

    def __init__(self, grid: SiteGrid):
        self.n_e = grid.n_e
        self.px = np.ascontiguousarray(grid.params[:, 0])
        self.py = np.ascontiguousarray(grid.params[:, 1])
        ang = grid.angles
        self.cth = np.ascontiguousarray(np.cos(ang).T)
        self.sth = np.ascontiguousarray(np.sin(ang).T)
        self.b = np.ascontiguousarray(grid.offsets.T)
        self.r = np.ascontiguousarray(grid.radii)


def candidate_distances(tr: SiteArrays, qx, qy, cand) -> np.ndarray:
    """Distance from each query to each candidate site; inf at -1 padding."""
    k = np.where(cand >= 0, cand, 0)
    vx = tr.px[k] - qx[:, None]
    vy = tr.py[k] - qy[:, None]
    d = np.sqrt(vx * vx + vy * vy) / tr.r[k]
    for e in range(tr.n_e):
        term = (tr.cth[e][k] * vx + tr.sth[e][k] * vy) / tr.b[e][k]
        np.maximum(d, term, out=d)
    return np.where(cand >= 0, d, np.inf)


def _min2_select(dists, cand):
    """Two smallest entries per row, first occurrence winning ties."""
    rows = np.arange(dists.shape[0])
    s1 = np.argmin(dists, axis=1)
    d1 = dists[rows, s1]
    k1 = cand[rows, s1].astype(np.int64)
    dists[rows, s1] = np.inf
    s2 = np.argmin(dists, axis=1)
    d2 = dists[rows, s2]
    k2 = np.where(np.isinf(d2), -1, cand[rows, s2]).astype(np.int64)
    return d1, k1, d2, k2


@dataclass(frozen=True)
class Min2Result:
    """Smallest and second-smallest site distances at one query point."""

    d1: float
    k1: int
    d2: float
    k2: int


def min2_local_batch(grid: SiteGrid, qx, qy, trig: SiteArrays = None):
    """Min-pooled top-2 distances over each query's local candidate window."""
    qx = np.asarray(qx, dtype=np.float64)
    qy = np.asarray(qy, dtype=np.float64)
    tr = trig if trig is not None else SiteArrays(grid)
    table = candidate_table(grid.m, grid.n, grid.neighborhood_radius)
    ci = np.clip((qx * grid.m).astype(np.int64), 0, grid.m - 1)
    cj = np.clip((qy * grid.n).astype(np.int64), 0, grid.n - 1)
    cand = table[ci * grid.n + cj]
    dists = candidate_distances(tr, qx, qy, cand)
    return _min2_select(dists, cand)


def min2_global_batch(grid: SiteGrid, qx, qy, chunk: int = 4096):
    """Brute-force top-2 distances over all sites, the locality oracle."""
    qx = np.asarray(qx, dtype=np.float64)
    qy = np.asarray(qy, dtype=np.float64)
    tr = SiteArrays(grid)
    all_sites = np.arange(grid.site_count, dtype=np.int32)
    outs = [np.empty(len(qx)), np.empty(len(qx), np.int64),
            np.empty(len(qx)), np.empty(len(qx), np.int64)]
    for lo in range(0, len(qx), chunk):
        hi = min(lo + chunk, len(qx))
        cand = np.broadcast_to(all_sites, (hi - lo, grid.site_count))
        dists = candidate_distances(tr, qx[lo:hi], qy[lo:hi], cand)
        for out, part in zip(outs, _min2_select(dists, cand)):
            out[lo:hi] = part
    return tuple(outs)


def min2_local(grid: SiteGrid, q: Point2) -> Min2Result:
    """Top-2 site distances at one unit-square query point."""
    if not (0.0 <= q.x <= 1.0 and 0.0 <= q.y <= 1.0):
        raise ValueError(f"query ({q.x}, {q.y}) outside the unit square")
    if grid.site_count < 2:
        raise ValueError("need at least two sites for a top-2 query")
    d1, k1, d2, k2 = min2_local_batch(grid, [q.x], [q.y])
    return Min2Result(float(d1[0]), int(k1[0]), float(d2[0]), int(k2[0]))


def pixel_scale(width: int, height: int) -> float:
    """Pixels map to the unit square by dividing through this length."""
    return float(max(width, height))


def pixel_centers(width: int, height: int):
    """Unit-square x and y coordinate vectors of the pixel grid centers."""
    s = pixel_scale(width, height)
    return (np.arange(width) + 0.5) / s, (np.arange(height) + 0.5) / s


@dataclass
class AssignmentImage:
    """Rasterized diagram: winner labels plus boundary bookkeeping.

    ``labels[y, x]`` is the winning site index at the pixel center.
    ``edge_pixels`` holds (x, y) rows for each pixel that starts a
    4-adjacent label change (the member of the pair with the smaller
    row-major flattened coordinate), in flattened order.
    ``boundary_segments`` maps each unordered adjacent site pair (a, b),
    a < b, to the sorted list of edge pixels separating that pair.
    ``d1``/``d2`` keep the per-pixel top-2 distances for downstream use.
    """

    width: int
    height: int
    labels: np.ndarray
    d1: np.ndarray
    d2: np.ndarray
    edge_pixels: np.ndarray
    boundary_segments: dict = field(default_factory=dict)


def _resolve_threads(threads) -> int:
    if threads is None:
        threads = int(os.environ.get("CSVD_THREADS", "0") or 0)
    if threads <= 0:
        threads = min(4, os.cpu_count() or 1)
    return threads


def rasterize_assignment(grid: SiteGrid, width: int, height: int,
                         threads: int = None) -> AssignmentImage:
    """Assign every pixel center to its nearest site under min-pooling.

    Pixel rows are processed in blocks (optionally across threads, see the
    CSVD_THREADS environment variable) writing disjoint slices of the
    output buffers; the result is bit-identical for any thread count.
    """
    if width < 2 or height < 2:
        raise ValueError(f"raster must be at least 2x2, got {width}x{height}")
    xs, ys = pixel_centers(width, height)
    tr = SiteArrays(grid)

    labels = np.empty((height, width), dtype=np.int32)
    d1 = np.empty((height, width), dtype=np.float64)
    d2 = np.empty((height, width), dtype=np.float64)

    def do_rows(y0, y1):
        qx = np.tile(xs, y1 - y0)
        qy = np.repeat(ys[y0:y1], width)
        b1, l1, b2, _ = min2_local_batch(grid, qx, qy, trig=tr)
        labels[y0:y1] = l1.reshape(y1 - y0, width)
        d1[y0:y1] = b1.reshape(y1 - y0, width)
        d2[y0:y1] = b2.reshape(y1 - y0, width)

    nthreads = _resolve_threads(threads)
    block = max(1, -(-height // (nthreads * 4)))
    spans = [(y, min(y + block, height)) for y in range(0, height, block)]
    if nthreads == 1 or len(spans) == 1:
        for y0, y1 in spans:
            do_rows(y0, y1)
    else:
        with ThreadPoolExecutor(max_workers=nthreads) as pool:
            list(pool.map(lambda s: do_rows(*s), spans))

    edge_pixels, segments = _extract_boundaries(labels)
    return AssignmentImage(width, height, labels, d1, d2, edge_pixels, segments)


def _extract_boundaries(labels):
    """Pixels starting a 4-adjacent label change, plus per-pair groupings."""
    h, w = labels.shape
    mask = np.zeros((h, w), dtype=bool)
    east = labels[:, :-1] != labels[:, 1:]
    south = labels[:-1, :] != labels[1:, :]
    mask[:, :-1] |= east
    mask[:-1, :] |= south
    ys, xs = np.nonzero(mask)
    edge_pixels = np.column_stack([xs, ys]).astype(np.int32)

    segments = {}
    for yy, xx, down in ((*np.nonzero(east), False), (*np.nonzero(south), True)):
        la = labels[yy, xx]
        lb = labels[yy + 1, xx] if down else labels[yy, xx + 1]
        for x, y, a, b in zip(xx, yy, la, lb):
            key = (int(a), int(b)) if a < b else (int(b), int(a))
            segments.setdefault(key, set()).add((int(x), int(y)))
    return edge_pixels, {
        key: sorted(pix, key=lambda t: (t[1], t[0]))
        for key, pix in sorted(segments.items())
    }
