"""Merging diagram cells into labeled objects.

A fitted diagram usually carves each real object or hole into several
cells: only some cell boundaries trace detected edges, the rest are
leftover interior walls.  Each adjacent pair of cells is scored by the
fraction of its shared boundary pixels that lie within a tolerance of a
detected edge pixel (computed with one distance transform of the edge
set).  Pairs scoring under a threshold are merged with union-find, so an
object is the flood-fill closure of weakly separated cells; the contour
of the result keeps exactly the boundaries between different merged
labels and drops the redundant interior walls.
"""

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .diagram import AssignmentImage, _extract_boundaries
from .energy import EdgePixelSet

DEFAULT_TOL_PX = 1.5
DEFAULT_MERGE_THRESHOLD = 0.5

# Pairs with fewer shared boundary pixels than this never drive a merge:
# one or two pixels of contact say nothing about edge support, and cells
# pinched together through a gap in the edge set must not fuse on such
# thin evidence.  Their cells can still join through other pairs.
MIN_PAIR_PIXELS = 3


@dataclass(frozen=True)
class PairScore:
    """Edge support of one adjacent cell pair's shared boundary."""

    boundary_pixel_count: int
    supported_pixel_count: int

    @property
    def score(self) -> float:
        return self.supported_pixel_count / self.boundary_pixel_count


@dataclass
class CoincidenceTable:
    """Per-pair boundary support scores for one rasterized assignment.

    ``scores`` maps each unordered adjacent site pair (a, b), a < b, to
    its PairScore; pairs that share no boundary pixel do not appear.
    """

    site_count: int
    tol_px: float
    scores: dict = field(default_factory=dict)


def coincidence(assign: AssignmentImage, omega: EdgePixelSet,
                tol_px: float = DEFAULT_TOL_PX,
                site_count: int = None) -> CoincidenceTable:
    """Score every adjacent cell pair by detected-edge support.

    A boundary pixel is supported when it lies within ``tol_px`` pixels
    of some edge pixel, measured with a Euclidean distance transform of
    the edge set at the assignment's resolution.  The assignment and the
    edge set must share that resolution.  An empty edge set supports
    nothing, so every pair scores 0.  ``site_count`` may be passed when
    the diagram has sites whose region vanished from the raster; they
    still get labels during merging.
    """
    if tol_px <= 0:
        raise ValueError(f"tol_px must be positive, got {tol_px}")
    if omega.source_resolution != (assign.width, assign.height):
        raise ValueError(
            f"edge set resolution {omega.source_resolution} does not match "
            f"assignment {(assign.width, assign.height)}")
    if len(omega):
        scale = float(max(assign.width, assign.height))
        mask = np.ones((assign.height, assign.width), dtype=bool)
        ex = np.rint(omega.xs * scale - 0.5).astype(int)
        ey = np.rint(omega.ys * scale - 0.5).astype(int)
        mask[ey, ex] = False
        dist = ndimage.distance_transform_edt(mask)
    else:
        dist = np.full((assign.height, assign.width), np.inf)

    seen = int(assign.labels.max()) + 1
    if site_count is None:
        site_count = seen
    elif site_count < seen:
        raise ValueError(
            f"site_count {site_count} below the {seen} labels in the raster")
    table = CoincidenceTable(int(site_count), float(tol_px))
    for pair, pix in assign.boundary_segments.items():
        xs = np.array([p[0] for p in pix])
        ys = np.array([p[1] for p in pix])
        supported = int(np.count_nonzero(dist[ys, xs] <= tol_px))
        table.scores[pair] = PairScore(len(pix), supported)
    return table


@dataclass(frozen=True)
class SightGate:
    """Optional merge veto: anchors must see each other past the edges.

    Two cells carved out of one object can be joined by the straight
    segment between their sites' anchor points without crossing detected
    edge pixels, while cells of different objects that touch through a
    gap in the edge set cannot.  The gate samples that segment on the
    edge set's distance transform and vetoes the union when any interior
    sample comes within ``min_clearance_px`` of an edge pixel.  The ends
    of the segment are skipped (``span``) so an anchor sitting close to
    an edge does not block its own unions.

    ``anchors`` holds one (x, y) unit-square point per site and
    ``clearance[y, x]`` the pixel distance to the nearest edge pixel.
    """

    anchors: np.ndarray
    clearance: np.ndarray
    min_clearance_px: float = 1.0
    span: tuple = (0.1, 0.9)
    step_px: float = 0.5

    @classmethod
    def build(cls, grid, omega: EdgePixelSet, min_clearance_px: float = 1.0):
        """Gate for ``grid``'s anchor points against ``omega``."""
        w, h = omega.source_resolution
        scale = float(max(w, h))
        occupied = np.zeros((h, w), dtype=bool)
        if len(omega):
            ex = np.rint(omega.xs * scale - 0.5).astype(int)
            ey = np.rint(omega.ys * scale - 0.5).astype(int)
            occupied[ey, ex] = True
        clearance = ndimage.distance_transform_edt(~occupied)
        return cls(anchors=np.array(grid.params[:, :2]), clearance=clearance,
                   min_clearance_px=float(min_clearance_px))

    def clear(self, a: int, b: int) -> bool:
        """True when the a-b anchor segment stays off the edge set."""
        h, w = self.clearance.shape
        scale = float(max(w, h))
        ax, ay = self.anchors[a] * scale - 0.5
        bx, by = self.anchors[b] * scale - 0.5
        t0, t1 = self.span
        length = float(np.hypot(bx - ax, by - ay))
        samples = max(int(length * (t1 - t0) / self.step_px) + 1, 2)
        ts = np.linspace(t0, t1, samples)
        xs = np.clip(np.rint(ax + (bx - ax) * ts).astype(int), 0, w - 1)
        ys = np.clip(np.rint(ay + (by - ay) * ts).astype(int), 0, h - 1)
        return bool(np.all(self.clearance[ys, xs] > self.min_clearance_px))


@dataclass
class MergeLabeling:
    """Result of merging cells: a site-to-object-label map.

    ``site_to_label[k]`` is the object label of site k; labels run from
    0 to label_count - 1, ordered by each object's smallest site index.
    ``kept_pairs`` holds the pairs that did not themselves drive a
    merge (boundary scored at or above the threshold, or too short to
    judge); a kept pair can still end up in one object when a chain of
    merged pairs connects its sites.  ``kept_pairs`` is None on
    labelings read back from disk (the text format stores only the
    map).
    """

    site_to_label: np.ndarray
    label_count: int
    kept_pairs: frozenset
    threshold: float
    tol_px: float


class _DisjointSets:
    def __init__(self, n: int):
        self.parent = list(range(n))

    def find(self, a: int) -> int:
        root = a
        while self.parent[root] != root:
            root = self.parent[root]
        while self.parent[a] != root:
            self.parent[a], a = root, self.parent[a]
        return root

    def union(self, a: int, b: int) -> None:
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            # Attach the larger root under the smaller so roots stay the
            # minimal site of their component regardless of union order.
            if ra > rb:
                ra, rb = rb, ra
            self.parent[rb] = ra


def merge(table: CoincidenceTable,
          threshold: float = DEFAULT_MERGE_THRESHOLD,
          sight: SightGate = None) -> MergeLabeling:
    """Merge weakly supported pairs; label the resulting components.

    Pairs scoring below ``threshold`` are merged, pairs at or above it
    are kept apart (subject to transitive merges through other pairs).
    Pairs shorter than MIN_PAIR_PIXELS boundary pixels are kept: a
    contact of a couple of pixels carries too little evidence to fuse
    two cells into one object.  When a ``sight`` gate is supplied, a
    pair may also drive a merge only if its anchors see each other
    without crossing the edge set, which blocks cells that poke through
    a gap between two real objects.  Components are numbered in order
    of their smallest site index.
    """
    if not 0.0 <= threshold <= 1.0:
        raise ValueError(f"threshold must lie in [0, 1], got {threshold}")
    sets = _DisjointSets(table.site_count)
    kept = set()
    for (a, b), entry in table.scores.items():
        if entry.boundary_pixel_count >= MIN_PAIR_PIXELS \
                and entry.score < threshold \
                and (sight is None or sight.clear(a, b)):
            sets.union(a, b)
        else:
            kept.add((a, b))

    roots = np.array([sets.find(k) for k in range(table.site_count)])
    order = np.unique(roots)  # ascending minimal-site roots
    relabel = np.empty(table.site_count, dtype=np.int32)
    relabel[order] = np.arange(len(order), dtype=np.int32)
    return MergeLabeling(
        site_to_label=relabel[roots],
        label_count=len(order),
        kept_pairs=frozenset(kept),
        threshold=float(threshold),
        tol_px=table.tol_px,
    )


def contours(assign: AssignmentImage, labeling: MergeLabeling) -> np.ndarray:
    """Boundary pixels between different merged labels, as (x, y) rows.

    Applies the same one-pixel label-change rule as the rasterizer to
    the site labels mapped through the merge, so walls between cells of
    one object disappear and every contour pixel is also a cell-boundary
    pixel of the unmerged assignment.
    """
    if len(labeling.site_to_label) < int(assign.labels.max()) + 1:
        raise ValueError("labeling does not cover every site in the raster")
    mapped = labeling.site_to_label[assign.labels]
    edge_pixels, _ = _extract_boundaries(mapped)
    return edge_pixels


def save_labeling(labeling: MergeLabeling, path) -> None:
    """Write `site_index label` lines under a self-describing header."""
    lines = [
        f"# merge-labeling v1 threshold={labeling.threshold!r} "
        f"tol_px={labeling.tol_px!r}"
    ]
    lines += [f"{k} {int(lab)}"
              for k, lab in enumerate(labeling.site_to_label)]
    Path(path).write_text("".join(line + "\n" for line in lines))


def load_labeling(path) -> MergeLabeling:
    """Read a labeling written by save_labeling."""
    lines = Path(path).read_text().splitlines()
    if not lines or not lines[0].startswith("# merge-labeling v1"):
        raise ValueError(f"{path}: not a merge-labeling v1 file")
    header = dict(tok.split("=", 1) for tok in lines[0].split()[3:])
    entries = {}
    for line in lines[1:]:
        if not line.strip():
            continue
        site, label = line.split()
        entries[int(site)] = int(label)
    if sorted(entries) != list(range(len(entries))):
        raise ValueError(f"{path}: site indices must cover 0..{len(entries) - 1}")
    site_to_label = np.array([entries[k] for k in sorted(entries)],
                             dtype=np.int32)
    count = int(site_to_label.max()) + 1 if len(site_to_label) else 0
    return MergeLabeling(
        site_to_label=site_to_label,
        label_count=count,
        kept_pairs=None,
        threshold=float(header["threshold"]),
        tol_px=float(header["tol_px"]),
    )
