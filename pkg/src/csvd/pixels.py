"""Image ingestion, fixed-filter edge detection, and synthetic structures.

Detection is deliberately fixed-function: a 3x3 gradient pair or a 5x5
Laplacian-of-Gaussian, a global threshold on the max-normalized response,
and an optional single non-maximum-suppression pass along the quantized
intensity-gradient direction.  Convolutions clamp at the image border so
the frame itself never responds as an edge.

The synthetic generator samples seed points (optionally warped so cells
shrink toward the bottom-right corner), assigns every pixel to its nearest
seed, and marks label changes with the same one-pixel boundary rule the
diagram rasterizer uses.  That makes the rendered images exact ground
truth for the fitting and labeling stages: the seed list, the label map,
and the edge raster are all mutually consistent.
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .diagram import _extract_boundaries, _resolve_threads
from .energy import EdgePixelSet

# Rec. 601 luma weights, scaled per mille so the numerator stays integral.
_REC601_NUM = np.array([299.0, 587.0, 114.0])

SOBEL_X = np.array([[-1.0, 0.0, 1.0],
                    [-2.0, 0.0, 2.0],
                    [-1.0, 0.0, 1.0]])
SOBEL_Y = SOBEL_X.T.copy()

LOG_5X5 = np.array([[0.0, 0.0, 1.0, 0.0, 0.0],
                    [0.0, 1.0, 2.0, 1.0, 0.0],
                    [1.0, 2.0, -16.0, 2.0, 1.0],
                    [0.0, 1.0, 2.0, 1.0, 0.0],
                    [0.0, 0.0, 1.0, 0.0, 0.0]])

MANIFEST_NAME = "manifest.txt"
MAX_BATCH = 2000

# Filter responses at or below this are treated as zero.  On a constant
# image the border-clamped kernel sums cancel only up to roundoff, and
# normalizing that residue would promote every pixel to a full-strength
# edge; genuine responses from 8-bit inputs are at least ~1/255.
_RESPONSE_FLOOR = 1e-9


@dataclass
class GrayImage:
    """Single-channel raster; ``values[y, x]`` is luminance in [0, 1]."""

    values: np.ndarray

    def __post_init__(self):
        vals = np.ascontiguousarray(self.values, dtype=np.float64)
        if vals.ndim != 2 or vals.size == 0:
            raise ValueError(
                f"image must be a nonempty 2-D array, got shape {np.shape(self.values)}")
        if not np.all(np.isfinite(vals)):
            raise ValueError("non-finite pixel value")
        if vals.min() < 0.0 or vals.max() > 1.0:
            raise ValueError("pixel values must lie in [0, 1]")
        self.values = vals

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def height(self) -> int:
        return self.values.shape[0]


def load_gray(path) -> GrayImage:
    """Read a PNG or PGM file as luminance in [0, 1].

    Color pixels are reduced with the Rec. 601 weights
    0.299 R + 0.587 G + 0.114 B applied to the 8-bit channels divided by
    255.  The weighted sum is formed over exact integers and rounded in a
    single division, so pure red maps to exactly 0.299 and white to
    exactly 1.0.  Missing or unreadable files raise the underlying
    OSError, which names the path.
    """
    with Image.open(path) as im:
        if im.mode == "L":
            return GrayImage(np.asarray(im, dtype=np.float64) / 255.0)
        rgb = np.asarray(im.convert("RGB"), dtype=np.float64)
    return GrayImage((rgb @ _REC601_NUM) / (1000.0 * 255.0))


def save_gray(img: GrayImage, path) -> None:
    """Write an 8-bit grayscale PNG or binary PGM, chosen by file suffix."""
    data = np.rint(img.values * 255.0).astype(np.uint8)
    Image.fromarray(data, mode="L").save(path)


def detect_edges(img: GrayImage, method: str = "sobel", threshold: float = 0.3,
                 thin: bool = False) -> EdgePixelSet:
    """Detect edge pixels with a fixed filter and a global threshold.

    ``method`` selects the response: "sobel" takes the gradient magnitude
    of the 3x3 pair, "log" the absolute 5x5 Laplacian-of-Gaussian.  The
    response is normalized to [0, 1] by its maximum and pixels at or above
    ``threshold`` are kept; a constant image (zero response everywhere)
    yields an empty set.  With ``thin``, one pass of non-maximum
    suppression along the intensity-gradient direction reduces ridges to
    single-pixel width; both methods take the direction from the 3x3
    gradient pair.  Pixel centers are mapped to the unit square by
    dividing by max(width, height).
    """
    if not 0.0 <= threshold <= 1.0:
        raise ValueError(f"threshold must lie in [0, 1], got {threshold}")
    resp = filter_response(img, method)
    peak = resp.max()
    if peak <= _RESPONSE_FLOOR:
        return EdgePixelSet(np.empty((0, 2)), (img.width, img.height))
    resp /= peak
    keep = resp >= threshold
    if thin:
        keep &= _suppress_nonmaxima(resp, *_gradients(img.values))
    ys, xs = np.nonzero(keep)
    return EdgePixelSet.from_pixels(np.column_stack([xs, ys]),
                                    img.width, img.height)


def filter_response(img: GrayImage, method: str = "sobel") -> np.ndarray:
    """Raw per-pixel filter response, before normalization.

    "sobel" gives the gradient magnitude of the 3x3 pair, "log" the
    absolute response of the 5x5 Laplacian-of-Gaussian.  Borders clamp.
    """
    if method not in ("sobel", "log"):
        raise ValueError(f"unknown method {method!r}, expected 'sobel' or 'log'")
    if method == "sobel":
        return np.hypot(*_gradients(img.values))
    return np.abs(ndimage.correlate(img.values, LOG_5X5, mode="nearest"))


def _gradients(vals):
    gx = ndimage.correlate(vals, SOBEL_X, mode="nearest")
    gy = ndimage.correlate(vals, SOBEL_Y, mode="nearest")
    return gx, gy


def _suppress_nonmaxima(resp, gx, gy):
    """Keep mask of one non-maximum-suppression pass over ``resp``.

    The gradient direction is quantized to four bins (horizontal, the two
    diagonals, vertical).  A pixel survives when its response strictly
    beats the next pixel along the direction and at least ties the
    previous one, so a two-pixel-wide plateau keeps exactly one side.
    Neighbors outside the image count as zero response.
    """
    h, w = resp.shape
    angle = np.mod(np.arctan2(gy, gx), np.pi)
    bins = np.floor((angle + np.pi / 8) / (np.pi / 4)).astype(np.int64) % 4
    padded = np.pad(resp, 1)
    fwd = np.empty_like(resp)
    bwd = np.empty_like(resp)
    for b, (dx, dy) in enumerate(((1, 0), (1, 1), (0, 1), (-1, 1))):
        sel = bins == b
        fwd[sel] = padded[1 + dy:1 + dy + h, 1 + dx:1 + dx + w][sel]
        bwd[sel] = padded[1 - dy:1 - dy + h, 1 - dx:1 - dx + w][sel]
    return (resp > fwd) & (resp >= bwd)


def dark_pixel_set(img: GrayImage, threshold: float = 0.5) -> EdgePixelSet:
    """Edge pixels of a black-on-white edge raster: values below threshold.

    This is the ingestion path for images that already are edge maps,
    such as the synthetic structures or a saved detection result, where
    re-running a gradient filter would only blur the answer.
    """
    ys, xs = np.nonzero(img.values < threshold)
    return EdgePixelSet.from_pixels(np.column_stack([xs, ys]),
                                    img.width, img.height)


@dataclass(frozen=True)
class SynthSpec:
    """Recipe for one synthetic cell-structure image.

    With ``density_gradient`` the seed coordinates are square-root warped,
    which piles seeds up near coordinate 1 so cell size shrinks from the
    top-left corner toward the bottom-right.
    """

    seed_count: int
    rng_seed: int
    size: int = 128
    density_gradient: bool = True

    def __post_init__(self):
        if self.seed_count < 2:
            raise ValueError(f"need at least 2 seeds, got {self.seed_count}")
        if self.size < 32:
            raise ValueError(f"size must be at least 32, got {self.size}")


def sample_seeds(spec: SynthSpec) -> np.ndarray:
    """Draw the (seed_count, 2) seed positions in the unit square."""
    rng = np.random.default_rng(spec.rng_seed)
    pts = rng.random((spec.seed_count, 2))
    if spec.density_gradient:
        # x = sqrt(u) has density 2x, increasing toward 1: more seeds at
        # large x and y, i.e. the bottom-right of the raster.
        pts = np.sqrt(pts)
    return pts


def nearest_seed_labels(seeds: np.ndarray, size: int) -> np.ndarray:
    """Nearest-seed index per pixel center; ties go to the lower index."""
    c = (np.arange(size) + 0.5) / size
    dx = c[None, :] - seeds[:, 0, None]
    dy = c[None, :] - seeds[:, 1, None]
    d2 = dy[:, :, None] ** 2 + dx[:, None, :] ** 2
    return np.argmin(d2, axis=0).astype(np.int32)


def synth_structure(spec: SynthSpec, seeds=None):
    """Render the Euclidean Voronoi edges of sampled seed points.

    Returns ``(image, seeds)``: a square raster with the region boundaries
    as black one-pixel lines on white, plus the ground-truth seed list.
    ``seeds`` may be passed explicitly (matching ``spec.seed_count``) to
    pin the geometry in tests.
    """
    if seeds is None:
        seeds = sample_seeds(spec)
    seeds = np.asarray(seeds, dtype=np.float64)
    if seeds.shape != (spec.seed_count, 2):
        raise ValueError(
            f"seeds must be ({spec.seed_count}, 2), got {seeds.shape}")
    if seeds.min() < 0.0 or seeds.max() > 1.0 or not np.all(np.isfinite(seeds)):
        raise ValueError("seeds must lie in the unit square")
    size = spec.size
    labels = nearest_seed_labels(seeds, size)
    edge_pixels, _ = _extract_boundaries(labels)
    white = np.ones((size, size), dtype=bool)
    white[edge_pixels[:, 1], edge_pixels[:, 0]] = False
    # The boundary rule marks one endpoint per label-changing pair, so a
    # pixel whose only differing neighbors sit to its north and west is
    # never marked itself -- yet all four of its neighbors can be.  That
    # strands a white sliver at a three-cell junction and breaks the
    # one-region-per-seed property.  Absorb every white fragment that is
    # not connected to its seed's own pixel into the boundary.
    comp, _ = ndimage.label(white)
    sx = np.clip((seeds[:, 0] * size).astype(int), 0, size - 1)
    sy = np.clip((seeds[:, 1] * size).astype(int), 0, size - 1)
    main = comp[sy, sx]
    for k in np.nonzero(main == 0)[0]:
        # Degenerate layout: the seed's pixel was itself marked.  Keep the
        # label's largest fragment so the region still exists.
        frags = comp[(labels == k) & white]
        if frags.size:
            ids, counts = np.unique(frags, return_counts=True)
            main[k] = ids[np.argmax(counts)]
    white &= np.isin(comp, main[main > 0])
    return GrayImage(np.where(white, 1.0, 0.0)), seeds


@dataclass(frozen=True)
class SynthRecord:
    """One generated image: its filename and ground-truth seeds."""

    filename: str
    seeds: np.ndarray


_MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15


def _splitmix64(x: int) -> int:
    z = x & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def child_seed(base: int, index: int) -> int:
    """Per-image seed: the index-th output of a splitmix64 stream at base."""
    return _splitmix64(base + (index + 1) * _GOLDEN)


def synth_batch(spec: SynthSpec, count: int, out_dir, threads=None):
    """Write ``count`` edge images plus a manifest; returns the records.

    Each image uses its own splitmix64 child of the template's rng_seed,
    so any single image can be regenerated independently and the output
    does not depend on how many worker threads rendered it.  The manifest
    is a text file with one `filename seed_count x1 y1 ...` line per
    image, written in index order.
    """
    if not 0 <= count <= MAX_BATCH:
        raise ValueError(f"count must be in [0, {MAX_BATCH}], got {count}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    def render(index: int) -> SynthRecord:
        child = replace(spec, rng_seed=child_seed(spec.rng_seed, index))
        img, seeds = synth_structure(child)
        name = f"cells_{index:04d}.png"
        save_gray(img, out / name)
        return SynthRecord(name, seeds)

    nthreads = _resolve_threads(threads)
    if nthreads == 1 or count <= 1:
        records = [render(i) for i in range(count)]
    else:
        with ThreadPoolExecutor(max_workers=nthreads) as pool:
            records = list(pool.map(render, range(count)))
    write_manifest(out / MANIFEST_NAME, records)
    return records


def write_manifest(path, records) -> None:
    """Write `filename seed_count x1 y1 x2 y2 ...` lines, full precision."""
    lines = []
    for rec in records:
        coords = " ".join(repr(float(v)) for pt in rec.seeds for v in pt)
        lines.append(f"{rec.filename} {len(rec.seeds)} {coords}".rstrip())
    Path(path).write_text("".join(line + "\n" for line in lines))


def read_manifest(path):
    """Parse a manifest back into records; coordinates round-trip exactly."""
    records = []
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        parts = line.split()
        name, k = parts[0], int(parts[1])
        vals = [float(tok) for tok in parts[2:]]
        if len(vals) != 2 * k:
            raise ValueError(
                f"manifest line for {name}: expected {2 * k} coordinates, "
                f"got {len(vals)}")
        records.append(SynthRecord(name, np.array(vals).reshape(k, 2)))
    return records
