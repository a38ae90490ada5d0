"""Serializing site grids: a JSON parameter file and a packed binary tensor.

The JSON form is the human-readable interchange format: one record per
site carrying the interior point, edge angles, edge offsets, disk radius
and an integer object label, plus enough grid metadata to rebuild the
``SiteGrid`` exactly (floats are written with full round-trip precision,
so ``load_params(save_params(g))`` is bit-identical).

The binary form is the training-data tensor consumed by downstream
models: a fixed 24-byte header (8-byte magic plus four little-endian
uint32 words: version, m, n, d) followed by m*n*d little-endian IEEE 754
float32 values, site-major (row index outer, column index middle,
channel inner) with channel order p.x, p.y, angles, offsets, radius,
label, so d = 2*n_e + 4.  Importing widens the float32 payload back to
float64; exporting an imported tensor reproduces the original bytes
exactly, but exporting a freshly fitted grid rounds each parameter to
float32 first.
"""

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .diagram import DEFAULT_NEIGHBORHOOD_RADIUS, SiteGrid, param_width

FORMAT_VERSION = 1
TENSOR_MAGIC = b"CSVDTENS"
TENSOR_VERSION = 1
TENSOR_HEADER_BYTES = 24


def tensor_depth(n_e: int) -> int:
    """Channels per site: position pair, angles, offsets, radius, label."""
    return 2 * n_e + 4


@dataclass
class ParamFile:
    """A site grid plus one integer object label per site."""

    grid: SiteGrid
    labels: np.ndarray

    def __post_init__(self):
        self.labels = np.ascontiguousarray(self.labels, dtype=np.int32)
        if self.labels.shape != (self.grid.site_count,):
            raise ValueError(
                f"labels shape {self.labels.shape}, expected ({self.grid.site_count},)")
        if np.any(self.labels < 0):
            raise ValueError("labels must be non-negative")

    @classmethod
    def from_grid(cls, grid: SiteGrid, site_to_label=None) -> "ParamFile":
        """Wrap a grid; sites default to label 0 when no labeling is given."""
        if site_to_label is None:
            site_to_label = np.zeros(grid.site_count, dtype=np.int32)
        return cls(grid, np.asarray(site_to_label))


def save_params(param_file: ParamFile, path) -> None:
    grid = param_file.grid
    sites = []
    for k in range(grid.site_count):
        row = grid.params[k]
        sites.append({
            "px": float(row[0]),
            "py": float(row[1]),
            "angles": [float(v) for v in row[2:2 + grid.n_e]],
            "offsets": [float(v) for v in row[2 + grid.n_e:2 + 2 * grid.n_e]],
            "r": float(row[2 + 2 * grid.n_e]),
            "label": int(param_file.labels[k]),
        })
    doc = {
        "format_version": FORMAT_VERSION,
        "m": grid.m,
        "n": grid.n,
        "n_e": grid.n_e,
        "neighborhood_radius": grid.neighborhood_radius,
        "sites": sites,
    }
    Path(path).write_text(json.dumps(doc, indent=1) + "\n", encoding="ascii")


def _field(doc, name, kind):
    if name not in doc:
        raise ValueError(f"parameter file missing field {name!r}")
    value = doc[name]
    if kind is int and (not isinstance(value, int) or isinstance(value, bool)):
        raise ValueError(f"parameter file field {name!r} must be an integer")
    if kind is list and not isinstance(value, list):
        raise ValueError(f"parameter file field {name!r} must be a list")
    if kind is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ValueError(f"parameter file field {name!r} must be a number")
        return float(value)
    return value


def load_params(path) -> ParamFile:
    try:
        doc = json.loads(Path(path).read_text(encoding="ascii"))
    except json.JSONDecodeError as exc:
        raise ValueError(f"parameter file is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise ValueError("parameter file must hold a JSON object")
    version = _field(doc, "format_version", int)
    if version != FORMAT_VERSION:
        raise ValueError(
            f"format_version {version} unsupported (expected {FORMAT_VERSION})")
    m = _field(doc, "m", int)
    n = _field(doc, "n", int)
    n_e = _field(doc, "n_e", int)
    radius = _field(doc, "neighborhood_radius", int)
    sites = _field(doc, "sites", list)
    if len(sites) != m * n:
        raise ValueError(f"sites holds {len(sites)} records, expected m*n = {m * n}")
    params = np.empty((m * n, param_width(n_e)), dtype=np.float64)
    labels = np.empty(m * n, dtype=np.int32)
    for k, rec in enumerate(sites):
        if not isinstance(rec, dict):
            raise ValueError(f"sites[{k}] must be an object")
        angles = _field(rec, "angles", list)
        offsets = _field(rec, "offsets", list)
        if len(angles) != n_e:
            raise ValueError(f"sites[{k}].angles holds {len(angles)} values, expected "
                             f"n_e = {n_e}")
        if len(offsets) != n_e:
            raise ValueError(f"sites[{k}].offsets holds {len(offsets)} values, expected "
                             f"n_e = {n_e}")
        params[k, 0] = _field(rec, "px", float)
        params[k, 1] = _field(rec, "py", float)
        try:
            params[k, 2:2 + n_e] = angles
            params[k, 2 + n_e:2 + 2 * n_e] = offsets
        except (TypeError, ValueError) as exc:
            raise ValueError(f"sites[{k}] holds a non-numeric angle or offset") from exc
        params[k, 2 + 2 * n_e] = _field(rec, "r", float)
        labels[k] = _field(rec, "label", int)
    grid = SiteGrid(m, n, n_e, params, neighborhood_radius=radius)
    return ParamFile(grid, labels)


def export_tensor(param_file: ParamFile, path) -> None:
    grid = param_file.grid
    d = tensor_depth(grid.n_e)
    payload = np.empty((grid.site_count, d), dtype="<f4")
    payload[:, :d - 1] = grid.params
    payload[:, d - 1] = param_file.labels
    header = TENSOR_MAGIC + struct.pack("<IIII", TENSOR_VERSION, grid.m, grid.n, d)
    Path(path).write_bytes(header + payload.tobytes())


def import_tensor(path) -> ParamFile:
    blob = Path(path).read_bytes()
    if len(blob) < TENSOR_HEADER_BYTES:
        raise ValueError(f"tensor file truncated: {len(blob)} bytes is shorter than "
                         f"the {TENSOR_HEADER_BYTES}-byte header")
    if blob[:8] != TENSOR_MAGIC:
        raise ValueError(f"bad tensor magic {blob[:8]!r}")
    version, m, n, d = struct.unpack("<IIII", blob[8:TENSOR_HEADER_BYTES])
    if version != TENSOR_VERSION:
        raise ValueError(f"tensor version {version} unsupported "
                         f"(expected {TENSOR_VERSION})")
    if d < tensor_depth(1) or (d - 4) % 2:
        raise ValueError(f"tensor depth {d} does not decode as 2*n_e + 4")
    n_e = (d - 4) // 2
    want = TENSOR_HEADER_BYTES + 4 * m * n * d
    if len(blob) != want:
        raise ValueError(f"tensor payload is {len(blob)} bytes, expected {want} "
                         f"for a {m}x{n}x{d} grid")
    flat = np.frombuffer(blob, dtype="<f4", offset=TENSOR_HEADER_BYTES)
    payload = flat.reshape(m * n, d).astype(np.float64)
    labels = np.rint(payload[:, d - 1]).astype(np.int32)
    grid = SiteGrid(m, n, n_e, payload[:, :d - 1])
    return ParamFile(grid, labels)
