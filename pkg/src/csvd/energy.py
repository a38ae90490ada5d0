"""Fitting energies and their analytic gradients.

The target term asks that every detected edge pixel lie on a diagram
edge: at such a point the two smallest site distances both equal 1
(each site's region boundary passes through it), so we penalize the mean
squared deviation of both pooled distances from 1.  Anchoring the pair
to the boundary value, rather than only to each other, is what stops the
optimizer from growing or shrinking sites without bound.

Two hinge regularizers keep the diagram non-degenerate: one punishes any
edge offset or radius falling under a minimum scale, the other punishes
a site center entering the core of a neighboring site.  Each is a ReLU
of (threshold - global minimum), so its gradient flows to exactly one
parameter per evaluation.

Gradients follow pooling backprop: every min/max selection made during
the forward pass is frozen and the derivative is routed through the
selected site, edge, or parameter only.  All selections break ties
toward the lowest index, matching the evaluators in ``diagram``.
"""

from dataclasses import dataclass

import numpy as np

from .diagram import (
    SiteArrays,
    SiteGrid,
    candidate_distances,
    candidate_table,
    min2_local_batch,
)


@dataclass(frozen=True)
class EnergyConfig:
    """Weights and thresholds of the total energy.

    ``epsilon`` (minimum parameter scale) defaults to a tenth of the grid
    spacing when left as None, so it sits well under the initial offsets
    and radii.  ``delta`` is a separation threshold in distance units
    where 1 means "on the neighbor's region boundary".  ``sum_hinges``
    switches both regularizers from the single global hinge to a per-site
    sum of hinges.
    """

    lambda1: float = 1.0
    lambda2: float = 1.0
    epsilon: float = None
    delta: float = 0.25
    sum_hinges: bool = False

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("regularizer weights must be nonnegative")
        if self.epsilon is not None and not self.epsilon > 0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")
        if not self.delta > 0:
            raise ValueError(f"delta must be positive, got {self.delta}")

    def resolve_epsilon(self, grid: SiteGrid) -> float:
        if self.epsilon is not None:
            return self.epsilon
        return 0.1 * grid.min_cell_extent


class EdgePixelSet:
    """Detected edge pixels mapped into the unit square.

    ``coords`` is an (N, 2) float array of distinct points inside the
    rectangle the image occupies after dividing pixel coordinates by
    max(width, height).
    """

    def __init__(self, coords, source_resolution):
        coords = np.ascontiguousarray(coords, dtype=np.float64)
        if coords.ndim != 2 or coords.shape[1] != 2:
            raise ValueError(f"coords must be (N, 2), got {coords.shape}")
        if not np.all(np.isfinite(coords)):
            raise ValueError("non-finite edge pixel coordinate")
        w, h = source_resolution
        if w < 1 or h < 1:
            raise ValueError(f"bad source resolution {source_resolution}")
        s = float(max(w, h))
        if coords.size and (coords.min() < 0 or coords[:, 0].max() > w / s
                            or coords[:, 1].max() > h / s):
            raise ValueError("edge pixel outside the mapped image rectangle")
        if len(np.unique(coords, axis=0)) != len(coords):
            raise ValueError("duplicate edge pixels")
        self.coords = coords
        self.source_resolution = (int(w), int(h))

    @classmethod
    def from_pixels(cls, pixels, width: int, height: int) -> "EdgePixelSet":
        """Build from integer (x, y) pixel rows, taking pixel centers."""
        pixels = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
        s = float(max(width, height))
        return cls((pixels + 0.5) / s, (width, height))

    @property
    def xs(self) -> np.ndarray:
        return self.coords[:, 0]

    @property
    def ys(self) -> np.ndarray:
        return self.coords[:, 1]

    def __len__(self) -> int:
        return len(self.coords)


def _branch_terms(tr: SiteArrays, k, qx, qy):
    """Active branch and geometry intermediates for the given sites.

    Returns (distance, branch, vx, vy, norm) where branch is the winning
    edge index or n_e for the disk term, with the same tie rules as the
    scalar evaluator: first edge among equals, disk only when strictly
    greater.
    """
    vx = tr.px[k] - qx
    vy = tr.py[k] - qy
    edge_terms = (tr.cth[:, k] * vx + tr.sth[:, k] * vy) / tr.b[:, k]
    e_best = edge_terms.max(axis=0)
    e_idx = edge_terms.argmax(axis=0)
    norm = np.sqrt(vx * vx + vy * vy)
    circ = norm / tr.r[k]
    branch = np.where(circ > e_best, tr.n_e, e_idx)
    return np.maximum(e_best, circ), branch, vx, vy, norm


def _scatter_branch_grad(grad, tr, k, qx, qy, weight):
    """Add weight * (d at the active branch of site k)' into grad rows.

    Pixels sitting exactly on their site's center have no gradient (the
    norm is not differentiable there) and are skipped.
    """
    n_e = tr.n_e
    _, branch, vx, vy, norm = _branch_terms(tr, k, qx, qy)
    live = norm > 0.0

    circ = live & (branch == n_e)
    if np.any(circ):
        kc, w = k[circ], weight[circ]
        r, nm = tr.r[kc], norm[circ]
        np.add.at(grad[:, 2 + 2 * n_e], kc, w * (-nm / (r * r)))
        np.add.at(grad[:, 0], kc, w * vx[circ] / (r * nm))
        np.add.at(grad[:, 1], kc, w * vy[circ] / (r * nm))

    edge = live & (branch < n_e)
    if np.any(edge):
        ke, w, e = k[edge], weight[edge], branch[edge]
        c, s, b = tr.cth[e, ke], tr.sth[e, ke], tr.b[e, ke]
        ex, ey = vx[edge], vy[edge]
        np.add.at(grad, (ke, 2 + e), w * (-s * ex + c * ey) / b)
        np.add.at(grad, (ke, 2 + n_e + e), w * (-(c * ex + s * ey) / (b * b)))
        np.add.at(grad[:, 0], ke, w * c / b)
        np.add.at(grad[:, 1], ke, w * s / b)


def _pooled_pair(grid, omega, tr):
    if len(omega) == 0:
        raise ValueError("no edge pixels to fit")
    d1, k1, d2, k2 = min2_local_batch(grid, omega.xs, omega.ys, trig=tr)
    if np.any(k2 < 0):
        raise ValueError("a query saw fewer than two candidate sites")
    return d1, k1, d2, k2


def e_target(grid: SiteGrid, omega: EdgePixelSet, trig: SiteArrays = None):
    """Mean over edge pixels of (d1 - 1)^2 + (d2 - 1)^2, with gradient.

    Both pooled distances are anchored to the boundary value 1; the
    gradient flows through each pixel's two winning sites.
    """
    tr = trig if trig is not None else SiteArrays(grid)
    d1, k1, d2, k2 = _pooled_pair(grid, omega, tr)
    n = float(len(omega))
    value = float(np.mean((d1 - 1.0) ** 2 + (d2 - 1.0) ** 2))
    grad = np.zeros_like(grid.params)
    _scatter_branch_grad(grad, tr, k1, omega.xs, omega.ys, 2.0 * (d1 - 1.0) / n)
    _scatter_branch_grad(grad, tr, k2, omega.xs, omega.ys, 2.0 * (d2 - 1.0) / n)
    return value, grad


def e_target_unanchored(grid: SiteGrid, omega: EdgePixelSet,
                        trig: SiteArrays = None):
    """Mean of (d1 - d2)^2: edge pixels equidistant, but scale-free.

    Kept as the degeneration demo: without the anchor to 1 the optimizer
    can satisfy it by collapsing or inflating sites, which the scale
    hinge then has to catch.
    """
    tr = trig if trig is not None else SiteArrays(grid)
    d1, k1, d2, k2 = _pooled_pair(grid, omega, tr)
    n = float(len(omega))
    gap = d1 - d2
    value = float(np.mean(gap * gap))
    grad = np.zeros_like(grid.params)
    _scatter_branch_grad(grad, tr, k1, omega.xs, omega.ys, 2.0 * gap / n)
    _scatter_branch_grad(grad, tr, k2, omega.xs, omega.ys, -2.0 * gap / n)
    return value, grad


def _scale_candidates(grid):
    """Offsets then radii, flattened; the hinge scans this in index order."""
    return np.concatenate([grid.offsets.ravel(), grid.radii])


def _scale_grad_entry(grid, flat_idx):
    nb = grid.offsets.size
    if flat_idx < nb:
        site, e = divmod(flat_idx, grid.n_e)
        return site, 2 + grid.n_e + e
    return flat_idx - nb, 2 + 2 * grid.n_e


def e_reg_scale(grid: SiteGrid, epsilon: float):
    """Hinge on the smallest scale parameter: max(0, epsilon - min(b, r)).

    When active, the gradient is -1 at the single smallest offset or
    radius (offsets win index ties against radii).
    """
    cands = _scale_candidates(grid)
    idx = int(np.argmin(cands))
    value = max(0.0, epsilon - float(cands[idx]))
    grad = np.zeros_like(grid.params)
    if value > 0.0:
        site, col = _scale_grad_entry(grid, idx)
        grad[site, col] = -1.0
    return value, grad


def _separation_matrix(grid: SiteGrid, tr: SiteArrays):
    """Distance from each site's center to every nearby foreign site.

    Row i holds csd values of site j at query p_i for each candidate j in
    the window around p_i's containing cell, with j == i masked out.
    """
    qx = np.ascontiguousarray(grid.positions[:, 0])
    qy = np.ascontiguousarray(grid.positions[:, 1])
    table = candidate_table(grid.m, grid.n, grid.neighborhood_radius)
    ci = np.clip((qx * grid.m).astype(np.int64), 0, grid.m - 1)
    cj = np.clip((qy * grid.n).astype(np.int64), 0, grid.n - 1)
    cand = np.array(table[ci * grid.n + cj])
    cand[cand == np.arange(grid.site_count)[:, None]] = -1
    return candidate_distances(tr, qx, qy, cand), cand


def e_reg_sep(grid: SiteGrid, delta: float, trig: SiteArrays = None):
    """Hinge on the closest center-to-foreign-site pair.

    max(0, delta - min over sites i and nearby j != i of d(p_i | site j)).
    When active, the gradient flows through the minimizing pair: site j's
    parameters move to push its boundary away, and p_i moves out of it.
    """
    tr = trig if trig is not None else SiteArrays(grid)
    dists, cand = _separation_matrix(grid, tr)
    flat = int(np.argmin(dists))
    i, slot = divmod(flat, dists.shape[1])
    dmin = float(dists[i, slot])
    value = max(0.0, delta - dmin)
    grad = np.zeros_like(grid.params)
    if value > 0.0:
        j = int(cand[i, slot])
        _scatter_pair_grad(grad, tr, i, j, -1.0)
    return value, grad


def _scatter_pair_grad(grad, tr, i, j, weight):
    """Route weight * d(p_i | site j)' to site j's row and p_i's position."""
    tmp = np.zeros_like(grad)
    _scatter_branch_grad(tmp, tr, np.array([j]), tr.px[i:i + 1],
                         tr.py[i:i + 1], np.array([weight]))
    # The derivative w.r.t. the query point is minus the one w.r.t. the
    # site position, and the query here is another site's center.
    tmp[i, 0] -= tmp[j, 0]
    tmp[i, 1] -= tmp[j, 1]
    grad += tmp


def e_total(grid: SiteGrid, omega: EdgePixelSet, config: EnergyConfig = None):
    """Target energy plus weighted hinges, with the full gradient."""
    bd, grad = energy_breakdown(grid, omega, config)
    return bd.total, grad


@dataclass(frozen=True)
class EnergyBreakdown:
    """Component values of one total-energy evaluation."""

    total: float
    target: float
    scale: float
    separation: float


def energy_breakdown(grid: SiteGrid, omega: EdgePixelSet,
                     config: EnergyConfig = None, anchored: bool = True):
    """Evaluate all energy terms and the combined gradient in one pass."""
    cfg = config if config is not None else EnergyConfig()
    tr = SiteArrays(grid)
    target_fn = e_target if anchored else e_target_unanchored
    et, gt = target_fn(grid, omega, trig=tr)
    if cfg.sum_hinges:
        es, gs = _e_reg_scale_summed(grid, cfg.resolve_epsilon(grid))
        ep, gp = _e_reg_sep_summed(grid, cfg.delta, tr)
    else:
        es, gs = e_reg_scale(grid, cfg.resolve_epsilon(grid))
        ep, gp = e_reg_sep(grid, cfg.delta, trig=tr)
    total = et + cfg.lambda1 * es + cfg.lambda2 * ep
    grad = gt
    grad += cfg.lambda1 * gs
    grad += cfg.lambda2 * gp
    return EnergyBreakdown(total, et, es, ep), grad


def _e_reg_scale_summed(grid, epsilon):
    """Per-site variant: sum of hinges on each site's smallest scale."""
    per_site = np.minimum(grid.offsets.min(axis=1), grid.radii)
    active = per_site < epsilon
    value = float(np.sum(epsilon - per_site[active]))
    grad = np.zeros_like(grid.params)
    for site in np.nonzero(active)[0]:
        row_cands = np.append(grid.offsets[site], grid.radii[site])
        idx = int(np.argmin(row_cands))
        col = 2 + grid.n_e + idx if idx < grid.n_e else 2 + 2 * grid.n_e
        grad[site, col] = -1.0
    return value, grad


def _e_reg_sep_summed(grid, delta, tr):
    """Per-site variant: sum of hinges on each site's nearest foreign site."""
    dists, cand = _separation_matrix(grid, tr)
    slots = np.argmin(dists, axis=1)
    dmin = dists[np.arange(len(slots)), slots]
    active = dmin < delta
    value = float(np.sum(delta - dmin[active]))
    grad = np.zeros_like(grid.params)
    for i in np.nonzero(active)[0]:
        _scatter_pair_grad(grad, tr, int(i), int(cand[i, slots[i]]), -1.0)
    return value, grad


def selection_state(grid: SiteGrid, omega: EdgePixelSet,
                    config: EnergyConfig = None, anchored: bool = True):
    """Hashable record of every pooling decision in one energy evaluation.

    Finite-difference checks compare this at perturbed parameters: if any
    winner, branch, or hinge activity changes within the probe interval,
    the configuration sits on a selection boundary and the check must
    resample rather than difference across a kink.
    """
    cfg = config if config is not None else EnergyConfig()
    tr = SiteArrays(grid)
    if omega is None or len(omega) == 0:
        k1 = k2 = br1 = br2 = np.empty(0, dtype=np.int64)
    else:
        d1, k1, d2, k2 = _pooled_pair(grid, omega, tr)
        _, br1, _, _, _ = _branch_terms(tr, k1, omega.xs, omega.ys)
        _, br2, _, _, _ = _branch_terms(tr, k2, omega.xs, omega.ys)

    cands = _scale_candidates(grid)
    idx = int(np.argmin(cands))
    scale_active = cands[idx] < cfg.resolve_epsilon(grid)

    dists, cand = _separation_matrix(grid, tr)
    flat = int(np.argmin(dists))
    i, slot = divmod(flat, dists.shape[1])
    sep_active = dists[i, slot] < cfg.delta
    j = int(cand[i, slot])
    _, sep_br, _, _, _ = _branch_terms(
        tr, np.array([j]), tr.px[i:i + 1], tr.py[i:i + 1])

    return (
        tuple(k1.tolist()), tuple(br1.tolist()),
        tuple(k2.tolist()), tuple(br2.tolist()),
        (idx if scale_active else None),
        ((i, j, int(sep_br[0])) if sep_active else None),
    )
