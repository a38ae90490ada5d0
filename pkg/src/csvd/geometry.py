"""Convex sites and the convex set distance.

A site is an interior point `p` together with a convex region around it:
the intersection of half-planes (one per edge, each at offset ``b`` from
`p` along its inward unit normal) and a disk of radius ``r`` centered at
`p`.  The distance from the site to a query point `q` is the ratio
``|pq| / |pq'|`` where `q'` is where the ray from `p` through `q` leaves
the region; it is 0 at `p`, 1 on the region boundary, and grows linearly
along rays.

Two evaluations are provided: ``csd_eval`` uses the closed algebraic form
(a maximum of one linear term per edge plus a scaled norm for the disk),
``csd_oracle`` computes the defining ray intersection directly.  They
agree to floating-point accuracy; the oracle exists so the algebraic form
can be tested against the definition.
"""

import math
from dataclasses import dataclass

# Branch tag for the disk term of the max (edge branches use their index).
CIRCLE_BRANCH = -1


@dataclass(frozen=True)
class Point2:
    """A point in unit-square coordinates."""

    x: float
    y: float

    def __post_init__(self):
        if not (math.isfinite(self.x) and math.isfinite(self.y)):
            raise ValueError(f"non-finite point ({self.x}, {self.y})")


@dataclass(frozen=True)
class HalfPlaneEdge:
    """One bounding line of a site, at offset ``b > 0`` from the interior point.

    The inward unit normal is ``(cos theta, sin theta)``; storing the angle
    keeps the normal unit-length by construction.
    """

    theta: float
    b: float

    def __post_init__(self):
        if not math.isfinite(self.theta):
            raise ValueError("non-finite edge angle")
        if not (math.isfinite(self.b) and self.b > 0):
            raise ValueError(f"edge offset must be positive, got {self.b}")

    def normal(self) -> tuple[float, float]:
        return (math.cos(self.theta), math.sin(self.theta))


@dataclass(frozen=True)
class ConvexSite:
    """Interior point, bounding half-planes, and bounding-disk radius."""

    p: Point2
    edges: tuple[HalfPlaneEdge, ...]
    r: float

    def __post_init__(self):
        if len(self.edges) < 1:
            raise ValueError("site needs at least one edge")
        if not (math.isfinite(self.r) and self.r > 0):
            raise ValueError(f"site radius must be positive, got {self.r}")
        object.__setattr__(self, "edges", tuple(self.edges))


@dataclass(frozen=True)
class DistanceEval:
    """Distance value plus the branch of the max that produced it.

    ``active_branch`` is an edge index, or ``CIRCLE_BRANCH`` for the disk
    term.  Ties go to the lowest edge index; the disk term wins only when
    strictly larger than every edge term.
    """

    value: float
    active_branch: int


def csd_eval(site: ConvexSite, q: Point2) -> DistanceEval:
    """Evaluate the convex set distance in its algebraic form.

    The value is ``max(max_i n_i . (p - q) / b_i, |p - q| / r)``; it is 0
    exactly at ``q == p`` and 1 on the site's region boundary.
    """
    vx = site.p.x - q.x
    vy = site.p.y - q.y

    best = -math.inf
    best_idx = 0
    for i, e in enumerate(site.edges):
        term = (math.cos(e.theta) * vx + math.sin(e.theta) * vy) / e.b
        if term > best:
            best = term
            best_idx = i
    circle = math.hypot(vx, vy) / site.r
    if circle > best:
        return DistanceEval(circle, CIRCLE_BRANCH)
    return DistanceEval(best, best_idx)


def csd_oracle(site: ConvexSite, q: Point2) -> float:
    """Evaluate the convex set distance from its definition.

    Shoots the ray from `p` through `q`, finds where it exits the region
    (the nearest of the half-plane lines hit in the forward direction and
    the disk boundary), and returns the ratio of the two distances.
    Returns 0 at the singular point ``q == p``.
    """
    vx = q.x - site.p.x
    vy = q.y - site.p.y
    dist = math.hypot(vx, vy)
    if dist == 0.0:
        return 0.0
    ux = vx / dist
    uy = vy / dist

    exit_t = site.r
    for e in site.edges:
        ndotu = math.cos(e.theta) * ux + math.sin(e.theta) * uy
        if ndotu < 0.0:
            t = e.b / -ndotu
            if t < exit_t:
                exit_t = t
    return dist / exit_t


@dataclass(frozen=True)
class SiteGradient:
    """Partial derivatives of a distance value w.r.t. one site's parameters."""

    dp: tuple[float, float]
    dtheta: tuple[float, ...]
    db: tuple[float, ...]
    dr: float


def csd_grad(site: ConvexSite, q: Point2) -> SiteGradient:
    """Subgradient of ``csd_eval`` w.r.t. the site parameters.

    Routed through the active branch only, max-pool style: the winning
    edge gets its offset/angle/position derivatives, or the disk branch
    gets the radius/position derivatives; every other parameter is zero.
    At ``q == p`` the norm has no gradient and the whole vector is zero
    by convention.
    """
    n_e = len(site.edges)
    zero = SiteGradient((0.0, 0.0), (0.0,) * n_e, (0.0,) * n_e, 0.0)
    if q.x == site.p.x and q.y == site.p.y:
        return zero

    ev = csd_eval(site, q)
    vx = site.p.x - q.x
    vy = site.p.y - q.y

    if ev.active_branch == CIRCLE_BRANCH:
        norm = math.hypot(vx, vy)
        dr = -norm / site.r**2
        dp = (vx / (site.r * norm), vy / (site.r * norm))
        return SiteGradient(dp, (0.0,) * n_e, (0.0,) * n_e, dr)

    i = ev.active_branch
    e = site.edges[i]
    c, s = math.cos(e.theta), math.sin(e.theta)
    dtheta = [0.0] * n_e
    db = [0.0] * n_e
    dtheta[i] = (-s * vx + c * vy) / e.b
    db[i] = -(c * vx + s * vy) / e.b**2
    return SiteGradient((c / e.b, s / e.b), tuple(dtheta), tuple(db), 0.0)


def regular_site(p: Point2, n_e: int, vertex_radius: float, r: float,
                 rotation: float = 0.0) -> ConvexSite:
    """Site whose half-planes form a regular polygon.

    The polygon has ``n_e`` edges and its vertices lie on the circle of
    radius ``vertex_radius`` about `p`, so every offset equals the apothem
    ``vertex_radius * cos(pi / n_e)``.  The first normal points at angle
    ``rotation``.
    """
    if n_e < 3:
        raise ValueError(f"regular polygon needs >= 3 edges, got {n_e}")
    apothem = vertex_radius * math.cos(math.pi / n_e)
    edges = tuple(
        HalfPlaneEdge(rotation + 2.0 * math.pi * i / n_e, apothem)
        for i in range(n_e)
    )
    return ConvexSite(p, edges, r)
