"""Convex-set-distance Voronoi diagrams for structure encoding.

Builds Voronoi-like diagrams whose sites are convex regions (half-plane
intersections capped by a disk), fits the site parameters so cell borders
land on detected image contours, and merges cells into labeled objects.
"""

__version__ = "0.1.0"
