"""Exact 2-D geometry on pixel grids.

Masks are boolean ndarrays of shape (height, width); pixel ``(c, r)`` covers
``[c, c+1) x [r, r+1)`` and its centre is ``(c + 0.5, r + 0.5)``. Points
are (x, y) with y pointing down. Polygon orientation is "counter-clockwise"
in the raw coordinates, i.e. positive shoelace area; for a facade quad this
is the order TL, TR, BR, BL.

Hull and rasterisation predicates run on integers: coordinates are snapped
to a 1/16-pixel grid so every cross product is exact.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Sequence, Tuple

import numpy as np
from scipy import ndimage

SNAP = 16
Point = Tuple[float, float]


class InvalidQuadError(ValueError):
    """Corner set that does not form a convex TL-TR-BR-BL quadrilateral."""


def _snap(points) -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    return np.round(pts * SNAP).astype(np.int64)


def _cross(o, a, b) -> int:
    return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])


@dataclass
class Polygon:
    """Convex polygon with positively oriented vertices.

    ``degenerate`` marks hulls of a single point or of collinear points, in
    which case ``vertices`` holds one point or the two segment end points.
    """

    vertices: np.ndarray
    degenerate: bool = False
    _grid: np.ndarray = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 2)
        if self._grid is None:
            self._grid = _snap(self.vertices)

    def __len__(self):
        return len(self.vertices)

    @property
    def area(self) -> float:
        v = self.vertices
        if len(v) < 3:
            return 0.0
        x, y = v[:, 0], v[:, 1]
        return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y))


def convex_hull(points) -> Polygon:
    """Monotone-chain convex hull; collinear boundary points are dropped."""
    grid = _snap(points)
    if len(grid) == 0:
        raise ValueError("convex hull of an empty point set")
    uniq = sorted(set(map(tuple, grid.tolist())))
    if len(uniq) == 1:
        return _from_grid(uniq, degenerate=True)

    lower: list = []
    for p in uniq:
        while len(lower) >= 2 and _cross(lower[-2], lower[-1], p) <= 0:
            lower.pop()
        lower.append(p)
    upper: list = []
    for p in reversed(uniq):
        while len(upper) >= 2 and _cross(upper[-2], upper[-1], p) <= 0:
            upper.pop()
        upper.append(p)
    hull = lower[:-1] + upper[:-1]
    if len(hull) < 3:
        return _from_grid([uniq[0], uniq[-1]], degenerate=True)
    return _from_grid(hull)


def _from_grid(grid_pts, degenerate: bool = False) -> Polygon:
    g = np.asarray(grid_pts, dtype=np.int64).reshape(-1, 2)
    return Polygon(g / SNAP, degenerate, g)


def mask_points(mask: np.ndarray) -> np.ndarray:
    """Centres of the left- and right-most set pixels of every row.

    The convex hull of these points equals the hull of all set pixel centres.
    """
    mask = np.asarray(mask, dtype=bool)
    rows = np.flatnonzero(mask.any(axis=1))
    if rows.size == 0:
        return np.zeros((0, 2))
    sub = mask[rows]
    left = sub.argmax(axis=1)
    right = mask.shape[1] - 1 - sub[:, ::-1].argmax(axis=1)
    xs = np.concatenate([left, right]) + 0.5
    ys = np.concatenate([rows, rows]) + 0.5
    return np.stack([xs, ys], axis=1)


def mask_hull(mask: np.ndarray) -> Polygon:
    return convex_hull(mask_points(mask))


def _grid_orientation(g: np.ndarray) -> int:
    """+1 / -1 for convex positively / negatively oriented, 0 otherwise."""
    n = len(g)
    signs = set()
    for i in range(n):
        c = _cross(g[i], g[(i + 1) % n], g[(i + 2) % n])
        if c:
            signs.add(1 if c > 0 else -1)
    if len(signs) != 1:
        return 0
    # a convex polygon turns through exactly one revolution
    edges = np.roll(g, -1, axis=0) - g
    angles = np.arctan2(edges[:, 1], edges[:, 0])
    turn = np.diff(np.concatenate([angles, angles[:1]]))
    turn = (turn + np.pi) % (2 * np.pi) - np.pi
    if abs(abs(turn.sum()) - 2 * np.pi) > 1e-6:
        return 0
    return signs.pop()


def is_convex(vertices) -> bool:
    g = _snap(vertices)
    return len(g) >= 3 and _grid_orientation(g) != 0


def rasterize_convex_polygon(poly, width: int, height: int) -> np.ndarray:
    """Pixels whose centre lies inside or on the boundary of a convex polygon.

    ``poly`` is a :class:`Polygon` or a vertex array in either orientation.
    """
    if isinstance(poly, Polygon):
        g = poly._grid
    else:
        g = _snap(poly)
    out = np.zeros((height, width), dtype=bool)
    if len(g) == 0:
        return out
    # drop repeated consecutive vertices
    keep = np.any(g != np.roll(g, 1, axis=0), axis=1)
    g = g[keep] if keep.any() else g[:1]

    x0 = max(int(np.floor(g[:, 0].min() / SNAP)) - 1, 0)
    x1 = min(int(np.ceil(g[:, 0].max() / SNAP)) + 1, width)
    y0 = max(int(np.floor(g[:, 1].min() / SNAP)) - 1, 0)
    y1 = min(int(np.ceil(g[:, 1].max() / SNAP)) + 1, height)
    if x0 >= x1 or y0 >= y1:
        return out
    cx = (np.arange(x0, x1, dtype=np.int64) * SNAP + SNAP // 2)[None, :]
    cy = (np.arange(y0, y1, dtype=np.int64) * SNAP + SNAP // 2)[:, None]

    if len(g) >= 3:
        area2 = int(np.sum(g[:, 0] * np.roll(g[:, 1], -1) - np.roll(g[:, 0], -1) * g[:, 1]))
        if area2 != 0:
            orient = _grid_orientation(g)
            if orient == 0:
                raise ValueError("rasterize_convex_polygon: polygon is not convex")
            if orient < 0:
                g = g[::-1]
            inside = np.ones((y1 - y0, x1 - x0), dtype=bool)
            for i in range(len(g)):
                ax, ay = g[i]
                bx, by = g[(i + 1) % len(g)]
                inside &= (bx - ax) * (cy - ay) - (by - ay) * (cx - ax) >= 0
            out[y0:y1, x0:x1] = inside
            return out
        # zero area: all vertices collinear, treat as the spanning segment
        order = np.lexsort((g[:, 1], g[:, 0]))
        g = g[[order[0], order[-1]]]

    a, b = g[0], g[-1]
    dx, dy = b[0] - a[0], b[1] - a[1]
    if dx == 0 and dy == 0:
        out[y0:y1, x0:x1] = (cx == a[0]) & (cy == a[1])
        return out
    on_line = dx * (cy - a[1]) - dy * (cx - a[0]) == 0
    t = (cx - a[0]) * dx + (cy - a[1]) * dy
    out[y0:y1, x0:x1] = on_line & (t >= 0) & (t <= dx * dx + dy * dy)
    return out


def connected_components(mask: np.ndarray) -> List[np.ndarray]:
    """4-connected components, ordered by their first pixel in row-major order."""
    mask = np.asarray(mask, dtype=bool)
    labels, n = ndimage.label(mask, structure=[[0, 1, 0], [1, 1, 1], [0, 1, 0]])
    if n == 0:
        return []
    flat = labels.reshape(-1)
    nz = np.flatnonzero(flat)
    first = np.full(n + 1, flat.size)
    np.minimum.at(first, flat[nz], nz)
    order = np.argsort(first[1:]) + 1
    return [labels == lab for lab in order]


# ---------------------------------------------------------------- quads

@dataclass
class GeneralizedBBox:
    """Quadrilateral stored as its TL-BR and TR-BL rectangles."""

    box_tlbr: Tuple[float, float, float, float]
    box_trbl: Tuple[float, float, float, float]
    class_probs: np.ndarray
    label: int = -1

    def __post_init__(self):
        self.box_tlbr = tuple(float(v) for v in self.box_tlbr)
        self.box_trbl = tuple(float(v) for v in self.box_trbl)
        self.class_probs = np.asarray(self.class_probs, dtype=np.float64)
        for box in (self.box_tlbr, self.box_trbl):
            if box[0] > box[2] or box[1] > box[3]:
                raise ValueError(f"box {box} has min > max")
        if abs(self.class_probs.sum() - 1.0) > 1e-6:
            raise ValueError("class_probs must sum to 1")
        if self.label < 0:
            self.label = int(np.argmax(self.class_probs))

    @property
    def score(self) -> float:
        return float(np.max(self.class_probs))

    @property
    def corners(self):
        return corners_from_boxes(self)


def corners_from_boxes(g) -> Tuple[Point, Point, Point, Point]:
    """(p_TL, p_TR, p_BL, p_BR) from a :class:`GeneralizedBBox` or a box pair."""
    tlbr, trbl = (g.box_tlbr, g.box_trbl) if isinstance(g, GeneralizedBBox) else g
    return ((tlbr[0], tlbr[1]), (trbl[2], trbl[1]), (trbl[0], trbl[3]), (tlbr[2], tlbr[3]))


def boxes_from_corners(tl, tr, bl, br):
    """Inverse of :func:`corners_from_boxes`; raises on unordered corners."""
    box_tlbr = (tl[0], tl[1], br[0], br[1])
    box_trbl = (bl[0], tr[1], tr[0], bl[1])
    for box in (box_tlbr, box_trbl):
        if box[0] > box[2] or box[1] > box[3]:
            raise InvalidQuadError(
                f"corners TL={tl} TR={tr} BL={bl} BR={br} cannot be encoded as two boxes")
    if _self_intersecting(quad_polygon((tl, tr, bl, br))):
        raise InvalidQuadError(f"corners TL={tl} TR={tr} BL={bl} BR={br} form a crossed quad")
    return box_tlbr, box_trbl


def _self_intersecting(vertices) -> bool:
    """True when opposite edges of a 4-gon properly cross."""
    g = _snap(vertices)

    def crosses(a, b, c, d):
        d1, d2 = _cross(a, b, c), _cross(a, b, d)
        d3, d4 = _cross(c, d, a), _cross(c, d, b)
        return d1 * d2 < 0 and d3 * d4 < 0

    return crosses(g[0], g[1], g[2], g[3]) or crosses(g[1], g[2], g[3], g[0])


def quad_polygon(corners) -> np.ndarray:
    """Vertex array in TL, TR, BR, BL order from (TL, TR, BL, BR)."""
    tl, tr, bl, br = corners
    return np.array([tl, tr, br, bl], dtype=np.float64)


def is_valid_quad(corners) -> bool:
    """True when TL, TR, BR, BL is a simple convex quad of positive area."""
    g = _snap(quad_polygon(corners))
    for i in range(4):
        if _cross(g[i], g[(i + 1) % 4], g[(i + 2) % 4]) <= 0:
            return False
    return _grid_orientation(g) > 0


def gbbox_corners_from_mask(mask: np.ndarray) -> Tuple[Point, Point, Point, Point]:
    """Extreme-point corners of an instance mask.

    TL = argmin(x+y), BR = argmax(x+y), TR = argmax(x-y), BL = argmin(x-y)
    over set pixels. Ties along an edge are averaged, and each corner takes
    the matching outer corner of the chosen pixel.
    """
    rows, cols = np.nonzero(np.asarray(mask, dtype=bool))
    if rows.size == 0:
        raise ValueError("cannot extract corners from an empty mask")
    s, d = cols + rows, cols - rows

    def pick(key, extreme, dx, dy):
        sel = key == extreme(key)
        return float(cols[sel].mean() + dx), float(rows[sel].mean() + dy)

    return (pick(s, np.min, 0, 0), pick(d, np.max, 1, 0),
            pick(d, np.min, 0, 1), pick(s, np.max, 1, 1))


def quad_iou(a, b, resolution: float = 4.0) -> float:
    """Raster IoU of two convex quads given as (TL, TR, BL, BR).

    Coordinates are scaled by ``resolution`` and both quads are rasterised
    on the grid covering their union; an empty union gives 0.
    """
    pa = quad_polygon(a) * resolution
    pb = quad_polygon(b) * resolution
    both = np.vstack([pa, pb])
    lo = np.floor(both.min(axis=0)).astype(int)
    hi = np.ceil(both.max(axis=0)).astype(int) + 1
    w, h = hi - lo
    ma = rasterize_convex_polygon(pa - lo, int(w), int(h))
    mb = rasterize_convex_polygon(pb - lo, int(w), int(h))
    union = np.count_nonzero(ma | mb)
    if union == 0:
        return 0.0
    return np.count_nonzero(ma & mb) / union


def box_iou(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise continuous IoU of axis-aligned boxes [A,4] x [B,4]."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    ix = np.clip(np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0]), 0, None)
    iy = np.clip(np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1]), 0, None)
    inter = ix * iy
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)


def quad_envelope(corners) -> Tuple[float, float, float, float]:
    pts = np.asarray(corners, dtype=np.float64)
    return (pts[:, 0].min(), pts[:, 1].min(), pts[:, 0].max(), pts[:, 1].max())
