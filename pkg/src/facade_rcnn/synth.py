"""Synthetic street-view facades with exact masks and corner annotations.

A facade is a grid of windows over a row of doors and shops laid out on a
flat plane with coordinates (X, Y). The plane is mapped into the image by

    x = x0 + g(X)
    y = y0 + tan(phi) * g(X) + s(X) * Y

with ``s(X) = decay ** (X / W_f)`` the depth-wise scale and ``g`` its
integral. ``phi`` shears along the height direction. Element corners are
mapped exactly and rasterised with the same convex-polygon rasteriser used
everywhere else, so masks and corners agree by construction. Scenes hold
one facade or two mirrored ones (left and right side of a street).
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .geometry import quad_polygon, rasterize_convex_polygon

logger = logging.getLogger(__name__)

IGNORE_INDEX = 255
CLASS_NAMES = ("background", "facade", "window", "door", "shop")
BINARY_CLASS_NAMES = ("other", "window")
CONVEX_CLASS_NAMES = ("window", "shop", "door")

# class index per drawn role for each palette
_PALETTES = {
    "full": {"background": 0, "facade": 1, "window": 2, "door": 3, "shop": 4},
    "binary": {"background": 0, "facade": 0, "window": 1, "door": 0, "shop": 0},
}


def class_names_for(palette: str) -> Tuple[str, ...]:
    return CLASS_NAMES if palette == "full" else BINARY_CLASS_NAMES


@dataclass
class LabeledSample:
    """Image [3, H, W] in [0, 1], semantic labels [H, W] (uint8, 255 = ignore),
    per-class instance masks and per-instance corners (TL, TR, BL, BR)."""

    image: np.ndarray
    semantic: np.ndarray
    instances: Dict[int, List[np.ndarray]] = field(default_factory=dict)
    corners: Dict[int, List[tuple]] = field(default_factory=dict)
    sample_id: str = ""

    @property
    def height(self) -> int:
        return self.semantic.shape[0]

    @property
    def width(self) -> int:
        return self.semantic.shape[1]


@dataclass
class SceneParams:
    height: int = 96
    width: int = 96
    facades: int = 2
    rows: int = 3
    cols: int = 3
    shear_range: Tuple[float, float] = (-40.0, 40.0)
    decay: float = 0.8
    noise: float = 0.04
    texture: float = 0.06
    occluders: Tuple[int, int] = (0, 2)
    palette: str = "full"
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.shear_range
        if not (-60.0 < lo <= hi < 60.0):
            raise ValueError(f"shear range must lie inside (-60, 60), got {self.shear_range}")
        if not 0.0 < self.decay <= 1.0:
            raise ValueError(f"decay must be in (0, 1], got {self.decay}")
        if self.facades not in (1, 2):
            raise ValueError("facade count must be 1 or 2")
        if self.palette not in _PALETTES:
            raise ValueError(f"unknown palette {self.palette!r}")
        if self.rows < 1 or self.cols < 1:
            raise ValueError("grid needs at least one row and column")

    @property
    def class_names(self) -> Tuple[str, ...]:
        return class_names_for(self.palette)


class _FacadeMap:
    """Plane-to-image map for one facade occupying columns [x_lo, x_hi)."""

    def __init__(self, x_lo, x_hi, y0, tan_phi, decay, mirrored):
        self.x_lo, self.x_hi = x_lo, x_hi
        self.width_px = x_hi - x_lo
        self.y0, self.t, self.decay, self.mirrored = y0, tan_phi, decay, mirrored
        # plane width chosen so that g(W_f) == region width
        if decay == 1.0:
            self.plane_w = self.width_px
        else:
            self.plane_w = self.width_px * math.log(decay) / (decay - 1.0)

    def scale(self, X):
        return self.decay ** (X / self.plane_w)

    def g(self, X):
        if self.decay == 1.0:
            return X
        return self.plane_w * (self.scale(X) - 1.0) / math.log(self.decay)

    def __call__(self, X, Y) -> Tuple[float, float]:
        gx = self.g(X)
        x = self.x_hi - gx if self.mirrored else self.x_lo + gx
        return x, self.y0 + self.t * gx + self.scale(X) * Y

    def quad(self, X0, Y0, X1, Y1):
        """Image corners (TL, TR, BL, BR) of the plane rectangle."""
        a, b = self(X0, Y0), self(X1, Y0)
        c, d = self(X0, Y1), self(X1, Y1)
        if self.mirrored:
            return b, a, d, c
        return a, b, c, d


def _jitter(rng, base, amount=0.08):
    return np.clip(np.asarray(base) + rng.uniform(-amount, amount, 3), 0, 1)


def generate_scene(params: SceneParams, sample_id: str = "") -> LabeledSample:
    """Render one deformed-facade scene; deterministic in ``params.seed``."""
    rng = np.random.default_rng(params.seed)
    h, w = params.height, params.width
    roles = _PALETTES[params.palette]
    yy, xx = np.mgrid[0:h, 0:w]

    sky_top, sky_bottom = _jitter(rng, (0.55, 0.7, 0.9)), _jitter(rng, (0.8, 0.85, 0.9))
    frac = (yy / max(h - 1, 1))[..., None]
    img = sky_top * (1 - frac) + sky_bottom * frac
    semantic = np.full((h, w), roles["background"], dtype=np.uint8)
    instances: Dict[int, List[np.ndarray]] = {}
    corners: Dict[int, List[tuple]] = {}
    skipped = 0

    if params.facades == 2:
        regions = [(0, w // 2, False), (w // 2, w, True)]
    else:
        regions = [(0, w, bool(rng.integers(2)))]

    for x_lo, x_hi, mirrored in regions:
        phi = rng.uniform(*params.shear_range)
        t = math.tan(math.radians(phi))
        region_w = x_hi - x_lo
        # keep the roof line inside the top fifth of the image
        top = rng.uniform(1.0, 0.12 * h)
        y0 = top - min(0.0, t * region_w)
        fmap = _FacadeMap(x_lo, x_hi, y0, t, params.decay, mirrored)
        far = fmap.plane_w
        lowest = max(fmap(0, 0)[1], fmap(far, 0)[1])
        plane_h = (h - 1.5 - lowest) / params.decay if params.decay < 1 else h - 1.5 - lowest
        plane_h = max(plane_h, 0.3 * h)

        # facade body: extend below the image so the street edge is hidden
        body = fmap.quad(0, 0, far, plane_h + 4 * h)
        body_mask = rasterize_convex_polygon(quad_polygon(body), w, h)
        wall = _jitter(rng, rng.choice([(0.78, 0.7, 0.58), (0.7, 0.45, 0.38),
                                        (0.72, 0.72, 0.7)]), 0.06)
        stripes = params.texture * np.sin(yy * rng.uniform(0.8, 1.6))[..., None]
        img[body_mask] = wall + stripes[body_mask]
        semantic[body_mask] = roles["facade"]

        floors = params.rows + 1
        floor_h = plane_h / floors
        col_w = far / params.cols
        glass = _jitter(rng, (0.2, 0.28, 0.38), 0.05)
        for r in range(params.rows):
            for c in range(params.cols):
                gx, gy = rng.uniform(0.22, 0.32), rng.uniform(0.2, 0.3)
                quad = fmap.quad(c * col_w + gx * col_w, r * floor_h + gy * floor_h,
                                 (c + 1) * col_w - gx * col_w, (r + 1) * floor_h - 0.15 * floor_h)
                if not _place(quad, "window", roles, glass, rng, img, semantic,
                              instances, corners, h, w):
                    skipped += 1

        door_col = int(rng.integers(params.cols))
        y_top = params.rows * floor_h + 0.12 * floor_h
        for c in range(params.cols):
            if c == door_col:
                quad = fmap.quad(c * col_w + 0.3 * col_w, y_top, (c + 1) * col_w - 0.3 * col_w,
                                 plane_h - 0.02 * floor_h)
                _place(quad, "door", roles, _jitter(rng, (0.4, 0.25, 0.15), 0.05), rng,
                       img, semantic, instances, corners, h, w)
            elif rng.random() < 0.6:
                quad = fmap.quad(c * col_w + 0.12 * col_w, y_top + 0.1 * floor_h,
                                 (c + 1) * col_w - 0.12 * col_w, plane_h - 0.15 * floor_h)
                _place(quad, "shop", roles, _jitter(rng, (0.55, 0.6, 0.5), 0.08), rng,
                       img, semantic, instances, corners, h, w)

    occluded = np.zeros((h, w), dtype=bool)
    for _ in range(int(rng.integers(params.occluders[0], params.occluders[1] + 1))):
        cx, cy = rng.uniform(0, w), rng.uniform(0.75 * h, h)
        rx, ry = rng.uniform(0.06, 0.16) * w, rng.uniform(0.04, 0.1) * h
        blob = ((xx + 0.5 - cx) / rx) ** 2 + ((yy + 0.5 - cy) / ry) ** 2 <= 1.0
        img[blob] = _jitter(rng, rng.choice([(0.2, 0.2, 0.22), (0.6, 0.1, 0.1),
                                             (0.85, 0.85, 0.85)]), 0.05)
        occluded |= blob
    if occluded.any():
        semantic[occluded] = IGNORE_INDEX
        for masks in instances.values():
            for m in masks:
                m &= ~occluded

    img = img + rng.normal(0, params.noise, img.shape)
    img8 = np.clip(np.round(img * 255), 0, 255).astype(np.uint8)
    if skipped:
        logger.info("scene %s: skipped %d degenerate or out-of-frame windows",
                    sample_id or params.seed, skipped)
    sample = LabeledSample(img8.transpose(2, 0, 1) / 255.0, semantic, instances, corners,
                           sample_id)
    sample.skipped = skipped
    return sample


def _place(quad, role, roles, color, rng, img, semantic, instances, corners, h, w) -> bool:
    pts = np.asarray(quad)
    if pts[:, 0].min() < 0 or pts[:, 1].min() < 0 or pts[:, 0].max() > w or pts[:, 1].max() > h:
        return False
    mask = rasterize_convex_polygon(quad_polygon(quad), w, h)
    rows, cols = np.nonzero(mask)
    if rows.size == 0 or np.ptp(rows) < 1 or np.ptp(cols) < 1:
        return False
    shade = np.linspace(0.0, 0.12, h) * rng.uniform(-1, 1)
    img[rows, cols] = color + shade[rows][:, None]
    cls = roles[role]
    semantic[mask] = cls
    if cls not in (roles["background"], roles["facade"]):
        instances.setdefault(cls, []).append(mask)
        corners.setdefault(cls, []).append(tuple(tuple(float(v) for v in p) for p in quad))
    return True


def generate_dataset(params: SceneParams, count: int) -> List[LabeledSample]:
    """``count`` scenes; scene i uses a seed stream derived from ``params.seed``."""
    seeds = np.random.SeedSequence(params.seed).spawn(count)
    out = []
    for i, ss in enumerate(seeds):
        p = SceneParams(**{**params.__dict__, "seed": int(ss.generate_state(1)[0])})
        out.append(generate_scene(p, sample_id=f"{i:05d}"))
    return out
