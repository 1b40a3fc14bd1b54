"""On-disk datasets: RGB images, indexed-PNG semantic masks and polygon JSON.

Layout::

    root/images/<stem>.png      RGB image
    root/semantic/<stem>.png    palette PNG, pixel value = class id (255 ignore)
    root/instances/<stem>.json  {"shapes": [{"label": str, "points": [[x, y], ...]}]}
    root/splits/train.txt       newline-separated stems (likewise test.txt)
    root/classes.txt            optional, one class name per line
"""
from __future__ import annotations

import json
import logging
import os
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
from PIL import Image

from .geometry import (gbbox_corners_from_mask, is_convex, quad_polygon,
                       rasterize_convex_polygon)
from .synth import CLASS_NAMES, IGNORE_INDEX, LabeledSample

logger = logging.getLogger(__name__)

PALETTE_RGB = [
    (0, 0, 0), (200, 180, 120), (30, 60, 230), (130, 70, 20), (40, 190, 60),
    (220, 40, 200), (240, 220, 40), (40, 200, 220),
]


class DatasetError(RuntimeError):
    pass


def _palette_bytes() -> List[int]:
    pal = [0] * (256 * 3)
    for i, rgb in enumerate(PALETTE_RGB):
        pal[3 * i:3 * i + 3] = rgb
    pal[3 * IGNORE_INDEX:3 * IGNORE_INDEX + 3] = (255, 255, 255)
    return pal


def write_indexed_png(path, labels: np.ndarray) -> None:
    labels = np.ascontiguousarray(labels, dtype=np.uint8)
    img = Image.frombytes("P", (labels.shape[1], labels.shape[0]), labels.tobytes())
    img.putpalette(_palette_bytes())
    img.save(path)


def write_overlay_png(path, image: np.ndarray, labels: np.ndarray, alpha: float = 0.5) -> None:
    """RGB blend of an image [3, H, W] and a colour-coded label map."""
    pal = np.array(_palette_bytes(), dtype=np.float64).reshape(256, 3) / 255.0
    rgb = np.asarray(image).transpose(1, 2, 0)
    blend = (1 - alpha) * rgb + alpha * pal[np.asarray(labels, dtype=np.uint8)]
    Image.fromarray(np.clip(np.round(blend * 255), 0, 255).astype(np.uint8)).save(path)


def _rasterize_any(points: np.ndarray, width: int, height: int) -> np.ndarray:
    if is_convex(points):
        return rasterize_convex_polygon(points, width, height)
    # even-odd fill at pixel centres for non-convex annotations
    cx = np.arange(width) + 0.5
    cy = np.arange(height) + 0.5
    px, py = np.meshgrid(cx, cy)
    inside = np.zeros((height, width), dtype=bool)
    n = len(points)
    for i in range(n):
        (x1, y1), (x2, y2) = points[i], points[(i + 1) % n]
        if y1 == y2:
            continue
        crosses = (py >= min(y1, y2)) & (py < max(y1, y2))
        xint = x1 + (py - y1) * (x2 - x1) / (y2 - y1)
        inside ^= crosses & (px < xint)
    return inside


def save_sample(sample: LabeledSample, root, class_names: Sequence[str] = CLASS_NAMES) -> str:
    root = Path(root)
    stem = sample.sample_id or "sample"
    for sub in ("images", "semantic", "instances"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    img8 = np.clip(np.round(sample.image.transpose(1, 2, 0) * 255), 0, 255).astype(np.uint8)
    Image.fromarray(img8).save(root / "images" / f"{stem}.png")
    write_indexed_png(root / "semantic" / f"{stem}.png", sample.semantic)
    shapes = []
    for cls in sorted(sample.corners):
        for corners in sample.corners[cls]:
            shapes.append({"label": class_names[cls],
                           "points": [[float(x), float(y)] for x, y in quad_polygon(corners)]})
    doc = {"shapes": shapes, "imageHeight": sample.height, "imageWidth": sample.width}
    with open(root / "instances" / f"{stem}.json", "w") as fh:
        json.dump(doc, fh)
    return stem


def load_sample(root, stem: str, class_names: Optional[Sequence[str]] = None) -> LabeledSample:
    """Read one sample; instance polygons are rasterised and clipped to their
    class's semantic region, and corners come from the resulting masks."""
    root = Path(root)
    class_names = list(class_names or read_class_names(root))
    paths = {sub: root / sub / f"{stem}{ext}" for sub, ext in
             (("images", ".png"), ("semantic", ".png"), ("instances", ".json"))}
    for p in paths.values():
        if not p.is_file():
            raise DatasetError(f"sample {stem!r}: missing file {p}")

    rgb = np.asarray(Image.open(paths["images"]).convert("RGB"))
    sem_img = Image.open(paths["semantic"])
    if sem_img.mode not in ("P", "L"):
        raise DatasetError(f"{paths['semantic']}: expected an indexed PNG, got mode {sem_img.mode}")
    semantic = np.array(sem_img, dtype=np.uint8)
    h, w = semantic.shape
    if rgb.shape[:2] != (h, w):
        raise DatasetError(f"sample {stem!r}: image {rgb.shape[:2]} and mask {(h, w)} differ")

    with open(paths["instances"]) as fh:
        doc = json.load(fh)
    instances: Dict[int, List[np.ndarray]] = {}
    corners: Dict[int, List[tuple]] = {}
    for shape in doc.get("shapes", []):
        label, pts = shape.get("label"), np.asarray(shape.get("points", []), dtype=np.float64)
        if label not in class_names:
            logger.warning("%s: unknown label %r skipped", paths["instances"], label)
            continue
        if pts.ndim != 2 or len(pts) < 3:
            logger.warning("%s: polygon with fewer than 3 points skipped", paths["instances"])
            continue
        cls = class_names.index(label)
        mask = _rasterize_any(pts, w, h) & (semantic == cls)
        if not mask.any():
            logger.warning("%s: %r polygon covers no %r pixels", paths["instances"], label, label)
            continue
        instances.setdefault(cls, []).append(mask)
        corners.setdefault(cls, []).append(gbbox_corners_from_mask(mask))
    return LabeledSample(rgb.transpose(2, 0, 1) / 255.0, semantic, instances, corners, stem)


def read_class_names(root) -> List[str]:
    path = Path(root) / "classes.txt"
    if path.is_file():
        return [ln.strip() for ln in path.read_text().splitlines() if ln.strip()]
    return list(CLASS_NAMES)


def read_split(root, split: str) -> List[str]:
    path = Path(root) / "splits" / f"{split}.txt"
    if not path.is_file():
        raise DatasetError(f"missing split file {path}")
    return [ln.strip() for ln in path.read_text().splitlines() if ln.strip()]


def load_dataset(root, split: str = "train") -> List[LabeledSample]:
    names = read_class_names(root)
    return [load_sample(root, stem, names) for stem in read_split(root, split)]


def write_dataset(samples: Sequence[LabeledSample], root,
                  class_names: Sequence[str] = CLASS_NAMES, train_fraction: float = 0.8) -> None:
    """Save ``samples`` and an index-ordered train/test split."""
    root = Path(root)
    stems = [save_sample(s, root, class_names) for s in samples]
    n_train = int(round(train_fraction * len(stems)))
    (root / "splits").mkdir(parents=True, exist_ok=True)
    for name, part in (("train", stems[:n_train]), ("test", stems[n_train:])):
        (root / "splits" / f"{name}.txt").write_text("".join(s + "\n" for s in part))
    (root / "classes.txt").write_text("".join(n + "\n" for n in class_names))


def dataset_exists(root) -> bool:
    return os.path.isdir(Path(root) / "splits")
