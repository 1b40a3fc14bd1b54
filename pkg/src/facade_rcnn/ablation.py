"""Sweeps over kernel groups, convex weight and fusion threshold.

Every sweep trains one model per (setting, seed) on the same split and
reports test metrics; the threshold sweep trains once per seed and
re-fuses the same predictions at each threshold.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from .estimator import FacadeParser

logger = logging.getLogger(__name__)

SHEAR_ANGLES = (150.0, 0.0, 30.0)

TRANSCONV_SETTINGS: Dict[str, Dict] = {
    "none": dict(transconv_angles=(0.0,), transconv_flip=False, transconv_rotate=False),
    "shear": dict(transconv_angles=SHEAR_ANGLES, transconv_flip=False, transconv_rotate=False),
    "flip": dict(transconv_angles=(0.0,), transconv_flip=True, transconv_rotate=False),
    "rotate": dict(transconv_angles=(0.0,), transconv_flip=False, transconv_rotate=True),
    "shear+flip": dict(transconv_angles=SHEAR_ANGLES, transconv_flip=True,
                       transconv_rotate=False),
    "all": dict(transconv_angles=SHEAR_ANGLES, transconv_flip=True, transconv_rotate=True),
}
ALPHA_SETTINGS = (0.0, 1.0 / 12.0, 1.0 / 9.0, 1.0 / 6.0, 1.0 / 3.0)
THRESHOLD_SETTINGS = (0.0, 0.1, 0.3, 0.5, 0.7, 0.9)


@dataclass
class SweepResult:
    """Per-seed test metrics and training histories for one setting."""

    setting: str
    miou: List[float] = field(default_factory=list)
    accuracy: List[float] = field(default_factory=list)
    histories: List[List[Dict]] = field(default_factory=list)

    @property
    def median_miou(self) -> float:
        return float(np.median(self.miou))

    @property
    def median_accuracy(self) -> float:
        return float(np.median(self.accuracy))

    def row(self) -> Dict:
        return {"setting": self.setting, "miou": self.median_miou,
                "accuracy": self.median_accuracy, "seeds": len(self.miou)}


def _fit(params: Dict, seed: int, train, test) -> FacadeParser:
    est = FacadeParser(**{**params, "seed": seed})
    return est.fit(train, eval_set=test)


def sweep_transconv(train, test, seeds: Sequence[int], base: Optional[Dict] = None,
                    settings: Sequence[str] = tuple(TRANSCONV_SETTINGS)) -> List[SweepResult]:
    return _sweep({name: TRANSCONV_SETTINGS[name] for name in settings},
                  train, test, seeds, base)


def sweep_alpha(train, test, seeds: Sequence[int], base: Optional[Dict] = None,
                alphas: Sequence[float] = ALPHA_SETTINGS) -> List[SweepResult]:
    return _sweep({f"{a:.6g}": {"alpha": a} for a in alphas}, train, test, seeds, base)


def _sweep(settings: Dict[str, Dict], train, test, seeds, base) -> List[SweepResult]:
    out = []
    for name, overrides in settings.items():
        res = SweepResult(name)
        for seed in seeds:
            est = _fit({**(base or {}), **overrides}, seed, train, test)
            rep = est.evaluate(test)
            res.miou.append(rep["miou"])
            res.accuracy.append(rep["accuracy"])
            res.histories.append(est.history_)
            logger.info("%s seed %d: mIoU %.4f", name, seed, rep["miou"])
        out.append(res)
    return out


def sweep_threshold(train, test, seeds: Sequence[int], base: Optional[Dict] = None,
                    thresholds: Sequence[float] = THRESHOLD_SETTINGS) -> List[SweepResult]:
    results = {t: SweepResult(f"{t:g}") for t in thresholds}
    for seed in seeds:
        est = _fit(dict(base or {}), seed, train, test)
        rep = est.evaluate(test, thresholds)
        for t in thresholds:
            fused = rep["fused"][repr(float(t))]
            results[t].miou.append(fused["miou"])
            results[t].accuracy.append(fused["accuracy"])
            results[t].histories.append(est.history_)
    return [results[t] for t in thresholds]


def epochs_to_reach(history: Sequence[Dict], target: float) -> Optional[int]:
    """First epoch whose test mIoU is at least ``target``; None if never."""
    for rec in history:
        if rec.get("miou", -np.inf) >= target:
            return int(rec["epoch"])
    return None


def write_csv(results: Sequence[SweepResult], path_or_file) -> None:
    own = isinstance(path_or_file, (str, bytes)) or hasattr(path_or_file, "__fspath__")
    fh = open(path_or_file, "w", newline="") if own else path_or_file
    try:
        writer = csv.DictWriter(fh, fieldnames=["setting", "miou", "accuracy", "seeds"])
        writer.writeheader()
        for r in results:
            writer.writerow(r.row())
    finally:
        if own:
            fh.close()
