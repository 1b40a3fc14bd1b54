"""Command-line entry point: ``facade-rcnn {synth,train,eval,ablate,demo-kernels}``.

Exit codes: 0 success, 1 usage or configuration error, 2 missing or
unwritable path, 3 training diverged. Results go to stdout or files,
diagnostics to stderr.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from contextlib import nullcontext
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import ablation, config as run_config
from .checkpoint import CheckpointError
from .dataset import (DatasetError, load_dataset, read_class_names, write_dataset,
                      write_indexed_png, write_overlay_png)
from .detection import detections_record
from .estimator import FacadeParser, TrainingDivergedError
from .metrics import fuse
from .synth import SceneParams, class_names_for, generate_dataset
from .transconv import transform_kernel

logger = logging.getLogger("facade_rcnn")

EXIT_USAGE, EXIT_PATH, EXIT_DIVERGED = 1, 2, 3


class UsageError(Exception):
    pass


class PathError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ------------------------------------------------------------------ manifest

@dataclass
class RunManifest:
    """What was run, with which inputs, producing which outputs."""

    command: str
    config: Dict
    seed: Optional[int]
    input_hash: str
    outputs: List[str] = field(default_factory=list)

    def write(self, path) -> None:
        Path(path).write_text(json.dumps(self.__dict__, indent=2, sort_keys=True) + "\n")


def content_hash(paths: Sequence, extra: Optional[Dict] = None) -> str:
    """SHA-256 over the bytes of every file under ``paths`` (sorted) and ``extra``."""
    h = hashlib.sha256()
    for root in paths:
        root = Path(root)
        files = sorted(p for p in root.rglob("*") if p.is_file()) if root.is_dir() else [root]
        for f in files:
            if f.name == "manifest.json":
                continue
            h.update(str(f.relative_to(root) if root.is_dir() else f.name).encode())
            h.update(b"\0")
            h.update(f.read_bytes())
    if extra is not None:
        h.update(json.dumps(extra, sort_keys=True, default=str).encode())
    return h.hexdigest()


def _out_dir(path) -> Path:
    path = Path(path)
    try:
        path.mkdir(parents=True, exist_ok=True)
        probe = path / ".write-test"
        probe.write_bytes(b"")
        probe.unlink()
    except OSError as exc:
        raise PathError(f"cannot write to {path}: {exc.strerror or exc}") from exc
    return path


def _data_dir(path) -> Path:
    path = Path(path)
    if not (path / "splits").is_dir():
        raise PathError(f"{path} is not a dataset directory (no splits/)")
    return path


# ------------------------------------------------------------------ commands

def _pair(text: str):
    try:
        a, b = (float(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected 'A,B', got {text!r}")
    return a, b


def _float_list(text: str):
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _int_list(text: str):
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def cmd_synth(args) -> int:
    out = _out_dir(args.out)
    try:
        params = SceneParams(height=args.size, width=args.size, facades=args.facades,
                             shear_range=args.shear_range, decay=args.decay,
                             palette=args.palette, seed=args.seed)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    cfg = {k: (list(v) if isinstance(v, tuple) else v) for k, v in params.__dict__.items()}
    RunManifest("synth", {**cfg, "count": args.count}, args.seed,
                content_hash([], {**cfg, "count": args.count}),
                [str(out)]).write(out / "manifest.json")
    samples = generate_dataset(params, args.count)
    write_dataset(samples, out, class_names_for(args.palette))
    skipped = sum(getattr(s, "skipped", 0) for s in samples)
    print(json.dumps({"samples": len(samples), "skipped_windows": skipped, "out": str(out)}))
    return 0


def _params_from(args) -> Dict:
    params: Dict = {}
    if getattr(args, "config", None):
        try:
            params.update(run_config.load_config(args.config))
        except OSError as exc:
            raise PathError(f"cannot read config {args.config}: {exc.strerror}") from exc
        except run_config.ConfigError as exc:
            raise UsageError(str(exc)) from exc
    for name in ("epochs", "seed", "batch_size"):
        value = getattr(args, name, None)
        if value is not None:
            params[name] = value
    return params


def _adapt_to_data(params: Dict, names: Sequence[str]) -> Dict:
    """Fill the class count and convex classes from the dataset when unset."""
    params = dict(params)
    params.setdefault("n_classes", len(names))
    if "convex_classes" not in params:
        convex = [names.index(n) for n in ("window", "shop", "door") if n in names]
        params["convex_classes"] = tuple(convex)
    return params


def _load_split(root: Path, split: str):
    try:
        return load_dataset(root, split)
    except DatasetError as exc:
        raise PathError(str(exc)) from exc


def cmd_train(args) -> int:
    data = _data_dir(args.data)
    out = _out_dir(args.out)
    names = read_class_names(data)
    params = _adapt_to_data(_params_from(args), names)
    try:
        est = FacadeParser(**params)
    except TypeError as exc:
        raise UsageError(str(exc)) from exc
    ckpt, log_path = out / "model.frcn", out / "train_log.jsonl"
    RunManifest("train", est.run_config(), est.seed,
                content_hash([data] + ([args.config] if args.config else [])),
                [str(ckpt), str(ckpt.with_suffix(".cfg")), str(log_path)]
                ).write(out / "manifest.json")
    train = _load_split(data, "train")
    test = _load_split(data, "test") if args.eval_test else None
    try:
        est.fit(train, eval_set=test or None, log_path=log_path)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    est.save(ckpt)
    print(json.dumps({"checkpoint": str(ckpt), "log": str(log_path),
                      "final": est.history_[-1] if est.history_ else None}))
    return 0


def cmd_eval(args) -> int:
    ckpt = Path(args.checkpoint)
    if not ckpt.is_file():
        raise PathError(f"checkpoint not found: {ckpt}")
    data = _data_dir(args.data)
    out = _out_dir(args.out) if args.out else None
    try:
        est = FacadeParser.load(ckpt)
    except (CheckpointError, KeyError, ValueError) as exc:
        raise UsageError(f"cannot load {ckpt}: {exc}") from exc
    threshold = est.fuse_threshold if args.fuse_threshold is None else args.fuse_threshold
    if not 0.0 <= threshold <= 1.0:
        raise UsageError(f"--fuse-threshold must be in [0, 1], got {threshold}")
    if out is not None:
        RunManifest("eval", {**est.run_config(), "fuse_threshold": threshold}, est.seed,
                    content_hash([data, ckpt]), [str(out)]).write(out / "manifest.json")
    samples = _load_split(data, args.split)
    if not samples:
        raise UsageError(f"split {args.split!r} of {data} is empty")
    names = read_class_names(data)
    report = est.evaluate(samples, [threshold], class_names=names[:est.n_classes])
    if out is not None:
        _write_predictions(est, samples, threshold, out)
    print(json.dumps(report, sort_keys=True))
    return 0


def _write_predictions(est, samples, threshold, out: Path) -> None:
    (out / "masks").mkdir(exist_ok=True)
    (out / "overlays").mkdir(exist_ok=True)
    labels = est.predict_semantic(samples)
    dets = est.predict_detections(samples)
    with open(out / "detections.jsonl", "w") as fh:
        for s, lab, det in zip(samples, labels, dets):
            fused = fuse(lab, det, threshold).labels
            write_indexed_png(out / "masks" / f"{s.sample_id}.png", fused)
            write_overlay_png(out / "overlays" / f"{s.sample_id}.png", s.image, fused)
            fh.write(detections_record(s.sample_id, det) + "\n")


def cmd_ablate(args) -> int:
    data = _data_dir(args.data)
    names = read_class_names(data)
    base = _adapt_to_data(_params_from(args), names)
    seeds = args.seeds
    out_path = Path(args.out) if args.out else None
    if out_path is not None:
        _out_dir(out_path.parent)
        RunManifest(f"ablate:{args.sweep}", {k: (list(v) if isinstance(v, tuple) else v)
                                             for k, v in base.items()},
                    seeds[0] if seeds else None,
                    content_hash([data] + ([args.config] if args.config else []),
                                 {"seeds": seeds}),
                    [str(out_path)]).write(out_path.with_suffix(".manifest.json"))
    train, test = _load_split(data, "train"), _load_split(data, "test")
    if not train or not test:
        raise UsageError("ablation needs non-empty train and test splits")
    if args.sweep == "transconv":
        results = ablation.sweep_transconv(train, test, seeds, base, args.settings
                                           or tuple(ablation.TRANSCONV_SETTINGS))
    elif args.sweep == "alpha":
        results = ablation.sweep_alpha(train, test, seeds, base,
                                       args.values or ablation.ALPHA_SETTINGS)
    else:
        results = ablation.sweep_threshold(train, test, seeds, base,
                                           args.values or ablation.THRESHOLD_SETTINGS)
    if out_path is not None:
        ablation.write_csv(results, out_path)
    else:
        ablation.write_csv(results, sys.stdout)
    return 0


def demo_base_kernel(size: int) -> np.ndarray:
    """A lopsided cross: a full vertical bar and a half-length horizontal arm."""
    k = np.zeros((size, size))
    c = size // 2
    k[:, c] = 1.0
    k[c, c:] = 1.0
    k[0, c] = 0.5
    return k


def cmd_demo_kernels(args) -> int:
    out = _out_dir(args.out)
    from PIL import Image

    if args.size % 2 == 0 or args.size < 3:
        raise UsageError("--size must be an odd integer >= 3")
    base = demo_base_kernel(args.size)
    kernels = {"base": base}
    for phi in args.phi:
        for m in ((0, 1) if args.flip else (0,)):
            try:
                kernels[f"phi{phi:g}_m{m}"] = transform_kernel(base, phi % 180.0, m)
            except ValueError as exc:
                raise UsageError(str(exc)) from exc
    lo = min(k.min() for k in kernels.values())
    hi = max(k.max() for k in kernels.values())
    written = []
    for name, k in kernels.items():
        gray = np.round(255 * (k - lo) / (hi - lo if hi > lo else 1.0)).astype(np.uint8)
        gray = np.kron(gray, np.ones((args.scale, args.scale), dtype=np.uint8))
        path = out / f"kernel_{name}.png"
        Image.fromarray(gray).save(path)
        written.append(str(path))
    print(json.dumps({"kernels": written,
                      "mass": {n: float(k.sum()) for n, k in kernels.items()}}))
    return 0


# ------------------------------------------------------------------ parser

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="facade-rcnn", description="Deformation-aware facade parsing.")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="generate a synthetic facade dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--count", type=int, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--shear-range", type=_pair, default=(-40.0, 40.0))
    s.add_argument("--decay", type=float, default=0.8)
    s.add_argument("--size", type=int, default=96)
    s.add_argument("--facades", type=int, choices=(1, 2), default=2)
    s.add_argument("--palette", choices=("full", "binary"), default="full")
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train a model")
    t.add_argument("--config")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--epochs", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--eval-test", action="store_true",
                   help="log test-split mIoU and accuracy every epoch")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", default="test")
    e.add_argument("--fuse-threshold", type=float)
    e.add_argument("--out", help="directory for masks, overlays and detections.jsonl")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="run an ablation sweep, CSV output")
    a.add_argument("--sweep", choices=("transconv", "alpha", "threshold"), required=True)
    a.add_argument("--data", required=True)
    a.add_argument("--config")
    a.add_argument("--seeds", type=_int_list, default=[0, 1, 2])
    a.add_argument("--epochs", type=int)
    a.add_argument("--batch-size", type=int)
    a.add_argument("--settings", type=lambda v: [x for x in v.split(",") if x],
                   help="transconv settings, e.g. none,shear+flip")
    a.add_argument("--values", type=_float_list, help="alpha or threshold values")
    a.add_argument("--out", help="CSV path (default: stdout)")
    a.set_defaults(func=cmd_ablate)

    d = sub.add_parser("demo-kernels", help="write base and sheared kernels as PNGs")
    d.add_argument("--phi", type=_float_list, required=True)
    d.add_argument("--out", required=True)
    d.add_argument("--size", type=int, default=9)
    d.add_argument("--scale", type=int, default=16)
    d.add_argument("--flip", action="store_true")
    d.set_defaults(func=cmd_demo_kernels)
    return p


def _thread_limit():
    value = os.environ.get("FRCNN_THREADS")
    if not value:
        return nullcontext()
    try:
        n = int(value)
    except ValueError:
        raise UsageError(f"FRCNN_THREADS must be an integer, got {value!r}")
    if n < 1:
        raise UsageError("FRCNN_THREADS must be >= 1")
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s",
                        level=logging.WARNING - 10 * min(args.verbose, 2))
    if getattr(args, "settings", None):
        unknown = set(args.settings) - set(ablation.TRANSCONV_SETTINGS)
        if unknown:
            parser.error(f"unknown transconv settings: {sorted(unknown)}")
    try:
        with _thread_limit():
            return args.func(args)
    except UsageError as exc:
        print(f"facade-rcnn: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except PathError as exc:
        print(f"facade-rcnn: error: {exc}", file=sys.stderr)
        return EXIT_PATH
    except TrainingDivergedError as exc:
        print(f"facade-rcnn: error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
