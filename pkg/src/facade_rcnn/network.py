"""The parsing network: dilated-conv backbone, semantic decoder, proposal
stage, generalized-box head, and the combined training loss."""
from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import ops
from .convex import convex_loss
from .detection import (DetectionTarget, clip_boxes, decode_boxes, decode_detections,
                        detection_loss, encode_boxes, generate_anchors, nms_boxes,
                        proposal_loss)
from .geometry import InvalidQuadError, box_iou, boxes_from_corners, quad_envelope
from .synth import IGNORE_INDEX, LabeledSample
from .tensor import Tensor
from .transconv import KernelGroupSpec, transconv_forward

BACKBONE_STRIDE = 8


@dataclass
class ModelConfig:
    n_classes: int = 5
    widths: Tuple[int, ...] = (16, 32, 64, 64)
    strides: Tuple[int, ...] = (2, 2, 2, 1)
    dilations: Tuple[int, ...] = (1, 1, 1, 2)
    transconv_angles: Tuple[float, ...] = (0.0,)
    transconv_flip: bool = False
    transconv_rotate: bool = False
    transconv_stages: Tuple[int, ...] = (0,)
    alpha: float = 1.0 / 9.0
    detection: bool = True
    convex_classes: Tuple[int, ...] = (2, 4, 3)
    convex_labels: str = "class"
    convex_mode: str = "hull"
    anchor_scales: Tuple[float, ...] = (8.0, 16.0, 32.0)
    anchor_ratios: Tuple[float, ...] = (0.5, 1.0, 2.0)
    rpn_batch: int = 64
    proposals: int = 32
    roi_batch: int = 32
    roi_size: int = 4
    head_hidden: int = 128
    seed: int = 0
    ignore_index: int = IGNORE_INDEX

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError("alpha must be non-negative")
        if self.n_classes < 2:
            raise ValueError("need at least two classes")
        if not (len(self.widths) == len(self.strides) == len(self.dilations)):
            raise ValueError("widths, strides and dilations need equal length")
        if int(np.prod(self.strides)) != BACKBONE_STRIDE:
            raise ValueError(f"backbone strides must multiply to {BACKBONE_STRIDE}")
        for c in self.convex_classes:
            if not 0 <= c < self.n_classes:
                raise ValueError(f"convex class {c} outside [0, {self.n_classes})")

    @property
    def kernel_group(self) -> KernelGroupSpec:
        return KernelGroupSpec(tuple(self.transconv_angles), self.transconv_flip,
                               self.transconv_rotate)

    @property
    def detection_classes(self) -> Tuple[int, ...]:
        return tuple(self.convex_classes)


@dataclass
class LossReport:
    semantic: float
    proposal: float
    detection: float
    cvx: float
    total: float
    alpha: float = 0.0
    tensor: Optional[Tensor] = field(default=None, repr=False, compare=False)

    def as_dict(self) -> Dict[str, float]:
        return {"semantic": self.semantic, "proposal": self.proposal,
                "detection": self.detection, "cvx": self.cvx, "total": self.total}


# ------------------------------------------------------------------ layers

class Conv:
    def __init__(self, cin, cout, k, rng, stride=1, padding=0, dilation=1, bias=True,
                 group: Optional[KernelGroupSpec] = None):
        std = math.sqrt(2.0 / (cin * k * k))
        self.weight = Tensor(rng.normal(0, std, (cout, cin, k, k)), requires_grad=True)
        self.bias = Tensor(np.zeros(cout), requires_grad=True) if bias else None
        self.stride, self.padding, self.dilation = stride, padding, dilation
        self.group = group

    def __call__(self, x):
        if self.group is not None:
            return transconv_forward(x, self.weight, self.group, self.bias,
                                     self.stride, self.padding, self.dilation)
        return ops.conv2d(x, self.weight, self.bias, self.stride, self.padding, self.dilation)

    def params(self):
        out = {"weight": self.weight}
        if self.bias is not None:
            out["bias"] = self.bias
        return out


class BatchNorm:
    def __init__(self, c):
        self.gamma = Tensor(np.ones(c), requires_grad=True)
        self.beta = Tensor(np.zeros(c), requires_grad=True)
        self.running_mean = np.zeros(c)
        self.running_var = np.ones(c)

    def __call__(self, x, training):
        return ops.batch_norm(x, self.gamma, self.beta, self.running_mean, self.running_var,
                              training)

    def params(self):
        return {"gamma": self.gamma, "beta": self.beta}

    def buffers(self):
        return {"running_mean": self.running_mean, "running_var": self.running_var}


class Linear:
    def __init__(self, cin, cout, rng, std=None):
        std = math.sqrt(2.0 / cin) if std is None else std
        self.weight = Tensor(rng.normal(0, std, (cout, cin)), requires_grad=True)
        self.bias = Tensor(np.zeros(cout), requires_grad=True)

    def __call__(self, x):
        return ops.linear(x, self.weight, self.bias)

    def params(self):
        return {"weight": self.weight, "bias": self.bias}


# ------------------------------------------------------------------ model

class FacadeRCNN:
    """Backbone plus semantic and detection branches."""

    def __init__(self, config: ModelConfig):
        self.config = config
        rng = np.random.default_rng(config.seed)
        group = config.kernel_group
        placed = set(config.transconv_stages) if not group.is_identity else set()
        self.layers: "OrderedDict[str, object]" = OrderedDict()
        cin = 3
        for s, (width, stride, dil) in enumerate(zip(config.widths, config.strides,
                                                      config.dilations)):
            g1 = group if (s == 0 and 0 in placed) else None
            g2 = group if (s + 1) in placed else None
            self.layers[f"backbone.{s}.conv1"] = Conv(cin, width, 3, rng, stride, dil, dil,
                                                      bias=False, group=g1)
            self.layers[f"backbone.{s}.bn1"] = BatchNorm(width)
            self.layers[f"backbone.{s}.conv2"] = Conv(width, width, 3, rng, 1, dil, dil,
                                                      bias=False, group=g2)
            self.layers[f"backbone.{s}.bn2"] = BatchNorm(width)
            cin = width
        self.n_stages = len(config.widths)
        feat = cin
        self.layers["seg.conv"] = Conv(feat, feat, 3, rng, padding=1, bias=False)
        self.layers["seg.bn"] = BatchNorm(feat)
        self.layers["seg.cls"] = Conv(feat, config.n_classes, 1, rng)

        self.n_anchors = len(config.anchor_scales) * len(config.anchor_ratios)
        if config.detection:
            n_det = len(config.detection_classes) + 1
            self.layers["rpn.conv"] = Conv(feat, feat, 3, rng, padding=1)
            self.layers["rpn.obj"] = Conv(feat, self.n_anchors, 1, rng)
            self.layers["rpn.reg"] = Conv(feat, 4 * self.n_anchors, 1, rng)
            self.layers["head.fc"] = Linear(feat * config.roi_size ** 2, config.head_hidden, rng)
            self.layers["head.cls"] = Linear(config.head_hidden, n_det, rng, std=0.01)
            self.layers["head.reg"] = Linear(config.head_hidden, 8, rng, std=0.001)
            for name in ("rpn.obj", "rpn.reg"):
                self.layers[name].weight.data *= 0.1
        self.training = True
        for name, p in self.named_parameters().items():
            p.name = name

    # ------------------------------------------------------------ state
    def named_parameters(self) -> "OrderedDict[str, Tensor]":
        out = OrderedDict()
        for lname, layer in self.layers.items():
            for pname, p in layer.params().items():
                out[f"{lname}.{pname}"] = p
        return out

    def parameters(self) -> List[Tensor]:
        return list(self.named_parameters().values())

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        out = OrderedDict((k, p.data) for k, p in self.named_parameters().items())
        for lname, layer in self.layers.items():
            if isinstance(layer, BatchNorm):
                for bname, buf in layer.buffers().items():
                    out[f"{lname}.{bname}"] = buf
        return out

    def load_state_dict(self, state) -> None:
        params = self.named_parameters()
        for name, p in params.items():
            if name not in state:
                raise KeyError(f"checkpoint lacks parameter {name}")
            if state[name].shape != p.shape:
                raise ValueError(f"{name}: checkpoint shape {state[name].shape} != {p.shape}")
            p.data = np.array(state[name], dtype=p.dtype)
        for lname, layer in self.layers.items():
            if isinstance(layer, BatchNorm):
                layer.running_mean[:] = state[f"{lname}.running_mean"]
                layer.running_var[:] = state[f"{lname}.running_var"]

    def astype(self, dtype) -> "FacadeRCNN":
        for p in self.parameters():
            p.data = p.data.astype(dtype)
        return self

    @property
    def dtype(self):
        return self.parameters()[0].dtype

    def train(self, mode: bool = True) -> "FacadeRCNN":
        self.training = mode
        return self

    def eval(self) -> "FacadeRCNN":
        return self.train(False)

    # ---------------------------------------------------------- forward
    def _block(self, name, x):
        return ops.relu(self.layers[name.replace("conv", "bn")](self.layers[name](x),
                                                               self.training))

    def backbone(self, x: Tensor) -> Tensor:
        for s in range(self.n_stages):
            x = self._block(f"backbone.{s}.conv1", x)
            x = self._block(f"backbone.{s}.conv2", x)
        return x

    def forward(self, images, with_detection: Optional[bool] = None) -> Dict:
        """Run the shared backbone and both branch stems on images [N,3,H,W].

        Returns a dict with ``features``, ``semantic`` logits [N,C,H,W] and,
        when detection is on, ``objectness`` [N,A] and ``rpn_deltas`` [N,A,4]
        plus the ``anchors`` [A,4].
        """
        x = images if isinstance(images, Tensor) else Tensor(images)
        if x.ndim == 3:
            x = x.reshape(1, *x.shape)
        if x.dtype != self.dtype and not x.requires_grad:
            x = Tensor(x.data.astype(self.dtype))
        n, _, h, w = x.shape
        if h % BACKBONE_STRIDE or w % BACKBONE_STRIDE:
            raise ValueError(
                f"image size {h}x{w} must be a multiple of {BACKBONE_STRIDE} in both dimensions")
        feats = self.backbone(x)
        seg = self._block("seg.conv", feats)
        logits = ops.resize_bilinear(self.layers["seg.cls"](seg), (h, w))
        out = {"features": feats, "semantic": logits, "image_size": (h, w)}
        detect = self.config.detection if with_detection is None else with_detection
        if detect and self.config.detection:
            r = ops.relu(self.layers["rpn.conv"](feats))
            hf, wf = feats.shape[2:]
            a = self.n_anchors
            obj = self.layers["rpn.obj"](r).transpose(0, 2, 3, 1).reshape(n, hf * wf * a)
            reg = self.layers["rpn.reg"](r).transpose(0, 2, 3, 1).reshape(n, hf * wf * a, 4)
            out["objectness"] = obj
            out["rpn_deltas"] = reg
            out["anchors"] = generate_anchors((hf, wf), BACKBONE_STRIDE,
                                              self.config.anchor_scales,
                                              self.config.anchor_ratios)
        return out

    def propose(self, outputs, i: int) -> np.ndarray:
        """Top proposals for image ``i`` after NMS, as [P,4] boxes."""
        h, w = outputs["image_size"]
        scores = outputs["objectness"].data[i]
        boxes = clip_boxes(decode_boxes(outputs["rpn_deltas"].data[i], outputs["anchors"]), h, w)
        ok = ((boxes[:, 2] - boxes[:, 0]) >= 2) & ((boxes[:, 3] - boxes[:, 1]) >= 2)
        idx = np.flatnonzero(ok)
        idx = idx[np.argsort(-scores[idx], kind="stable")[:200]]
        keep = nms_boxes(boxes[idx], scores[idx], 0.7)[:self.config.proposals]
        return boxes[idx[keep]]

    def head(self, features: Tensor, i: int, rois: np.ndarray):
        pooled = ops.roi_align(features[i], rois, self.config.roi_size, 1.0 / BACKBONE_STRIDE)
        flat = pooled.reshape(len(rois), -1)
        hid = ops.relu(self.layers["head.fc"](flat))
        cls = self.layers["head.cls"](hid)
        reg = self.layers["head.reg"](hid).reshape(len(rois), 2, 4)
        return cls, reg

    # ---------------------------------------------------------- inference
    def predict(self, images, score_threshold: float = 0.05, nms_iou: float = 0.5):
        """Semantic label maps and decoded generalized boxes per image."""
        from .tensor import no_grad
        with no_grad():
            out = self.forward(images)
            labels = np.argmax(out["semantic"].data, axis=1)
            dets = []
            for i in range(labels.shape[0]):
                if "objectness" not in out:
                    dets.append([])
                    continue
                rois = self.propose(out, i)
                if len(rois) == 0:
                    dets.append([])
                    continue
                cls, reg = self.head(out["features"], i, rois)
                dets.append(decode_detections(cls, reg, rois, score_threshold, nms_iou,
                                              self.config.detection_classes,
                                              out["image_size"]))
        return labels, dets


# ------------------------------------------------------------------ losses

def detection_targets(sample: LabeledSample, classes: Sequence[int]):
    """Envelopes [G,4], box pairs [G,2,4] and head class columns [G]."""
    env, pairs, cols = [], [], []
    for col, cls in enumerate(classes):
        for corners in sample.corners.get(cls, []):
            try:
                tlbr, trbl = boxes_from_corners(*corners)
            except InvalidQuadError:
                continue
            env.append(quad_envelope(corners))
            pairs.append((tlbr, trbl))
            cols.append(col)
    return (np.asarray(env, dtype=np.float64).reshape(-1, 4),
            np.asarray(pairs, dtype=np.float64).reshape(-1, 2, 4),
            np.asarray(cols, dtype=np.int64))


def sample_rois(proposals: np.ndarray, envelopes: np.ndarray, batch: int,
                rng: Optional[np.random.Generator], fg_iou: float = 0.5):
    """RoIs (proposals plus gt envelopes) with up to half foreground."""
    rois = np.vstack([proposals.reshape(-1, 4), envelopes]) if len(envelopes) else \
        proposals.reshape(-1, 4)
    if len(rois) == 0:
        return rois, np.zeros(0, dtype=np.int64), np.zeros(0, dtype=bool)
    if len(envelopes):
        iou = box_iou(rois, envelopes)
        matched, best = iou.argmax(axis=1), iou.max(axis=1)
    else:
        matched, best = np.zeros(len(rois), dtype=np.int64), np.zeros(len(rois))
    fg = np.flatnonzero(best >= fg_iou)
    bg = np.flatnonzero(best < fg_iou)
    n_fg = min(len(fg), batch // 2)
    n_bg = min(len(bg), batch - n_fg)

    def pick(idx, k):
        if k >= len(idx):
            return idx
        if rng is None:
            return idx[:k]
        return np.sort(rng.choice(idx, size=k, replace=False))

    chosen = np.concatenate([pick(fg, n_fg), pick(bg, n_bg)]).astype(np.int64)
    return rois[chosen], matched[chosen], best[chosen] >= fg_iou


def total_loss(model: FacadeRCNN, outputs: Dict, samples: Sequence[LabeledSample],
               rng: Optional[np.random.Generator] = None) -> LossReport:
    """Semantic + proposal + detection + alpha * convex terms, batch-averaged."""
    cfg = model.config
    n = len(samples)
    logits = outputs["semantic"]
    target = np.stack([s.semantic for s in samples]).astype(np.int64)
    l_sem = ops.cross_entropy(logits, target, axis=1, ignore_index=cfg.ignore_index)

    zero = logits.sum() * 0.0
    l_prop, l_det, l_cvx = zero, zero, zero
    use_det = cfg.detection and "objectness" in outputs
    if use_det:
        prop_terms, det_terms = [], []
        for i, s in enumerate(samples):
            env, pairs, cols = detection_targets(s, cfg.detection_classes)
            prop_terms.append(proposal_loss(outputs["objectness"][i], outputs["rpn_deltas"][i],
                                            outputs["anchors"], env, rng, cfg.rpn_batch))
            rois, matched, is_fg = sample_rois(model.propose(outputs, i), env, cfg.roi_batch, rng)
            if len(rois) == 0:
                continue
            targets = []
            background = len(cfg.detection_classes)
            for roi, g, f in zip(rois, matched, is_fg):
                if f:
                    d = np.stack([encode_boxes(pairs[g, 0], roi)[0],
                                  encode_boxes(pairs[g, 1], roi)[0]])
                    targets.append(DetectionTarget(int(cols[g]), d))
                else:
                    targets.append(DetectionTarget(background))
            cls, reg = model.head(outputs["features"], i, rois)
            det_terms.append(detection_loss(cls, reg, targets))
        l_prop = _mean(prop_terms, zero)
        l_det = _mean(det_terms, zero)

    if cfg.alpha > 0 and cfg.convex_classes:
        terms = [convex_loss(logits[i], s.semantic, s.instances, cfg.convex_classes,
                             cfg.convex_labels, cfg.convex_mode, cfg.ignore_index)
                 for i, s in enumerate(samples)]
        l_cvx = _mean(terms, zero)

    total = l_sem + l_prop + l_det + l_cvx * cfg.alpha
    parts = [l_sem.item(), l_prop.item(), l_det.item(), l_cvx.item()]
    # the reported total is re-summed in float64 so additivity is exact in float32 mode too
    return LossReport(*parts, parts[0] + parts[1] + parts[2] + cfg.alpha * parts[3],
                      cfg.alpha, total)


def _mean(terms, zero):
    if not terms:
        return zero
    acc = terms[0]
    for t in terms[1:]:
        acc = acc + t
    return acc * (1.0 / len(terms))


def config_dict(cfg: ModelConfig) -> Dict:
    return asdict(cfg)
