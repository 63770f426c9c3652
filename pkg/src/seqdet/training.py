"""Target assignment, the composite detection loss, and the optimizer loop.

Each ground-truth box is owned by exactly one (scale, cell, anchor) slot: the
anchor with the best concentric shape-IoU picks the scale, and the cell is
the one containing the box center at that scale's grid.  The loss is

    total = coord_w * localization + confidence + cls_w * classification

where confidence is binary cross-entropy on objectness (obj_w on assigned
slots against 1, noobj_w elsewhere against 0) and classification is
per-class BCE on assigned slots.  Sequences train with per-frame losses
summed over a chunk and gradients truncated at chunk boundaries: the carried
recurrent state enters the next chunk as a constant.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Hashable, Sequence

import numpy as np

from .anchors import BoxShape, shape_iou
from .boxes import BoxLabel
from .convlstm import ConvLSTMState
from .detector import ANCHORS_PER_SCALE, AnchorSet, Detector, GridPrediction
from .tensor import (
    ConvKernel,
    Tensor4,
    add,
    add_array,
    mul_array,
    multiply,
    reduce_sum,
    scale,
    sigmoid,
    softplus,
)

__all__ = [
    "LossWeights",
    "TargetAssignment",
    "LossBreakdown",
    "FrameBatch",
    "assign_targets",
    "detection_loss",
    "detection_loss_graph",
    "SgdMomentum",
    "train_step",
    "port_weights",
]

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class LossWeights:
    coord: float = 5.0
    obj: float = 1.0
    noobj: float = 0.5
    cls: float = 1.0

    def __post_init__(self):
        for name in ("coord", "obj", "noobj", "cls"):
            if getattr(self, name) < 0:
                raise ValueError(f"loss weight {name} must be non-negative")


@dataclass(frozen=True)
class TargetAssignment:
    """One ground-truth box bound to its responsible (scale, cell, anchor) slot.

    tx/ty are the sigmoid-space center offsets within the cell; tw/th the
    log-space size ratios against the anchor prior.
    """

    scale: int
    cell_x: int
    cell_y: int
    anchor: int
    tx: float
    ty: float
    tw: float
    th: float
    class_id: int


@dataclass(frozen=True)
class LossBreakdown:
    localization: float
    confidence: float
    classification: float
    total: float
    weights: LossWeights = field(default_factory=LossWeights)

    def __add__(self, other: "LossBreakdown") -> "LossBreakdown":
        if self.weights != other.weights:
            raise ValueError("cannot add breakdowns with different loss weights")
        return LossBreakdown(
            self.localization + other.localization,
            self.confidence + other.confidence,
            self.classification + other.classification,
            self.total + other.total,
            self.weights,
        )


def assign_targets(labels: Sequence[BoxLabel], anchors: AnchorSet,
                   grid_sizes: Sequence[int]) -> list[TargetAssignment]:
    """Assign each label to the slot whose prior it best matches.

    Slot collisions keep the first label in list order; the losers are logged
    and excluded from the loss.  Degenerate (zero-area) labels are rejected
    with their position.
    """
    flat = anchors.flat()
    assignments: list[TargetAssignment] = []
    taken: dict[tuple[int, int, int, int], int] = {}
    for idx, label in enumerate(labels):
        if label.w <= 0 or label.h <= 0:
            raise ValueError(f"label {idx} has degenerate size ({label.w}, {label.h})")
        shape = BoxShape(label.w, label.h)
        best = max(range(len(flat)),
                   key=lambda i: shape_iou(shape, BoxShape(*flat[i])))
        s, a = divmod(best, ANCHORS_PER_SCALE)
        grid = grid_sizes[s]
        cx = min(int(label.cx * grid), grid - 1)
        cy = min(int(label.cy * grid), grid - 1)
        slot = (s, cx, cy, a)
        if slot in taken:
            log.warning(
                "target collision at scale=%d cell=(%d,%d) anchor=%d: "
                "label %d dropped (label %d holds the slot)",
                s, cx, cy, a, idx, taken[slot],
            )
            continue
        taken[slot] = idx
        pw, ph = flat[best]
        assignments.append(TargetAssignment(
            scale=s, cell_x=cx, cell_y=cy, anchor=a,
            tx=label.cx * grid - cx, ty=label.cy * grid - cy,
            tw=float(np.log(label.w / pw)), th=float(np.log(label.h / ph)),
            class_id=label.class_id,
        ))
    return assignments


def _loss_arrays(pred: GridPrediction, targets: list[TargetAssignment]):
    """Dense masks/targets over the raw (anchor, field, row, col) layout."""
    s, c = pred.grid_size, pred.num_classes
    shape = (1, ANCHORS_PER_SCALE, 5 + c, s, s)
    xy_mask = np.zeros(shape)
    wh_mask = np.zeros(shape)
    coord_tgt = np.zeros(shape)
    obj_mask = np.zeros(shape)
    cls_mask = np.zeros(shape)
    cls_tgt = np.zeros(shape)
    noobj_mask = np.zeros(shape)
    noobj_mask[0, :, 4] = 1.0
    for t in targets:
        if not (0 <= t.cell_x < s and 0 <= t.cell_y < s):
            raise ValueError(
                f"geometry mismatch: target cell ({t.cell_x}, {t.cell_y}) "
                f"outside grid {s}"
            )
        if not 0 <= t.class_id < c:
            raise ValueError(f"geometry mismatch: class {t.class_id} outside {c} classes")
        a, row, col = t.anchor, t.cell_y, t.cell_x
        xy_mask[0, a, 0:2, row, col] = 1.0
        wh_mask[0, a, 2:4, row, col] = 1.0
        coord_tgt[0, a, 0:4, row, col] = (t.tx, t.ty, t.tw, t.th)
        obj_mask[0, a, 4, row, col] = 1.0
        noobj_mask[0, a, 4, row, col] = 0.0
        cls_mask[0, a, 5:, row, col] = 1.0
        cls_tgt[0, a, 5 + t.class_id, row, col] = 1.0
    flat = (1, ANCHORS_PER_SCALE * (5 + c), s, s)
    return tuple(m.reshape(flat) for m in
                 (xy_mask, wh_mask, coord_tgt, obj_mask, noobj_mask, cls_mask, cls_tgt))


def detection_loss_graph(preds: Sequence[GridPrediction],
                         targets: Sequence[TargetAssignment],
                         weights: LossWeights = LossWeights()
                         ) -> tuple[Tensor4, LossBreakdown]:
    """Differentiable total-loss node plus the per-component breakdown."""
    if len(preds) != 3:
        raise ValueError(f"expected 3 grid predictions, got {len(preds)}")
    if sorted(p.scale for p in preds) != [0, 1, 2]:
        raise ValueError("predictions must cover scales 0, 1, 2 exactly once")
    per_scale: dict[int, list[TargetAssignment]] = {0: [], 1: [], 2: []}
    for t in targets:
        if t.scale not in per_scale:
            raise ValueError(f"geometry mismatch: scale {t.scale} out of range")
        per_scale[t.scale].append(t)

    loc_node = conf_node = cls_node = None
    for pred in preds:
        raw = pred.raw
        xy_mask, wh_mask, coord_tgt, obj_mask, noobj_mask, cls_mask, cls_tgt = \
            _loss_arrays(pred, per_scale[pred.scale])

        # center offsets live in sigmoid space, sizes in raw (log-ratio) space
        sig = sigmoid(raw)
        d_xy = add_array(sig, -coord_tgt)
        d_wh = add_array(raw, -coord_tgt)
        loc = add(reduce_sum(mul_array(multiply(d_xy, d_xy), xy_mask)),
                  reduce_sum(mul_array(multiply(d_wh, d_wh), wh_mask)))

        # bce(x, y) = softplus(x) - y*x, stable for both targets
        sp = softplus(raw)
        bce_pos = add(sp, mul_array(raw, -1.0))  # target 1
        conf = add(scale(reduce_sum(mul_array(bce_pos, obj_mask)), weights.obj),
                   scale(reduce_sum(mul_array(sp, noobj_mask)), weights.noobj))

        cls_bce = add(sp, mul_array(raw, -cls_tgt))
        cls = reduce_sum(mul_array(cls_bce, cls_mask))

        loc_node = loc if loc_node is None else add(loc_node, loc)
        conf_node = conf if conf_node is None else add(conf_node, conf)
        cls_node = cls if cls_node is None else add(cls_node, cls)

    total = add(add(scale(loc_node, weights.coord), conf_node),
                scale(cls_node, weights.cls))
    breakdown = LossBreakdown(
        localization=loc_node.item(),
        confidence=conf_node.item(),
        classification=cls_node.item(),
        total=total.item(),
        weights=weights,
    )
    return total, breakdown


def detection_loss(preds: Sequence[GridPrediction], targets: Sequence[TargetAssignment],
                   weights: LossWeights = LossWeights()) -> LossBreakdown:
    return detection_loss_graph(preds, targets, weights)[1]


class SgdMomentum:
    """Plain SGD with momentum over named kernels; frozen kernels are skipped.

    v <- momentum * v + g;  p <- p - lr * v
    """

    def __init__(self, kernels: dict[str, ConvKernel], lr: float, momentum: float = 0.9):
        if lr < 0:
            raise ValueError(f"lr must be non-negative, got {lr}")
        if not 0.0 <= momentum < 1.0:
            raise ValueError(f"momentum must be in [0, 1), got {momentum}")
        self.kernels = dict(kernels)
        self.lr = lr
        self.momentum = momentum
        self._vel: dict[str, tuple[np.ndarray, np.ndarray | None]] = {
            name: (np.zeros_like(k.weight),
                   np.zeros_like(k.bias) if k.bias is not None else None)
            for name, k in self.kernels.items()
        }

    def zero_grad(self) -> None:
        for k in self.kernels.values():
            k.zero_grad()

    def step(self) -> None:
        for name, k in self.kernels.items():
            if k.frozen:
                continue
            vw, vb = self._vel[name]
            if k.gweight is not None:
                vw *= self.momentum
                vw += k.gweight
                k.weight -= self.lr * vw
            if k.bias is not None and k.gbias is not None:
                vb *= self.momentum
                vb += k.gbias
                k.bias -= self.lr * vb


@dataclass(frozen=True)
class FrameBatch:
    """An ordered chunk of frames with labels and their clip ids.

    All clip ids must agree (one chunk never mixes clips); ids of None mark
    flat-shuffled frames, legal only for non-recurrent training.
    """

    frames: tuple[np.ndarray, ...]
    labels: tuple[tuple[BoxLabel, ...], ...]
    clip_ids: tuple[Hashable, ...]

    def __post_init__(self):
        if not self.frames:
            raise ValueError("batch must contain at least one frame")
        if not (len(self.frames) == len(self.labels) == len(self.clip_ids)):
            raise ValueError("frames, labels and clip_ids must align")
        if len(set(self.clip_ids)) > 1:
            raise ValueError(
                f"chunk mixes frames from different clips: {sorted(map(str, set(self.clip_ids)))}"
            )


def train_step(model: Detector, batch: FrameBatch,
               states: list[ConvLSTMState] | None,
               optimizer: SgdMomentum, anchors: AnchorSet,
               weights: LossWeights = LossWeights(),
               rng: np.random.Generator | None = None
               ) -> tuple[list[ConvLSTMState] | None, LossBreakdown]:
    """One optimizer update on a chunk: per-frame losses summed, gradients
    truncated at the chunk boundary, carried states returned detached."""
    if model.config.recurrent and batch.clip_ids[0] is None:
        raise ValueError("recurrent training requires clip-tagged chunks")
    total_node = None
    breakdown: LossBreakdown | None = None
    for frame, frame_labels in zip(batch.frames, batch.labels):
        preds, states = model.forward(frame, states, training=True, rng=rng)
        targets = assign_targets(frame_labels, anchors, model.config.grid_sizes)
        node, bd = detection_loss_graph(preds, targets, weights)
        total_node = node if total_node is None else add(total_node, node)
        breakdown = bd if breakdown is None else breakdown + bd

    optimizer.zero_grad()
    total_node.backward()
    optimizer.step()
    if states is not None:
        states = [s.detach() for s in states]
    return states, breakdown


def port_weights(src: Detector, dst: Detector) -> list[str]:
    """Copy every parameter whose name and shape match; used to initialize a
    recurrent model from a trained non-recurrent one (the recurrent layers
    stay at their fresh initialization).  Returns the ported names."""
    src_kernels = src.named_kernels()
    ported = []
    for name, kn in dst.named_kernels().items():
        other = src_kernels.get(name)
        if other is None or other.weight.shape != kn.weight.shape:
            continue
        kn.weight[...] = other.weight
        if kn.bias is not None and other.bias is not None:
            kn.bias[...] = other.bias
        ported.append(name)
    return sorted(ported)
