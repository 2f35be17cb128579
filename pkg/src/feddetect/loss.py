"""Five-term grid detection loss and its gradient.

Terms: center coordinates, square-rooted sizes, object confidence,
no-object confidence, and per-cell class probabilities, all squared
error.  Every term is accumulated in ascending cell, box, class order so
totals are bit-reproducible.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .boxes import cell_box_to_image, iou, owning_cell
from .dataio import GroundTruthObject
from .model import GridPrediction

CONFIDENCE_TARGETS = ("iou", "one")


@dataclass(frozen=True)
class LossWeights:
    lambda_coord: float = 5.0
    lambda_conf_obj: float = 1.0
    lambda_conf_noobj: float = 0.5
    # "iou": confidence target is IoU(pred, truth); "one": constant 1
    confidence_target: str = "iou"

    def __post_init__(self) -> None:
        for name in ("lambda_coord", "lambda_conf_obj", "lambda_conf_noobj"):
            v = getattr(self, name)
            if not math.isfinite(v) or v < 0:
                raise ValueError(f"{name} must be finite and >= 0, got {v}")
        if self.confidence_target not in CONFIDENCE_TARGETS:
            raise ValueError(
                f"confidence_target must be one of {CONFIDENCE_TARGETS}, "
                f"got {self.confidence_target!r}"
            )

    def scaled(self, t: float) -> LossWeights:
        return LossWeights(
            self.lambda_coord * t,
            self.lambda_conf_obj * t,
            self.lambda_conf_noobj * t,
            self.confidence_target,
        )


@dataclass(frozen=True)
class AssignedObject:
    cell: int
    box: int
    target: tuple[float, float, float, float]  # cell-relative x, y; image-relative w, h
    confidence: float
    class_id: int


@dataclass
class TargetAssignment:
    grid_size: int
    boxes_per_cell: int
    objects: list[AssignedObject] = field(default_factory=list)
    obj_mask: np.ndarray | None = None

    def __post_init__(self) -> None:
        if self.obj_mask is None:
            self.obj_mask = np.zeros((self.grid_size**2, self.boxes_per_cell), dtype=bool)

    @property
    def noobj_mask(self) -> np.ndarray:
        return ~self.obj_mask

    def by_cell(self) -> dict[int, AssignedObject]:
        return {a.cell: a for a in self.objects}


@dataclass(frozen=True)
class LossBreakdown:
    coord: float
    size: float
    conf_obj: float
    conf_noobj: float
    classification: float
    total: float

    def as_dict(self) -> dict[str, float]:
        return {
            "coord": self.coord,
            "size": self.size,
            "conf_obj": self.conf_obj,
            "conf_noobj": self.conf_noobj,
            "classification": self.classification,
            "total": self.total,
        }


def _check_box(bbox: Sequence[float]) -> None:
    cx, cy, w, h = bbox
    if not all(math.isfinite(v) for v in bbox):
        raise ValueError(f"non-finite box {tuple(bbox)}")
    if not (0.0 <= cx <= 1.0 and 0.0 <= cy <= 1.0 and 0.0 <= w <= 1.0 and 0.0 <= h <= 1.0):
        raise ValueError(f"box {tuple(bbox)} is outside the unit square")


def assign_targets(
    truth: Sequence[GroundTruthObject],
    prediction: GridPrediction,
    grid_size: int,
    boxes_per_cell: int,
    confidence_target: str = "iou",
) -> TargetAssignment:
    """Pick the responsible predictor for every ground-truth object.

    The owning cell is the one holding the object's center. Within it, the
    box with the highest IoU against the truth is responsible (lowest index
    on ties). Its confidence target is that IoU, or 1 when
    ``confidence_target == "one"``.
    """
    s, nb = grid_size, boxes_per_cell
    if prediction.grid_size != s or prediction.boxes_per_cell != nb:
        raise ValueError("prediction geometry does not match (S, B)")
    assignment = TargetAssignment(s, nb)
    pred_boxes = prediction.boxes
    seen: dict[int, int] = {}
    for k, obj in enumerate(truth):
        _check_box(obj.bbox)
        cx, cy, w, h = (float(v) for v in obj.bbox)
        row, col = owning_cell(cx, cy, s)
        cell = row * s + col
        if cell in seen:
            raise ValueError(f"objects {seen[cell]} and {k} share grid cell {cell}")
        seen[cell] = k

        best_b, best_iou = 0, -1.0
        for b in range(nb):
            px, py, pw, ph, _ = pred_boxes[cell, b]
            v = iou(cell_box_to_image(px, py, pw, ph, row, col, s), (cx, cy, w, h))
            if v > best_iou:
                best_b, best_iou = b, v
        conf = best_iou if confidence_target == "iou" else 1.0
        target = (cx * s - col, cy * s - row, w, h)
        assignment.objects.append(AssignedObject(cell, best_b, target, conf, int(obj.class_id)))
        assignment.obj_mask[cell, best_b] = True
    assignment.objects.sort(key=lambda a: a.cell)
    return assignment


def _evaluate(prediction, assignment, weights, want_grad):
    s2, nb, nc = prediction.values.shape[0], prediction.boxes_per_cell, prediction.num_classes
    if assignment.obj_mask.shape != (s2, nb):
        raise ValueError("assignment geometry does not match prediction")
    vals = prediction.values
    grad = np.zeros_like(vals) if want_grad else None
    by_cell = assignment.by_cell()
    lc, lo, ln = weights.lambda_coord, weights.lambda_conf_obj, weights.lambda_conf_noobj

    coord = size = conf_obj = conf_noobj = cls = 0.0
    for i in range(s2):
        obj = by_cell.get(i)
        for b in range(nb):
            base = b * 5
            px, py, pw, ph, pc = (float(v) for v in vals[i, base : base + 5])
            if obj is not None and obj.box == b:
                x, y, w, h = obj.target
                if w < 0 or h < 0:
                    raise ValueError(f"negative size target {(w, h)} in cell {i}")
                dx, dy = x - px, y - py
                coord += lc * (dx * dx + dy * dy)
                sw, sh = math.sqrt(w) - math.sqrt(pw), math.sqrt(h) - math.sqrt(ph)
                size += lc * (sw * sw + sh * sh)
                dc = obj.confidence - pc
                conf_obj += lo * dc * dc
                if want_grad:
                    grad[i, base] = -2.0 * lc * dx
                    grad[i, base + 1] = -2.0 * lc * dy
                    grad[i, base + 2] = -lc * sw / math.sqrt(pw)
                    grad[i, base + 3] = -lc * sh / math.sqrt(ph)
                    grad[i, base + 4] = -2.0 * lo * dc
            else:
                conf_noobj += ln * pc * pc
                if want_grad:
                    grad[i, base + 4] = 2.0 * ln * pc
        if obj is not None:
            off = nb * 5
            for c in range(nc):
                p = 1.0 if c == obj.class_id else 0.0
                dp = p - float(vals[i, off + c])
                cls += dp * dp
                if want_grad:
                    grad[i, off + c] = -2.0 * dp
    total = coord + size + conf_obj + conf_noobj + cls
    return LossBreakdown(coord, size, conf_obj, conf_noobj, cls, total), grad


def loss(
    prediction: GridPrediction,
    assignment: TargetAssignment,
    weights: LossWeights,
) -> LossBreakdown:
    return _evaluate(prediction, assignment, weights, want_grad=False)[0]


def loss_grad(
    prediction: GridPrediction,
    assignment: TargetAssignment,
    weights: LossWeights,
) -> np.ndarray:
    """Gradient of the total loss w.r.t. ``prediction.values``, assignment held fixed."""
    return _evaluate(prediction, assignment, weights, want_grad=True)[1]


def loss_and_grad(
    prediction: GridPrediction,
    assignment: TargetAssignment,
    weights: LossWeights,
) -> tuple[LossBreakdown, np.ndarray]:
    return _evaluate(prediction, assignment, weights, want_grad=True)
