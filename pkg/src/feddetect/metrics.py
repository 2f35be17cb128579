"""Detection evaluation: decoding, matching, P/R/F1 curves, AP tables, confusion.

Per-image evaluation inputs are ``(detections, truths)`` pairs, where
``truths`` is a list of :class:`~feddetect.dataio.GroundTruthObject`.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .boxes import iou
from .dataio import CLASS_NAMES, GroundTruthObject, Sample
from .model import GridPrediction, ModelConfig, forward_batch

THRESHOLDS = np.round(np.arange(101) * 0.01, 2)
IOU_LADDER = tuple(round(0.5 + 0.05 * k, 2) for k in range(10))


@dataclass(frozen=True)
class Detection:
    class_id: int
    score: float
    bbox: tuple[float, float, float, float]
    cell: int = 0


ImageEval = tuple[Sequence[Detection], Sequence[GroundTruthObject]]


def decode(
    prediction: GridPrediction,
    conf_threshold: float = 0.25,
    nms_iou: float = 0.45,
) -> list[Detection]:
    """Turn a grid prediction into scored, class-wise NMS-filtered boxes."""
    if not 0.0 <= conf_threshold <= 1.0:
        raise ValueError(f"conf_threshold must be in [0, 1], got {conf_threshold}")
    s = prediction.grid_size
    boxes, probs = prediction.boxes, prediction.class_probs
    cands = []
    for i in range(s * s):
        row, col = divmod(i, s)
        cls = int(np.argmax(probs[i]))
        pmax = float(probs[i, cls])
        for b in range(prediction.boxes_per_cell):
            x, y, w, h, conf = (float(v) for v in boxes[i, b])
            score = conf * pmax
            if score >= conf_threshold:
                cands.append(Detection(cls, score, ((col + x) / s, (row + y) / s, w, h), i))
    cands.sort(key=lambda d: (-d.score, d.cell))
    kept: list[Detection] = []
    for det in cands:
        if all(k.class_id != det.class_id or iou(k.bbox, det.bbox) <= nms_iou for k in kept):
            kept.append(det)
    return kept


@dataclass
class MatchResult:
    pairs: list[tuple[int, int, float]] = field(default_factory=list)  # (det, truth, iou)
    unmatched_detections: list[int] = field(default_factory=list)
    unmatched_truths: list[int] = field(default_factory=list)

    def tp_flags(self, n_detections: int) -> np.ndarray:
        flags = np.zeros(n_detections, dtype=bool)
        for d, _, _ in self.pairs:
            flags[d] = True
        return flags


def match(
    detections: Sequence[Detection],
    truths: Sequence[GroundTruthObject],
    iou_threshold: float = 0.5,
) -> MatchResult:
    """Greedy same-class matching in detection order (callers sort by score)."""
    result = MatchResult()
    taken = [False] * len(truths)
    for d, det in enumerate(detections):
        best, best_iou = -1, iou_threshold
        for t, gt in enumerate(truths):
            if taken[t] or gt.class_id != det.class_id:
                continue
            v = iou(det.bbox, gt.bbox)
            if v >= best_iou and (best < 0 or v > best_iou):
                best, best_iou = t, v
        if best >= 0:
            taken[best] = True
            result.pairs.append((d, best, best_iou))
        else:
            result.unmatched_detections.append(d)
    result.unmatched_truths = [t for t in range(len(truths)) if not taken[t]]
    return result


def precision_recall_f1(tp: float, fp: float, fn: float) -> tuple[float, float, float]:
    p = tp / (tp + fp) if tp + fp > 0 else 0.0
    r = tp / (tp + fn) if tp + fn > 0 else 0.0
    f1 = 2 * p * r / (p + r) if p + r > 0 else 0.0
    return p, r, f1


def _sorted(dets: Sequence[Detection]) -> list[Detection]:
    return sorted(dets, key=lambda d: -d.score)


def _pooled(per_image: Sequence[ImageEval], iou_threshold: float):
    """Flatten all detections with their TP flags and per-class truth counts."""
    classes, scores, tps = [], [], []
    n_truth: dict[int, int] = {}
    for dets, truths in per_image:
        dets = _sorted(dets)
        flags = match(dets, truths, iou_threshold).tp_flags(len(dets))
        for det, flag in zip(dets, flags):
            classes.append(det.class_id)
            scores.append(det.score)
            tps.append(bool(flag))
        for gt in truths:
            n_truth[gt.class_id] = n_truth.get(gt.class_id, 0) + 1
    return np.array(classes, dtype=int), np.array(scores, dtype=float), np.array(tps, dtype=bool), n_truth


@dataclass
class CurveSeries:
    """Values per class (rows) and pooled ``all`` over an ascending x-axis."""

    x: np.ndarray
    per_class: np.ndarray  # (C, len(x))
    all: np.ndarray
    x_name: str = "threshold"

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow([self.x_name] + [f"class_{c}" for c in range(len(self.per_class))] + ["all"])
        for k, xv in enumerate(self.x):
            writer.writerow(
                [f"{xv:.2f}"] + [f"{v:.6f}" for v in self.per_class[:, k]] + [f"{self.all[k]:.6f}"]
            )
        return buf.getvalue()


@dataclass
class Curves:
    precision: CurveSeries
    recall: CurveSeries
    f1: CurveSeries
    pr: CurveSeries


def _envelope(precision: np.ndarray) -> np.ndarray:
    return np.maximum.accumulate(precision[::-1])[::-1]


def _pr_points(scores, tps, n_gt):
    """(recall, precision) at every distinct score cutoff, descending score."""
    if scores.size == 0 or n_gt == 0:
        return np.zeros(0), np.zeros(0)
    order = np.argsort(-scores, kind="stable")
    s, hit = scores[order], tps[order]
    ctp = np.cumsum(hit)
    cfp = np.cumsum(~hit)
    last = np.append(s[1:] != s[:-1], True)  # end of each tie group
    ctp, cfp = ctp[last], cfp[last]
    return ctp / n_gt, ctp / (ctp + cfp)


def curves(
    per_image: Sequence[ImageEval],
    num_classes: int = 3,
    iou_threshold: float = 0.5,
) -> Curves:
    """P, R, F1 against confidence thresholds 0.00..1.00 and the PR curve.

    Greedy matching is sequential in score order, so raising the threshold
    keeps a prefix of the full match; one matching pass serves every cutoff.
    The PR curve is sampled on a 0.00..1.00 recall grid with the precision
    envelope.
    """
    cls, scores, tps, n_truth = _pooled(per_image, iou_threshold)
    nt = len(THRESHOLDS)
    tp = np.zeros((num_classes, nt))
    fp = np.zeros((num_classes, nt))
    gt = np.array([n_truth.get(c, 0) for c in range(num_classes)], dtype=float)
    for c in range(num_classes):
        sel = cls == c
        s_c, t_c = scores[sel], tps[sel]
        kept = s_c[None, :] >= THRESHOLDS[:, None]
        tp[c] = (kept & t_c[None, :]).sum(axis=1)
        fp[c] = (kept & ~t_c[None, :]).sum(axis=1)

    def prf(tp_, fp_, gt_):
        fn_ = gt_ - tp_
        out = np.array([precision_recall_f1(a, b, f) for a, b, f in zip(tp_, fp_, fn_)])
        return out[:, 0], out[:, 1], out[:, 2]

    per = [prf(tp[c], fp[c], np.full(nt, gt[c])) for c in range(num_classes)]
    allp, allr, allf = prf(tp.sum(axis=0), fp.sum(axis=0), np.full(nt, gt.sum()))

    grid = THRESHOLDS
    pr_rows = []
    for c in range(num_classes + 1):
        if c < num_classes:
            sel = cls == c
            rec, prec = _pr_points(scores[sel], tps[sel], gt[c])
        else:
            rec, prec = _pr_points(scores, tps, gt.sum())
        env = _envelope(prec) if prec.size else prec
        row = np.zeros(grid.size)
        for k, r in enumerate(grid):
            idx = np.searchsorted(rec, r - 1e-12, side="left")
            row[k] = env[idx] if idx < env.size else 0.0
        pr_rows.append(row)

    def series(values, allv, name="threshold"):
        return CurveSeries(grid.copy(), np.array(values).reshape(num_classes, nt), np.asarray(allv), name)

    return Curves(
        precision=series([p[0] for p in per], allp),
        recall=series([p[1] for p in per], allr),
        f1=series([p[2] for p in per], allf),
        pr=series(pr_rows[:num_classes], pr_rows[num_classes], "recall"),
    )


def average_precision(
    per_image: Sequence[ImageEval],
    class_id: int,
    iou_threshold: float = 0.5,
    interpolation: str = "continuous",
) -> float | None:
    """Area under the precision envelope for one class; ``None`` without truths.

    Tied scores enter the curve together as one cutoff. ``interpolation``
    is ``"continuous"`` (exact envelope area) or ``"11point"``.
    """
    cls, scores, tps, n_truth = _pooled(per_image, iou_threshold)
    n_gt = n_truth.get(class_id, 0)
    if n_gt == 0:
        return None
    sel = cls == class_id
    rec, prec = _pr_points(scores[sel], tps[sel], n_gt)
    if rec.size == 0:
        return 0.0
    env = _envelope(prec)
    if interpolation == "11point":
        pts = []
        for r in np.linspace(0.0, 1.0, 11):
            idx = np.searchsorted(rec, r - 1e-12, side="left")
            pts.append(env[idx] if idx < env.size else 0.0)
        return float(np.mean(pts))
    if interpolation != "continuous":
        raise ValueError(f"unknown interpolation {interpolation!r}")
    ap = 0.0
    prev = 0.0
    for r, p in zip(rec, env):
        ap += (r - prev) * p
        prev = r
    return float(ap)


@dataclass(frozen=True)
class ClassAPRow:
    name: str
    images: int
    precision: float
    recall: float
    map50: float | None
    map50_95: float | None

    @property
    def flagged(self) -> bool:
        return self.map50 is None

    def as_dict(self) -> dict:
        return {
            "class": self.name,
            "images": self.images,
            "precision": self.precision,
            "recall": self.recall,
            "mAP50": self.map50,
            "mAP50-95": self.map50_95,
        }


def best_f1_threshold(c: Curves) -> float:
    k = int(np.argmax(c.f1.all))  # first (lowest) threshold on ties
    return float(c.f1.x[k])


def map_table(
    per_image: Sequence[ImageEval],
    num_classes: int = 3,
    class_names: Sequence[str] = CLASS_NAMES,
    interpolation: str = "continuous",
) -> list[ClassAPRow]:
    """Rows shaped like ``Class Images Box(P) R mAP50 mAP50-95``; ``All`` first.

    Box(P) and R are read at the confidence threshold that maximizes pooled
    F1 at IoU 0.5. The ``All`` row is the unweighted class mean; classes
    without ground truth get ``None`` APs and are left out of that mean.
    """
    c50 = curves(per_image, num_classes, 0.5)
    k = int(np.argmax(c50.f1.all))
    rows = []
    for c in range(num_classes):
        images = sum(1 for _, truths in per_image if any(t.class_id == c for t in truths))
        ap50 = average_precision(per_image, c, 0.5, interpolation)
        if ap50 is None:
            ap_range = None
        else:
            ap_range = float(
                np.mean([average_precision(per_image, c, t, interpolation) for t in IOU_LADDER])
            )
        rows.append(
            ClassAPRow(
                class_names[c] if c < len(class_names) else f"class_{c}",
                images,
                float(c50.precision.per_class[c, k]),
                float(c50.recall.per_class[c, k]),
                ap50,
                ap_range,
            )
        )
    defined = [r for r in rows if not r.flagged]

    def mean(vals):
        return float(np.mean(vals)) if vals else None

    all_row = ClassAPRow(
        "all",
        len(per_image),
        mean([r.precision for r in defined]) or 0.0,
        mean([r.recall for r in defined]) or 0.0,
        mean([r.map50 for r in defined]),
        mean([r.map50_95 for r in defined]),
    )
    return [all_row] + rows


def table_csv(rows: Sequence[ClassAPRow]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["Class", "Images", "Box(P)", "R", "mAP50", "mAP50-95"])
    for r in rows:
        writer.writerow(
            [r.name, r.images]
            + ["" if v is None else f"{v:.6f}" for v in (r.precision, r.recall, r.map50, r.map50_95)]
        )
    return buf.getvalue()


def table_text(rows: Sequence[ClassAPRow]) -> str:
    lines = [f"{'Class':<12}{'Images':>8}{'Box(P)':>9}{'R':>8}{'mAP50':>9}{'mAP50-95':>10}"]
    for r in rows:
        vals = ["   n/a" if v is None else f"{v:.3f}" for v in (r.precision, r.recall, r.map50, r.map50_95)]
        lines.append(
            f"{r.name.capitalize():<12}{r.images:>8}{vals[0]:>9}{vals[1]:>8}{vals[2]:>9}{vals[3]:>10}"
        )
    return "\n".join(lines) + "\n"


@dataclass
class ConfusionMatrix:
    counts: np.ndarray  # (C+1, C+1); rows truth, columns prediction, last = background
    matched: int = 0
    unmatched_truths: int = 0
    unmatched_detections: int = 0

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def accuracy(self) -> float:
        total = self.total
        return float(np.trace(self.counts)) / total if total else 0.0

    def to_csv(self, class_names: Sequence[str] | None = None) -> str:
        c = self.counts.shape[0] - 1
        names = list(class_names or [f"class_{k}" for k in range(c)])[:c] + ["background"]
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["truth\\pred"] + names)
        for name, row in zip(names, self.counts):
            writer.writerow([name] + [int(v) for v in row])
        return buf.getvalue()


def confusion(
    per_image: Sequence[ImageEval],
    num_classes: int = 3,
    iou_threshold: float = 0.45,
    conf_threshold: float = 0.25,
) -> ConfusionMatrix:
    """Class-agnostic matching (highest IoU first) so mislabels land off-diagonal."""
    bg = num_classes
    cm = ConfusionMatrix(np.zeros((num_classes + 1, num_classes + 1), dtype=np.int64))
    for dets, truths in per_image:
        dets = [d for d in _sorted(dets) if d.score >= conf_threshold]
        pairs = []
        for d, det in enumerate(dets):
            for t, gt in enumerate(truths):
                v = iou(det.bbox, gt.bbox)
                if v >= iou_threshold:
                    pairs.append((-v, d, t))
        pairs.sort()
        used_d, used_t = set(), set()
        for _, d, t in pairs:
            if d in used_d or t in used_t:
                continue
            used_d.add(d)
            used_t.add(t)
            cm.counts[truths[t].class_id, dets[d].class_id] += 1
            cm.matched += 1
        for t, gt in enumerate(truths):
            if t not in used_t:
                cm.counts[gt.class_id, bg] += 1
                cm.unmatched_truths += 1
        for d, det in enumerate(dets):
            if d not in used_d:
                cm.counts[bg, det.class_id] += 1
                cm.unmatched_detections += 1
    return cm


# --------------------------------------------------------------------------
# end-to-end evaluation of a parameter vector
# --------------------------------------------------------------------------


@dataclass
class MetricsReport:
    rows: list[ClassAPRow]
    curves: Curves
    confusion: ConfusionMatrix
    best_threshold: float

    @property
    def map50(self) -> float | None:
        return self.rows[0].map50

    @property
    def map50_95(self) -> float | None:
        return self.rows[0].map50_95


def predict(
    params: np.ndarray,
    samples: Sequence[Sample],
    model_cfg: ModelConfig,
    conf_threshold: float = 0.001,
    nms_iou: float = 0.45,
    batch_size: int = 256,
) -> list[ImageEval]:
    out: list[ImageEval] = []
    for start in range(0, len(samples), batch_size):
        chunk = samples[start : start + batch_size]
        preds = forward_batch(params, np.stack([s.image for s in chunk]), model_cfg)
        for s, p in zip(chunk, preds):
            grid = GridPrediction(p, model_cfg.grid_size, model_cfg.boxes_per_cell, model_cfg.num_classes)
            out.append((decode(grid, conf_threshold, nms_iou), list(s.objects)))
    return out


def evaluate(
    params: np.ndarray,
    samples: Sequence[Sample],
    model_cfg: ModelConfig,
    class_names: Sequence[str] = CLASS_NAMES,
    conf_threshold: float = 0.001,
    nms_iou: float = 0.45,
    confusion_iou: float = 0.45,
    confusion_conf: float = 0.25,
) -> MetricsReport:
    per_image = predict(params, samples, model_cfg, conf_threshold, nms_iou)
    c = model_cfg.num_classes
    cv = curves(per_image, c, 0.5)
    return MetricsReport(
        rows=map_table(per_image, c, class_names),
        curves=cv,
        confusion=confusion(per_image, c, confusion_iou, confusion_conf),
        best_threshold=best_f1_threshold(cv),
    )
