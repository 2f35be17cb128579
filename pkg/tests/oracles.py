"""Independent reference implementations used only by the tests.

Nothing here imports the code under test, except for plain data types.
"""

from __future__ import annotations

import math

import numpy as np

LD = np.longdouble


def param_count(in_h, in_w, s, b, c, h):
    """Enumerate layer shapes one by one."""
    shapes = [(in_h * in_w, h), (h,), (h, s * s * (b * 5 + c)), (s * s * (b * 5 + c),)]
    total = 0
    for shape in shapes:
        n = 1
        for d in shape:
            n *= d
        total += n
    return total


def forward_ld(params, image, in_h, in_w, s, b, c, h):
    """Extended-precision forward pass, written out layer by layer."""
    p = np.asarray(params, dtype=LD)
    x = np.asarray(image, dtype=LD).reshape(-1)
    out = s * s * (b * 5 + c)
    n_in = in_h * in_w
    w1 = p[: n_in * h].reshape(n_in, h)
    off = n_in * h
    b1 = p[off : off + h]
    off += h
    w2 = p[off : off + h * out].reshape(h, out)
    off += h * out
    b2 = p[off : off + out]
    z1 = x @ w1 + b1
    a1 = np.where(z1 > 0, z1, LD(0.1) * z1)
    z2 = a1 @ w2 + b2
    return LD(1) / (LD(1) + np.exp(-z2)), z1


def central_difference(f, x, step=1e-4):
    """Central differences of a scalar function over every coordinate."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    for k in range(x.size):
        xp = x.copy()
        xm = x.copy()
        xp[k] += step
        xm[k] -= step
        grad[k] = float((f(xp) - f(xm)) / (LD(xp[k]) - LD(xm[k])))
    return grad


def max_rel_error(a, b, floor=1e-8):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0


def yolo_loss_scalar(pred, truth_targets, s, b, c, lc, lo, ln):
    """Five-term loss evaluated scalar by scalar from nested Python lists.

    ``pred[i][k]`` is cell ``i`` output ``k``. ``truth_targets`` maps
    cell -> (box index, (x, y, w, h), conf target, class id).
    """
    coord = size = cobj = cnoobj = cls = 0.0
    for i in range(s * s):
        for j in range(b):
            xh, yh, wh, hh, ch = pred[i][5 * j : 5 * j + 5]
            t = truth_targets.get(i)
            if t is not None and t[0] == j:
                x, y, w, h = t[1]
                coord += lc * ((x - xh) ** 2 + (y - yh) ** 2)
                size += lc * ((np.sqrt(w) - np.sqrt(wh)) ** 2 + (np.sqrt(h) - np.sqrt(hh)) ** 2)
                cobj += lo * (t[2] - ch) ** 2
            else:
                cnoobj += ln * (0.0 - ch) ** 2
        t = truth_targets.get(i)
        if t is not None:
            for k in range(c):
                p = 1.0 if k == t[3] else 0.0
                cls += (p - pred[i][5 * b + k]) ** 2
    return coord, size, cobj, cnoobj, cls


def iou_corners(a, b):
    """IoU through corner coordinates."""
    ax0, ax1 = a[0] - a[2] / 2, a[0] + a[2] / 2
    ay0, ay1 = a[1] - a[3] / 2, a[1] + a[3] / 2
    bx0, bx1 = b[0] - b[2] / 2, b[0] + b[2] / 2
    by0, by1 = b[1] - b[3] / 2, b[1] + b[3] / 2
    iw = max(0.0, min(ax1, bx1) - max(ax0, bx0))
    ih = max(0.0, min(ay1, by1) - max(ay0, by0))
    inter = iw * ih
    union = a[2] * a[3] + b[2] * b[3] - inter
    return inter / union if union > 0 else 0.0


def assign_oracle(truths, pred, s, b, conf_mode="iou"):
    """cell -> (box, target, conf, class) by floor arithmetic and IoU argmax."""
    out = {}
    for cls, (cx, cy, w, h) in truths:
        col = min(math.floor(cx * s), s - 1)
        row = min(math.floor(cy * s), s - 1)
        cell = row * s + col
        scores = []
        for j in range(b):
            x, y, pw, ph = pred[cell][5 * j : 5 * j + 4]
            scores.append(iou_corners(((col + x) / s, (row + y) / s, pw, ph), (cx, cy, w, h)))
        best = scores.index(max(scores))
        conf = scores[best] if conf_mode == "iou" else 1.0
        out[cell] = (best, (cx * s - col, cy * s - row, w, h), conf, cls)
    return out


def iou_raster(a, b, n=1000):
    """IoU by counting cell centers of an n x n grid covered by each box."""
    centers = (np.arange(n) + 0.5) / n

    def mask(box):
        cx, cy, w, h = box
        mx = (centers >= cx - w / 2) & (centers < cx + w / 2)
        my = (centers >= cy - h / 2) & (centers < cy + h / 2)
        return mx, my

    ax, ay = mask(a)
    bx, by = mask(b)
    inter = int((ax & bx).sum()) * int((ay & by).sum())
    union = int(ax.sum()) * int(ay.sum()) + int(bx.sum()) * int(by.sum()) - inter
    return inter / union if union else 0.0


def ap_exhaustive(per_image, class_id, iou_threshold, iou_fn):
    """AP by re-running greedy matching at every distinct score cutoff.

    ``per_image`` is a list of ``(dets, truths)`` where dets are
    ``(class, score, box)`` tuples and truths are ``(class, box)`` tuples.
    """
    n_gt = sum(1 for _, truths in per_image for t in truths if t[0] == class_id)
    if n_gt == 0:
        return None
    cutoffs = sorted(
        {d[1] for dets, _ in per_image for d in dets if d[0] == class_id}, reverse=True
    )
    points = []
    for cut in cutoffs:
        tp = fp = 0
        for dets, truths in per_image:
            kept = sorted((d for d in dets if d[1] >= cut), key=lambda d: -d[1])
            # ties inside an image keep their listed order, like a stable sort
            used = set()
            for d in kept:
                best, best_v = None, None
                for ti, t in enumerate(truths):
                    if ti in used or t[0] != d[0]:
                        continue
                    v = iou_fn(d[2], t[1])
                    if v >= iou_threshold and (best_v is None or v > best_v):
                        best, best_v = ti, v
                if d[0] != class_id:
                    if best is not None:
                        used.add(best)
                    continue
                if best is None:
                    fp += 1
                else:
                    used.add(best)
                    tp += 1
        points.append((tp / n_gt, tp / (tp + fp)))
    ap = 0.0
    prev = 0.0
    for k, (r, _) in enumerate(points):
        env = max(p for rr, p in points[k:] if rr >= r)
        ap += (r - prev) * env
        prev = r
    return ap
