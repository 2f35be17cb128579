"""Box helpers. Boxes are ``(cx, cy, w, h)`` in normalized image units."""

from __future__ import annotations

from typing import Sequence

Box = Sequence[float]


def iou(a: Box, b: Box) -> float:
    """Intersection over union; 0 for disjoint or zero-area boxes."""
    ax, ay, aw, ah = (float(v) for v in a)
    bx, by, bw, bh = (float(v) for v in b)
    if aw <= 0 or ah <= 0 or bw <= 0 or bh <= 0:
        return 0.0
    ax0, ax1, ay0, ay1 = ax - aw / 2, ax + aw / 2, ay - ah / 2, ay + ah / 2
    bx0, bx1, by0, by1 = bx - bw / 2, bx + bw / 2, by - bh / 2, by + bh / 2
    iw = min(ax1, bx1) - max(ax0, bx0)
    ih = min(ay1, by1) - max(ay0, by0)
    if iw <= 0 or ih <= 0:
        return 0.0
    # areas from the same corners, so identical boxes give exactly 1
    inter = iw * ih
    union = (ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter
    return min(1.0, max(0.0, inter / union))


def owning_cell(cx: float, cy: float, grid_size: int) -> tuple[int, int]:
    """(row, col) of the grid cell containing a center; the far edge folds inward."""
    col = min(int(cx * grid_size), grid_size - 1)
    row = min(int(cy * grid_size), grid_size - 1)
    return row, col


def cell_box_to_image(x: float, y: float, w: float, h: float, row: int, col: int, grid_size: int):
    """Convert cell-relative center offsets to an image-normalized box."""
    return ((col + x) / grid_size, (row + y) / grid_size, w, h)
