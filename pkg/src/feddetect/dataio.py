"""Datasets: synthetic tumor scans, P5 directories, preprocessing, splits.

Images are float64 arrays in [0, 1]. Ground-truth boxes are
``(cx, cy, w, h)`` normalized to the image.
"""

from __future__ import annotations

import json
import math
import os
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .boxes import owning_cell

CLASS_NAMES = ("glioma", "meningioma", "pituitary")
AUGMENTATIONS = ("rot90", "rot180", "rot270", "fliph", "flipv")


@dataclass(frozen=True)
class GroundTruthObject:
    class_id: int
    bbox: tuple[float, float, float, float]

    def __post_init__(self) -> None:
        object.__setattr__(self, "bbox", tuple(float(v) for v in self.bbox))
        validate_box(self.bbox)

    def with_bbox(self, bbox) -> GroundTruthObject:
        return GroundTruthObject(self.class_id, tuple(bbox))


def validate_box(bbox: Sequence[float]) -> None:
    if len(bbox) != 4:
        raise ValueError(f"box needs 4 values, got {len(bbox)}")
    cx, cy, w, h = bbox
    if not all(math.isfinite(v) for v in bbox):
        raise ValueError(f"box {tuple(bbox)} has non-finite values")
    if not (0.0 < w <= 1.0 and 0.0 < h <= 1.0):
        raise ValueError(f"box {tuple(bbox)} has size outside (0, 1]")
    # small slack absorbs decimal rounding in label files
    eps = 1e-9
    if cx - w / 2 < -eps or cx + w / 2 > 1 + eps or cy - h / 2 < -eps or cy + h / 2 > 1 + eps:
        raise ValueError(f"box {tuple(bbox)} extends outside the image")


@dataclass
class Sample:
    image: np.ndarray
    objects: list[GroundTruthObject] = field(default_factory=list)
    name: str = ""

    def class_key(self) -> int:
        """Class of the first object, -1 for empty images (used for stratifying)."""
        return self.objects[0].class_id if self.objects else -1

    def validate(self, grid_size: int | None = None, num_classes: int | None = None) -> None:
        img = self.image
        if img.ndim != 2:
            raise ValueError(f"sample {self.name!r}: image must be 2-D, got {img.shape}")
        if not np.all(np.isfinite(img)) or img.min(initial=0.0) < 0 or img.max(initial=0.0) > 1:
            raise ValueError(f"sample {self.name!r}: pixels must lie in [0, 1]")
        cells = set()
        for obj in self.objects:
            validate_box(obj.bbox)
            if num_classes is not None and not 0 <= obj.class_id < num_classes:
                raise ValueError(
                    f"sample {self.name!r}: class {obj.class_id} out of range [0, {num_classes})"
                )
            if grid_size is not None:
                cell = owning_cell(obj.bbox[0], obj.bbox[1], grid_size)
                if cell in cells:
                    raise ValueError(f"sample {self.name!r}: two objects share grid cell {cell}")
                cells.add(cell)


# --------------------------------------------------------------------------
# synthetic generation
# --------------------------------------------------------------------------


def _blob_field(cls: int, size: int, rng: np.random.Generator, yy, xx, center):
    """Noise-free intensity of one lesion."""
    cx, cy = center
    if cls == 0:
        # glioma: diffuse and irregular, several overlapping lobes
        f = np.zeros((size, size))
        base = rng.uniform(0.075, 0.095)
        for k in range(4):
            ox, oy = (0.0, 0.0) if k == 0 else rng.normal(0.0, base * 0.6, size=2)
            sx, sy = base * rng.uniform(0.7, 1.1, size=2)
            f += rng.uniform(0.6, 1.0) * np.exp(
                -(((xx - cx - ox) / sx) ** 2 + ((yy - cy - oy) / sy) ** 2) / 2
            )
        f *= 0.45 / f.max()
    elif cls == 1:
        # meningioma: compact bright disc with a sharp rim
        r = rng.uniform(0.08, 0.105)
        d = np.sqrt((xx - cx) ** 2 + (yy - cy) ** 2)
        f = 0.8 / (1.0 + np.exp((d - r) / 0.006))
    else:
        # pituitary: small roundish blob
        s = rng.uniform(0.042, 0.05)
        f = 0.65 * np.exp(-(((xx - cx) / s) ** 2 + ((yy - cy) / (s * 0.85)) ** 2) / 2)
    return f


def _tight_box(mask: np.ndarray) -> tuple[float, float, float, float]:
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    h, w = mask.shape
    x0, x1 = cols[0] / w, (cols[-1] + 1) / w
    y0, y1 = rows[0] / h, (rows[-1] + 1) / h
    return ((x0 + x1) / 2, (y0 + y1) / 2, x1 - x0, y1 - y0)


def _draw_center(cls: int, rng: np.random.Generator, anywhere: bool = False) -> tuple[float, float]:
    if cls == 2 and not anywhere:
        return rng.uniform(0.42, 0.58), rng.uniform(0.62, 0.74)
    # keep the lesion inside the skull ellipse
    while True:
        cx, cy = rng.uniform(0.22, 0.78, size=2)
        if ((cx - 0.5) / 0.3) ** 2 + ((cy - 0.5) / 0.32) ** 2 <= 1.0:
            return cx, cy


def generate_synthetic(
    count: int,
    image_size: int = 64,
    class_mix: Sequence[float] = (1 / 3, 1 / 3, 1 / 3),
    seed: int = 0,
    objects_per_image: int | tuple[int, int] = 1,
    grid_size: int = 2,
) -> list[Sample]:
    """Render ``count`` synthetic axial slices with lesion boxes.

    Each slice has a noisy dark background, an elliptical skull band, soft
    brain tissue, and one lesion per object. Lesion appearance depends on
    its class. Boxes enclose the region at or above half the lesion's peak
    intensity, snapped to pixel edges. Pixels are quantized to multiples of
    1/255 so images survive an 8-bit P5 round trip unchanged.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    mix = np.asarray(class_mix, dtype=np.float64)
    if mix.shape != (len(CLASS_NAMES),) or np.any(mix < 0) or abs(mix.sum() - 1.0) > 1e-9:
        raise ValueError(f"class_mix must be {len(CLASS_NAMES)} proportions summing to 1")
    lo, hi = (
        (objects_per_image, objects_per_image)
        if isinstance(objects_per_image, int)
        else tuple(objects_per_image)
    )
    if lo < 0 or hi < lo:
        raise ValueError(f"bad objects_per_image range {(lo, hi)}")
    if image_size < 16 or hi > grid_size * grid_size:
        raise ValueError(
            f"cannot place {hi} lesions with one per cell on a {image_size}px, "
            f"{grid_size}x{grid_size} grid"
        )

    rng = np.random.default_rng(seed)
    coords = (np.arange(image_size) + 0.5) / image_size
    yy, xx = np.meshgrid(coords, coords, indexing="ij")
    ring = ((xx - 0.5) / 0.44) ** 2 + ((yy - 0.5) / 0.47) ** 2
    samples = []
    for n in range(count):
        img = 0.04 + rng.normal(0.0, 0.015, size=(image_size, image_size))
        img += 0.5 * np.exp(-(((np.sqrt(ring) - 1.0) / 0.05) ** 2))
        tissue = ring < 0.9
        img[tissue] += 0.16 + 0.03 * np.sin(9 * xx[tissue] + rng.uniform(0, 6)) * np.cos(
            7 * yy[tissue]
        )

        k = int(rng.integers(lo, hi + 1))
        classes = rng.choice(len(CLASS_NAMES), size=k, p=mix)
        objects: list[GroundTruthObject] = []
        used: set[tuple[int, int]] = set()
        for cls in classes:
            for _attempt in range(200):
                # crowded images may need a lesion away from its usual site
                center = _draw_center(int(cls), rng, anywhere=_attempt >= 50)
                f = _blob_field(int(cls), image_size, rng, yy, xx, center)
                box = _tight_box(f >= 0.5 * f.max())
                cell = owning_cell(box[0], box[1], grid_size)
                if cell not in used:
                    break
            else:
                raise ValueError("could not place lesions with one object per grid cell")
            used.add(cell)
            img += f
            objects.append(GroundTruthObject(int(cls), box))
        img = np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0
        samples.append(Sample(img, objects, name=f"synth_{n:05d}"))
    return samples


# --------------------------------------------------------------------------
# P5 + label directories
# --------------------------------------------------------------------------


def read_pgm(path: str | os.PathLike) -> np.ndarray:
    """Read a binary (P5) portable graymap into floats in [0, 1]."""
    data = Path(path).read_bytes()
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError(f"{path}: truncated PGM header")
        tokens.append(data[start:pos])
    if tokens[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM (magic {tokens[0]!r})")
    width, height, maxval = (int(t) for t in tokens[1:])
    if not 0 < maxval < 65536:
        raise ValueError(f"{path}: bad maxval {maxval}")
    pos += 1  # single whitespace byte after maxval
    dtype = np.dtype(np.uint8) if maxval < 256 else np.dtype(">u2")
    need = width * height * dtype.itemsize
    raw = data[pos : pos + need]
    if len(raw) != need:
        raise ValueError(f"{path}: truncated pixel data ({len(raw)} of {need} bytes)")
    pixels = np.frombuffer(raw, dtype=dtype).reshape(height, width).astype(np.float64)
    return np.clip(pixels / maxval, 0.0, 1.0)


def write_pgm(path: str | os.PathLike, image: np.ndarray) -> None:
    """Write 8-bit P5, or 16-bit when the pixels are not multiples of 1/255."""
    img = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    h, w = img.shape
    maxval = 255 if np.array_equal(np.round(img * 255.0) / 255.0, img) else 65535
    dtype = np.uint8 if maxval == 255 else np.dtype(">u2")
    pixels = np.round(img * maxval).astype(dtype)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n{maxval}\n".encode("ascii"))
        fh.write(pixels.tobytes())


def parse_label_file(path: str | os.PathLike, num_classes: int = 3) -> list[GroundTruthObject]:
    objects = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 5:
                raise ValueError(f"{path}:{lineno}: expected 'class cx cy w h', got {line.strip()!r}")
            try:
                cls = int(parts[0])
                box = tuple(float(p) for p in parts[1:])
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from None
            if not 0 <= cls < num_classes:
                raise ValueError(f"{path}:{lineno}: class {cls} out of range [0, {num_classes})")
            try:
                objects.append(GroundTruthObject(cls, box))
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from None
    return objects


def load_directory(
    path: str | os.PathLike,
    num_classes: int = 3,
    grid_size: int | None = None,
) -> list[Sample]:
    """Load every ``*.pgm`` in ``path`` with its sibling ``<stem>.txt`` labels."""
    root = Path(path)
    if not root.is_dir():
        raise FileNotFoundError(f"{root} is not a directory")
    samples = []
    for img_path in sorted(root.glob("*.pgm")):
        label_path = img_path.with_suffix(".txt")
        if label_path.exists():
            objects = parse_label_file(label_path, num_classes)
        else:
            warnings.warn(f"{img_path.name}: no label file, assuming no objects", stacklevel=2)
            objects = []
        sample = Sample(read_pgm(img_path), objects, name=img_path.stem)
        sample.validate(grid_size=grid_size, num_classes=num_classes)
        samples.append(sample)
    return samples


def write_directory(samples: Iterable[Sample], path: str | os.PathLike) -> list[Path]:
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    written = []
    for n, sample in enumerate(samples):
        stem = sample.name or f"img_{n:05d}"
        write_pgm(root / f"{stem}.pgm", sample.image)
        lines = [
            " ".join([str(o.class_id)] + [repr(float(v)) for v in o.bbox]) for o in sample.objects
        ]
        (root / f"{stem}.txt").write_text("".join(line + "\n" for line in lines), encoding="utf-8")
        written.append(root / f"{stem}.pgm")
    return written


# --------------------------------------------------------------------------
# preprocessing
# --------------------------------------------------------------------------


def resize_nearest(image: np.ndarray, target_size: tuple[int, int]) -> np.ndarray:
    th, tw = target_size
    h, w = image.shape
    if (h, w) == (th, tw):
        return image.copy()
    rows = (np.arange(th) * h) // th
    cols = (np.arange(tw) * w) // tw
    return image[rows[:, None], cols[None, :]]


def _augment_box(op: str, box):
    cx, cy, w, h = box
    if op == "fliph":
        return (1.0 - cx, cy, w, h)
    if op == "flipv":
        return (cx, 1.0 - cy, w, h)
    if op == "rot90":  # clockwise
        return (1.0 - cy, cx, h, w)
    if op == "rot180":
        return (1.0 - cx, 1.0 - cy, w, h)
    if op == "rot270":
        return (cy, 1.0 - cx, h, w)
    raise ValueError(f"unknown augmentation {op!r}")


def _augment_image(op: str, image: np.ndarray) -> np.ndarray:
    if op == "fliph":
        return image[:, ::-1].copy()
    if op == "flipv":
        return image[::-1, :].copy()
    if op == "rot90":
        return np.rot90(image, k=-1).copy()
    if op == "rot180":
        return np.rot90(image, k=2).copy()
    if op == "rot270":
        return np.rot90(image, k=1).copy()
    raise ValueError(f"unknown augmentation {op!r}")


def augment(sample: Sample, op: str) -> Sample:
    objects = [o.with_bbox(_augment_box(op, o.bbox)) for o in sample.objects]
    name = f"{sample.name}_{op}" if sample.name else op
    return Sample(_augment_image(op, sample.image), objects, name=name)


def preprocess(
    sample: Sample,
    target_size: tuple[int, int] | int,
    augment_ops: Iterable[str] = (),
) -> list[Sample]:
    """Resize (nearest neighbour) then append one sample per augmentation.

    The resized original always comes first; augmentations follow in the
    fixed order of ``AUGMENTATIONS``.
    """
    if isinstance(target_size, int):
        target_size = (target_size, target_size)
    ops = set(augment_ops)
    unknown = ops - set(AUGMENTATIONS)
    if unknown:
        raise ValueError(f"unknown augmentations {sorted(unknown)}")
    img = np.clip(resize_nearest(np.asarray(sample.image, dtype=np.float64), target_size), 0, 1)
    base = Sample(img, list(sample.objects), name=sample.name)
    return [base] + [augment(base, op) for op in AUGMENTATIONS if op in ops]


# --------------------------------------------------------------------------
# splitting and partitioning
# --------------------------------------------------------------------------


def split_train_test(
    samples: Sequence[Sample],
    fraction: float = 0.8,
    seed: int = 0,
) -> tuple[list[Sample], list[Sample]]:
    """Stratified shuffled split with ``ceil(fraction * n)`` training samples.

    Samples are spread evenly within their class (first object's class) and
    the head of the merged ordering goes to training, so every class keeps
    roughly the requested ratio.
    """
    n = len(samples)
    if n < 2:
        raise ValueError("need at least two samples to split")
    if not 0.0 < fraction < 1.0:
        raise ValueError(f"fraction must be in (0, 1), got {fraction}")
    n_train = min(n - 1, max(1, math.ceil(fraction * n - 1e-9)))
    rng = np.random.default_rng(seed)
    perm = rng.permutation(n)
    keys = np.array([samples[i].class_key() for i in perm])
    position = np.empty(n)
    for cls in np.unique(keys):
        idx = np.flatnonzero(keys == cls)
        position[idx] = (np.arange(idx.size) + 0.5) / idx.size
    order = perm[np.lexsort((np.arange(n), position))]
    train = sorted(order[:n_train].tolist())
    test = sorted(order[n_train:].tolist())
    return [samples[i] for i in train], [samples[i] for i in test]


@dataclass(frozen=True)
class PartitionSpec:
    mode: str = "iid"
    num_clients: int = 4
    alpha: float = 0.5
    seed: int = 0

    def __post_init__(self) -> None:
        if self.mode not in ("iid", "dirichlet"):
            raise ValueError(f"partition mode must be 'iid' or 'dirichlet', got {self.mode!r}")
        if self.num_clients < 1:
            raise ValueError("num_clients must be >= 1")
        if self.mode == "dirichlet" and not self.alpha > 0:
            raise ValueError("dirichlet alpha must be > 0")


def partition(samples: Sequence[Sample], spec: PartitionSpec) -> list[list[int]]:
    """Split sample indices across clients; each list is sorted ascending."""
    n, k = len(samples), spec.num_clients
    if n < k:
        raise ValueError(f"cannot give {k} clients at least one of {n} samples")
    rng = np.random.default_rng(spec.seed)
    if spec.mode == "iid":
        perm = rng.permutation(n)
        return [sorted(perm[c::k].tolist()) for c in range(k)]

    keys = np.array([s.class_key() for s in samples])
    classes = np.unique(keys)
    for _attempt in range(100):
        shards: list[list[int]] = [[] for _ in range(k)]
        for cls in classes:
            idx = rng.permutation(np.flatnonzero(keys == cls))
            props = rng.dirichlet(np.full(k, spec.alpha))
            cuts = (np.cumsum(props)[:-1] * idx.size).astype(int)
            for c, part in enumerate(np.split(idx, cuts)):
                shards[c].extend(part.tolist())
        if all(shards):
            return [sorted(s) for s in shards]
    raise ValueError(f"dirichlet(alpha={spec.alpha}) left a client empty after 100 draws")


def partition_manifest(parts: Sequence[Sequence[int]]) -> str:
    return json.dumps({f"client_{c}": list(map(int, p)) for c, p in enumerate(parts)}, indent=2)
