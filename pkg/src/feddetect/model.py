"""Minimal dense grid detector with hand-written backpropagation.

The network is ``flatten -> dense(H) -> leaky ReLU -> dense(S*S*(B*5+C)) ->
sigmoid``.  Parameters live in one flat float64 vector laid out as
``W1 (in x H) | b1 (H) | W2 (H x out) | b2 (out)``, each block row-major.
"""

from __future__ import annotations

import sys
from dataclasses import dataclass

import numpy as np

LEAKY_SLOPE = 0.1
# keeps outputs strictly inside (0, 1); the size loss divides by sqrt(w)
OUTPUT_EPS = 1e-12


@dataclass(frozen=True)
class ModelConfig:
    input_height: int = 64
    input_width: int = 64
    grid_size: int = 2
    boxes_per_cell: int = 1
    num_classes: int = 3
    hidden_width: int = 64
    seed: int = 0

    def __post_init__(self) -> None:
        for name in ("grid_size", "boxes_per_cell", "num_classes", "hidden_width"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.input_height < self.grid_size or self.input_width < self.grid_size:
            raise ValueError(
                f"input {self.input_height}x{self.input_width} is smaller than "
                f"the {self.grid_size}x{self.grid_size} grid"
            )

    @property
    def in_dim(self) -> int:
        return self.input_height * self.input_width

    @property
    def cell_dim(self) -> int:
        return self.boxes_per_cell * 5 + self.num_classes

    @property
    def num_cells(self) -> int:
        return self.grid_size * self.grid_size

    @property
    def out_dim(self) -> int:
        return self.num_cells * self.cell_dim

    @property
    def num_params(self) -> int:
        h = self.hidden_width
        return (self.in_dim * h + h) + (h * self.out_dim + self.out_dim)


@dataclass(frozen=True)
class GridPrediction:
    """Detector output for one image.

    ``values`` has shape ``(S*S, B*5 + C)``; cells are row-major
    (``index = row * S + col``).  Each cell holds ``B`` tuples
    ``(x, y, w, h, conf)`` followed by ``C`` class scores.
    """

    values: np.ndarray
    grid_size: int
    boxes_per_cell: int
    num_classes: int

    @property
    def boxes(self) -> np.ndarray:
        n = self.boxes_per_cell * 5
        return self.values[:, :n].reshape(-1, self.boxes_per_cell, 5)

    @property
    def class_probs(self) -> np.ndarray:
        return self.values[:, self.boxes_per_cell * 5 :]

    @classmethod
    def from_flat(cls, flat: np.ndarray, config: ModelConfig) -> GridPrediction:
        values = np.asarray(flat, dtype=np.float64).reshape(config.num_cells, config.cell_dim)
        return cls(values, config.grid_size, config.boxes_per_cell, config.num_classes)


def _split(params: np.ndarray, config: ModelConfig):
    params = np.asarray(params, dtype=np.float64)
    if params.ndim != 1 or params.shape[0] != config.num_params:
        raise ValueError(
            f"parameter vector has shape {params.shape}, expected ({config.num_params},)"
        )
    i, h, o = config.in_dim, config.hidden_width, config.out_dim
    a = i * h
    b = a + h
    c = b + h * o
    return (
        params[:a].reshape(i, h),
        params[a:b],
        params[b:c].reshape(h, o),
        params[c:],
    )


def init_params(config: ModelConfig) -> np.ndarray:
    """Glorot-uniform weights, zero biases; deterministic in ``config.seed``."""
    m = config.num_params
    # the dense products can overflow on absurd configs before numpy notices
    if m > sys.maxsize // 8:
        raise OverflowError(f"model with {m} parameters exceeds addressable size")
    rng = np.random.default_rng(config.seed)
    i, h, o = config.in_dim, config.hidden_width, config.out_dim
    a1 = np.sqrt(6.0 / (i + h))
    a2 = np.sqrt(6.0 / (h + o))
    w1 = rng.uniform(-a1, a1, size=i * h)
    w2 = rng.uniform(-a2, a2, size=h * o)
    return np.concatenate([w1, np.zeros(h), w2, np.zeros(o)])


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _as_batch(images: np.ndarray, config: ModelConfig) -> np.ndarray:
    images = np.asarray(images, dtype=np.float64)
    if images.shape[-2:] != (config.input_height, config.input_width):
        raise ValueError(
            f"image shape {images.shape[-2:]} does not match model input "
            f"({config.input_height}, {config.input_width})"
        )
    if not np.all(np.isfinite(images)):
        raise ValueError("image contains non-finite pixels")
    return images.reshape(-1, config.in_dim)


def _forward_cache(params, x, config):
    w1, b1, w2, b2 = _split(params, config)
    z1 = x @ w1 + b1
    a1 = np.where(z1 > 0, z1, LEAKY_SLOPE * z1)
    out = np.clip(_sigmoid(a1 @ w2 + b2), OUTPUT_EPS, 1.0 - OUTPUT_EPS)
    return z1, a1, out


def forward_batch(params: np.ndarray, images: np.ndarray, config: ModelConfig) -> np.ndarray:
    """Forward a stack of images; returns shape ``(n, S*S, B*5+C)``."""
    x = _as_batch(images, config)
    _, _, out = _forward_cache(params, x, config)
    return out.reshape(-1, config.num_cells, config.cell_dim)


def forward(params: np.ndarray, image: np.ndarray, config: ModelConfig) -> GridPrediction:
    image = np.asarray(image)
    if image.ndim != 2:
        raise ValueError(f"expected a 2-D image, got shape {image.shape}")
    out = forward_batch(params, image, config)[0]
    return GridPrediction(out, config.grid_size, config.boxes_per_cell, config.num_classes)


def backward_batch(
    params: np.ndarray,
    images: np.ndarray,
    upstream: np.ndarray,
    config: ModelConfig,
) -> np.ndarray:
    """Gradient of ``sum_k <upstream[k], forward(params, images[k])>``.

    ``upstream`` must have shape ``(n, S*S, B*5+C)`` (or anything that
    reshapes to ``(n, out_dim)``).
    """
    x = _as_batch(images, config)
    g = np.asarray(upstream, dtype=np.float64)
    if g.size != x.shape[0] * config.out_dim:
        raise ValueError(
            f"upstream gradient has {g.size} entries, expected {x.shape[0] * config.out_dim}"
        )
    g = g.reshape(x.shape[0], config.out_dim)
    _, _, w2, _ = _split(params, config)
    z1, a1, out = _forward_cache(params, x, config)

    clamped = (out <= OUTPUT_EPS) | (out >= 1.0 - OUTPUT_EPS)
    gz2 = np.where(clamped, 0.0, g * out * (1.0 - out))
    gw2 = a1.T @ gz2
    gb2 = gz2.sum(axis=0)
    gz1 = (gz2 @ w2.T) * np.where(z1 > 0, 1.0, LEAKY_SLOPE)
    gw1 = x.T @ gz1
    gb1 = gz1.sum(axis=0)
    return np.concatenate([gw1.ravel(), gb1, gw2.ravel(), gb2])


def backward(
    params: np.ndarray,
    image: np.ndarray,
    upstream_grad: np.ndarray,
    config: ModelConfig,
) -> np.ndarray:
    image = np.asarray(image)
    if image.ndim != 2:
        raise ValueError(f"expected a 2-D image, got shape {image.shape}")
    g = np.asarray(getattr(upstream_grad, "values", upstream_grad))
    if g.size != config.out_dim:
        raise ValueError(f"upstream gradient has {g.size} entries, expected {config.out_dim}")
    return backward_batch(params, image[None], g[None], config)
