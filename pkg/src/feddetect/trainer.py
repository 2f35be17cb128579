"""Local mini-batch SGD for one client."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .dataio import Sample
from .loss import LossBreakdown, LossWeights, assign_targets, loss_and_grad
from .model import GridPrediction, ModelConfig, backward_batch, forward_batch


class ClientFailure(RuntimeError):
    """Local training produced a non-finite loss or gradient."""


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.05
    local_epochs: int = 1
    batch_size: int = 8
    shuffle_seed: int = 0

    def __post_init__(self) -> None:
        if not math.isfinite(self.learning_rate) or self.learning_rate < 0:
            raise ValueError(f"learning_rate must be finite and >= 0, got {self.learning_rate}")
        if self.local_epochs < 1:
            raise ValueError("local_epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


@dataclass(frozen=True)
class EpochTrace:
    epoch: int
    mean_loss: LossBreakdown
    samples_processed: int


def sgd_step(params: np.ndarray, grad: np.ndarray, lr: float) -> np.ndarray:
    params = np.asarray(params, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    if params.shape != grad.shape:
        raise ValueError(f"length mismatch: params {params.shape}, grad {grad.shape}")
    if not np.all(np.isfinite(grad)):
        raise ClientFailure("non-finite gradient")
    return params - lr * grad


def batch_loss_and_grad(
    params: np.ndarray,
    images: np.ndarray,
    truths: Sequence[Sequence],
    model_cfg: ModelConfig,
    loss_cfg: LossWeights,
) -> tuple[list[LossBreakdown], np.ndarray]:
    """Per-sample losses and the batch-mean parameter gradient."""
    preds = forward_batch(params, images, model_cfg)
    upstream = np.empty_like(preds)
    losses = []
    for k, truth in enumerate(truths):
        pred = GridPrediction(
            preds[k], model_cfg.grid_size, model_cfg.boxes_per_cell, model_cfg.num_classes
        )
        assignment = assign_targets(
            truth, pred, model_cfg.grid_size, model_cfg.boxes_per_cell, loss_cfg.confidence_target
        )
        lb, g = loss_and_grad(pred, assignment, loss_cfg)
        losses.append(lb)
        upstream[k] = g
    upstream /= len(truths)
    return losses, backward_batch(params, images, upstream, model_cfg)


def mean_breakdown(losses: Sequence[LossBreakdown]) -> LossBreakdown:
    n = len(losses)
    fields = ("coord", "size", "conf_obj", "conf_noobj", "classification")
    sums = {f: math.fsum(getattr(lb, f) for lb in losses) / n for f in fields}
    total = math.fsum(lb.total for lb in losses) / n
    return LossBreakdown(**sums, total=total)


def train_local(
    params: np.ndarray,
    data: Sequence[Sample],
    cfg: TrainConfig,
    loss_cfg: LossWeights,
    model_cfg: ModelConfig,
    epoch_offset: int = 0,
) -> tuple[np.ndarray, list[EpochTrace]]:
    """Run ``cfg.local_epochs`` epochs of SGD over ``data``.

    Epoch ``e`` is shuffled with seed ``shuffle_seed ^ (epoch_offset + e)``;
    federated rounds pass their global epoch offset so a single client's
    trajectory matches pooled training over the same number of epochs.
    The trailing partial batch is kept.
    """
    if len(data) == 0:
        raise ValueError("cannot train on an empty dataset")
    images = np.stack([s.image for s in data]).astype(np.float64, copy=False)
    truths = [s.objects for s in data]
    theta = np.array(params, dtype=np.float64, copy=True)
    n = len(data)
    traces = []
    for e in range(cfg.local_epochs):
        epoch = epoch_offset + e
        order = np.random.default_rng(cfg.shuffle_seed ^ epoch).permutation(n)
        epoch_losses: list[LossBreakdown] = []
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            losses, grad = batch_loss_and_grad(
                theta, images[idx], [truths[i] for i in idx], model_cfg, loss_cfg
            )
            if not all(math.isfinite(lb.total) for lb in losses):
                raise ClientFailure(f"non-finite loss in epoch {epoch}")
            theta = sgd_step(theta, grad, cfg.learning_rate)
            epoch_losses.extend(losses)
        traces.append(EpochTrace(epoch, mean_breakdown(epoch_losses), len(epoch_losses)))
    return theta, traces
