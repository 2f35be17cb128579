"""FedAvg orchestration, checkpoint encoding, and per-round reports."""

from __future__ import annotations

import hashlib
import json
import logging
import math
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .dataio import PartitionSpec, Sample
from .loss import LossWeights
from .metrics import evaluate
from .model import ModelConfig, init_params
from .netsim import CostLedger, NetProfile
from .trainer import ClientFailure, TrainConfig, train_local

log = logging.getLogger(__name__)

MAGIC = b"FDCK"
VERSION = 1
HEADER = struct.Struct("<4sHHHHIIIQ")  # magic, version, S, B, C, H, in_h, in_w, M
assert HEADER.size == 32

_SEED_STRIDE = 0x9E3779B97F4A7C15
_U64 = (1 << 64) - 1


class FederationError(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class FedConfig:
    num_rounds: int = 10
    num_clients: int = 4
    train_cfg: TrainConfig = field(default_factory=TrainConfig)
    model_cfg: ModelConfig = field(default_factory=ModelConfig)
    loss_cfg: LossWeights = field(default_factory=LossWeights)
    partition_spec: PartitionSpec = field(default_factory=PartitionSpec)
    eval_every: int = 0
    master_seed: int = 0
    failure_policy: str = "abort"  # or "drop"
    weighted_by_samples: bool = False
    # False gives every client the same shuffle seed
    per_client_seeds: bool = True

    def __post_init__(self) -> None:
        if self.num_rounds < 1 or self.num_clients < 1:
            raise ValueError("num_rounds and num_clients must be >= 1")
        if not 0 <= self.eval_every <= self.num_rounds:
            raise ValueError(f"eval_every must be in [0, {self.num_rounds}]")
        if self.failure_policy not in ("abort", "drop"):
            raise ValueError(f"failure_policy must be 'abort' or 'drop', got {self.failure_policy!r}")

    def client_seed(self, client: int) -> int:
        base = self.train_cfg.shuffle_seed
        if not self.per_client_seeds:
            return base
        return (base + client * _SEED_STRIDE) & _U64


# --------------------------------------------------------------------------
# aggregation
# --------------------------------------------------------------------------


def fedavg(updates: Sequence[np.ndarray], weights: Sequence[float] | None = None) -> np.ndarray:
    """Element-wise mean of client parameter vectors.

    Computed as ``u_0 + sum_n (u_n - u_0) / N`` with the sum taken in client
    order. Deviations from the first update are exactly zero when clients
    agree, so identical updates average to themselves bit for bit.
    """
    if len(updates) == 0:
        raise ValueError("fedavg needs at least one update")
    arrays = [np.asarray(u, dtype=np.float64) for u in updates]
    first = arrays[0]
    for n, a in enumerate(arrays):
        if a.shape != first.shape:
            raise ValueError(f"update {n} has shape {a.shape}, expected {first.shape}")
        if not np.all(np.isfinite(a)):
            raise ValueError(f"update {n} contains non-finite values")
    if weights is None:
        acc = np.zeros_like(first)
        for a in arrays[1:]:
            acc += a - first
        return _shift(first, acc / len(arrays))
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (len(arrays),) or np.any(w < 0) or w.sum() <= 0:
        raise ValueError("weights must be non-negative, one per update, with positive sum")
    coef = w / w.sum()
    acc = np.zeros_like(first)
    for c, a in zip(coef[1:], arrays[1:]):
        acc += c * (a - first)
    return _shift(first, acc)


def _shift(base: np.ndarray, delta: np.ndarray) -> np.ndarray:
    # adding +0.0 would turn -0.0 into +0.0
    return np.where(delta == 0.0, base, base + delta)


def checksum(params: np.ndarray) -> str:
    return hashlib.sha256(np.asarray(params, dtype="<f8").tobytes()).hexdigest()[:16]


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------


def checkpoint_size(config: ModelConfig) -> int:
    return HEADER.size + 4 * config.num_params


def serialize_checkpoint(params: np.ndarray, meta: ModelConfig) -> bytes:
    params = np.asarray(params, dtype=np.float64)
    if params.shape != (meta.num_params,):
        raise CheckpointError(f"params have shape {params.shape}, config expects {meta.num_params}")
    if not np.all(np.isfinite(params)):
        raise CheckpointError("refusing to serialize non-finite parameters")
    header = HEADER.pack(
        MAGIC,
        VERSION,
        meta.grid_size,
        meta.boxes_per_cell,
        meta.num_classes,
        meta.hidden_width,
        meta.input_height,
        meta.input_width,
        meta.num_params,
    )
    return header + params.astype("<f4").tobytes()


def deserialize_checkpoint(data: bytes) -> tuple[np.ndarray, ModelConfig]:
    if len(data) < HEADER.size:
        raise CheckpointError(f"checkpoint is {len(data)} bytes, shorter than the header")
    magic, version, s, b, c, h, ih, iw, m = HEADER.unpack_from(data)
    if magic != MAGIC:
        raise CheckpointError(f"bad magic {magic!r}")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    cfg = ModelConfig(ih, iw, s, b, c, h)
    if m != cfg.num_params:
        raise CheckpointError(f"header declares {m} parameters, geometry implies {cfg.num_params}")
    payload = data[HEADER.size :]
    if len(payload) != 4 * m:
        raise CheckpointError(f"payload is {len(payload)} bytes, expected {4 * m}")
    return np.frombuffer(payload, dtype="<f4").astype(np.float64), cfg


def save_checkpoint(path, params: np.ndarray, meta: ModelConfig) -> None:
    Path(path).write_bytes(serialize_checkpoint(params, meta))


def load_checkpoint(path) -> tuple[np.ndarray, ModelConfig]:
    return deserialize_checkpoint(Path(path).read_bytes())


def quantize(params: np.ndarray) -> np.ndarray:
    return np.asarray(params, dtype=np.float64).astype(np.float32).astype(np.float64)


# --------------------------------------------------------------------------
# the round loop
# --------------------------------------------------------------------------


@dataclass
class RoundReport:
    round: int
    client_losses: list[float | None]
    train_loss: float
    checksum: str
    sim_seconds: float
    bytes_up: int
    bytes_down: int
    samples_processed: int
    failed_clients: list[int] = field(default_factory=list)
    validation: dict | None = None
    ledger: dict | None = None

    def as_dict(self) -> dict:
        return {
            "round": self.round,
            "client_losses": self.client_losses,
            "train_loss": self.train_loss,
            "checksum": self.checksum,
            "sim_seconds": self.sim_seconds,
            "bytes_up": self.bytes_up,
            "bytes_down": self.bytes_down,
            "samples_processed": self.samples_processed,
            "failed_clients": self.failed_clients,
            "validation": self.validation,
            "ledger": self.ledger,
        }


@dataclass
class FederationResult:
    params: np.ndarray
    reports: list[RoundReport]
    ledger: CostLedger


RoundData = Callable[[int, int], Sequence[Sample]]


def _validation_summary(params, samples, cfg: FedConfig) -> dict:
    rep = evaluate(params, samples, cfg.model_cfg)
    return {
        "mAP50": rep.map50,
        "mAP50-95": rep.map50_95,
        "accuracy": rep.confusion.accuracy,
    }


def run_federation(
    cfg: FedConfig,
    client_data: Sequence[Sequence[Sample]],
    net: NetProfile | None = None,
    validation: Sequence[Sample] | None = None,
    round_data: RoundData | None = None,
    threads: int = 1,
    log_path: str | Path | None = None,
    initial_params: np.ndarray | None = None,
) -> FederationResult:
    """Run K rounds of distribute / local SGD / FedAvg over N clients.

    ``round_data(k, n)``, when given, supplies client ``n``'s dataset for
    round ``k`` (1-based) instead of the static ``client_data``. Client
    training may run on ``threads`` workers; results are gathered and
    averaged in client order, so the outcome does not depend on it.
    """
    n_clients = cfg.num_clients
    if len(client_data) != n_clients:
        raise ValueError(f"got {len(client_data)} client datasets for {n_clients} clients")
    for n, d in enumerate(client_data):
        if len(d) == 0:
            raise ValueError(f"client {n} has no data")
    net = net or NetProfile.uniform(n_clients)
    if net.num_clients != n_clients:
        raise ValueError(f"net profile describes {net.num_clients} clients, need {n_clients}")

    mcfg, tcfg = cfg.model_cfg, cfg.train_cfg
    theta = init_params(mcfg) if initial_params is None else np.array(initial_params, dtype=np.float64)
    ckpt_bytes = checkpoint_size(mcfg)
    ledger = CostLedger()
    reports: list[RoundReport] = []
    log_fh = open(log_path, "w", encoding="utf-8") if log_path else None

    def client_job(k: int, n: int):
        data = round_data(k, n) if round_data else client_data[n]
        local_cfg = TrainConfig(tcfg.learning_rate, tcfg.local_epochs, tcfg.batch_size, cfg.client_seed(n))
        try:
            new, traces = train_local(
                theta, data, local_cfg, cfg.loss_cfg, mcfg, epoch_offset=(k - 1) * tcfg.local_epochs
            )
        except ClientFailure as exc:
            return n, len(data), None, None, str(exc)
        if not np.all(np.isfinite(new)):
            return n, len(data), None, None, "non-finite parameters"
        mean_loss = math.fsum(t.mean_loss.total for t in traces) / len(traces)
        return n, len(data), new, mean_loss, None

    pool = ThreadPoolExecutor(max_workers=threads) if threads > 1 else None
    try:
        for k in range(1, cfg.num_rounds + 1):
            if pool is not None:
                results = list(pool.map(lambda n: client_job(k, n), range(n_clients)))
            else:
                results = [client_job(k, n) for n in range(n_clients)]

            updates, weights, losses, failed, counts = [], [], [], [], {}
            for n, size, new, mean_loss, err in results:
                if err is not None:
                    if cfg.failure_policy == "abort":
                        raise FederationError(f"round {k}: client {n} failed: {err}")
                    log.warning("round %d: dropping client %d (%s)", k, n, err)
                    failed.append(n)
                    losses.append(None)
                    continue
                counts[n] = size
                updates.append(new)
                weights.append(size)
                losses.append(mean_loss)
            if not updates:
                raise FederationError(f"round {k}: every client failed")
            theta = fedavg(updates, weights if cfg.weighted_by_samples else None)

            # dropped clients are left out of the ledger for this round
            rc = ledger.record_round(k, net, ckpt_bytes, counts, tcfg.local_epochs)
            ok_losses = [v for v in losses if v is not None]
            report = RoundReport(
                round=k,
                client_losses=losses,
                train_loss=math.fsum(ok_losses) / len(ok_losses),
                checksum=checksum(theta),
                sim_seconds=rc.seconds,
                bytes_up=rc.bytes_up,
                bytes_down=rc.bytes_down,
                samples_processed=rc.samples_processed,
                failed_clients=failed,
                ledger=rc.as_dict(),
            )
            if validation is not None and cfg.eval_every and k % cfg.eval_every == 0:
                report.validation = _validation_summary(theta, validation, cfg)
            reports.append(report)
            log.info("round %d/%d loss %.5f", k, cfg.num_rounds, report.train_loss)
            if log_fh:
                log_fh.write(json.dumps(report.as_dict(), sort_keys=True) + "\n")
                log_fh.flush()
    finally:
        if pool is not None:
            pool.shutdown()
        if log_fh:
            log_fh.close()
    return FederationResult(theta, reports, ledger)
