"""Experiment configuration files (JSON) and seed derivation."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Any

from .dataio import AUGMENTATIONS, CLASS_NAMES, PartitionSpec
from .federation import FedConfig
from .loss import LossWeights
from .model import ModelConfig
from .netsim import DEFAULT_BANDWIDTH, DEFAULT_COMPUTE, DEFAULT_LATENCY, NetProfile
from .trainer import TrainConfig


class ConfigError(ValueError):
    pass


def derive_seed(master: int, label: str) -> int:
    """Stable 64-bit sub-seed for one consumer of randomness."""
    digest = hashlib.sha256(f"{int(master)}:{label}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


@dataclass(frozen=True)
class DataSpec:
    source: str = "synthetic"  # or "directory"
    path: str | None = None
    count: int = 600
    image_size: int = 64
    class_mix: tuple[float, ...] = (1 / 3, 1 / 3, 1 / 3)
    objects_per_image: int | tuple[int, int] = 1
    train_fraction: float = 0.8
    augment: tuple[str, ...] = ()


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int
    model: ModelConfig
    train: TrainConfig
    fed: FedConfig
    loss: LossWeights
    partition: PartitionSpec
    network: NetProfile
    data: DataSpec
    output: str = "runs/experiment"
    class_names: tuple[str, ...] = CLASS_NAMES

    def with_clients(self, n: int) -> ExperimentConfig:
        """Same experiment with ``n`` clients (used for single-client baselines)."""
        net = NetProfile(
            self.network.uplink_bw[:1] * n,
            self.network.downlink_bw[:1] * n,
            self.network.latency[:1] * n,
            self.network.compute_cost[:1] * n,
        )
        return replace(
            self,
            fed=replace(self.fed, num_clients=n, partition_spec=replace(self.partition, num_clients=n)),
            partition=replace(self.partition, num_clients=n),
            network=net,
        )


_SECTIONS: dict[str, set[str]] = {
    "model": {"input_size", "grid_size", "boxes_per_cell", "num_classes", "hidden_width"},
    "train": {"learning_rate", "local_epochs", "batch_size"},
    "federation": {"num_rounds", "num_clients", "eval_every", "failure_policy", "weighted_by_samples"},
    "loss": {"lambda_coord", "lambda_conf_obj", "lambda_conf_noobj", "confidence_target"},
    "partition": {"mode", "alpha"},
    "network": {"latency", "bandwidth", "uplink_bw", "downlink_bw", "compute_cost"},
    "data": {
        "source",
        "path",
        "count",
        "image_size",
        "class_mix",
        "objects_per_image",
        "train_fraction",
        "augment",
    },
}
_TOP = {"seed", "output", "class_names"} | set(_SECTIONS)


def _number(v: Any, where: str) -> float:
    if isinstance(v, str) and v.lower() in ("inf", "infinity"):
        return math.inf
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ConfigError(f"{where}: expected a number, got {v!r}")
    return float(v)


def _numbers(v: Any, where: str):
    if isinstance(v, list):
        return [_number(x, where) for x in v]
    return _number(v, where)


def _int(v: Any, where: str) -> int:
    if isinstance(v, bool) or not isinstance(v, int):
        raise ConfigError(f"{where}: expected an integer, got {v!r}")
    return v


def build_config(raw: dict, seed_override: int | None = None, output_override: str | None = None) -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    unknown = set(raw) - _TOP
    if unknown:
        raise ConfigError(f"unknown top-level keys: {sorted(unknown)}")
    for name, allowed in _SECTIONS.items():
        sec = raw.get(name, {})
        if not isinstance(sec, dict):
            raise ConfigError(f"section {name!r} must be an object")
        bad = set(sec) - allowed
        if bad:
            raise ConfigError(f"unknown keys in {name!r}: {sorted(bad)}")

    seed = seed_override if seed_override is not None else raw.get("seed")
    if seed is None:
        raise ConfigError("a seed is required (config 'seed' or --seed)")
    seed = _int(seed, "seed")
    if not 0 <= seed < 2**64:
        raise ConfigError("seed must be an unsigned 64-bit integer")

    m, t, f = raw.get("model", {}), raw.get("train", {}), raw.get("federation", {})
    lo, p, n, d = raw.get("loss", {}), raw.get("partition", {}), raw.get("network", {}), raw.get("data", {})
    try:
        size = m.get("input_size", d.get("image_size", 64))
        in_h, in_w = (size, size) if isinstance(size, int) else tuple(size)
        model = ModelConfig(
            input_height=_int(in_h, "model.input_size"),
            input_width=_int(in_w, "model.input_size"),
            grid_size=_int(m.get("grid_size", 2), "model.grid_size"),
            boxes_per_cell=_int(m.get("boxes_per_cell", 1), "model.boxes_per_cell"),
            num_classes=_int(m.get("num_classes", 3), "model.num_classes"),
            hidden_width=_int(m.get("hidden_width", 64), "model.hidden_width"),
            seed=derive_seed(seed, "model"),
        )
        train = TrainConfig(
            learning_rate=_number(t.get("learning_rate", 0.05), "train.learning_rate"),
            local_epochs=_int(t.get("local_epochs", 1), "train.local_epochs"),
            batch_size=_int(t.get("batch_size", 8), "train.batch_size"),
            shuffle_seed=derive_seed(seed, "shuffle"),
        )
        num_clients = _int(f.get("num_clients", 4), "federation.num_clients")
        loss = LossWeights(
            lambda_coord=_number(lo.get("lambda_coord", 5.0), "loss.lambda_coord"),
            lambda_conf_obj=_number(lo.get("lambda_conf_obj", 1.0), "loss.lambda_conf_obj"),
            lambda_conf_noobj=_number(lo.get("lambda_conf_noobj", 0.5), "loss.lambda_conf_noobj"),
            confidence_target=lo.get("confidence_target", "iou"),
        )
        part = PartitionSpec(
            mode=p.get("mode", "iid"),
            num_clients=num_clients,
            alpha=_number(p.get("alpha", 0.5), "partition.alpha"),
            seed=derive_seed(seed, "partition"),
        )
        fed = FedConfig(
            num_rounds=_int(f.get("num_rounds", 10), "federation.num_rounds"),
            num_clients=num_clients,
            train_cfg=train,
            model_cfg=model,
            loss_cfg=loss,
            partition_spec=part,
            eval_every=_int(f.get("eval_every", 1), "federation.eval_every"),
            master_seed=seed,
            failure_policy=f.get("failure_policy", "abort"),
            weighted_by_samples=bool(f.get("weighted_by_samples", False)),
        )
        net = NetProfile.uniform(
            num_clients,
            latency=_numbers(n.get("latency", DEFAULT_LATENCY), "network.latency"),
            bandwidth=_numbers(n.get("bandwidth", DEFAULT_BANDWIDTH), "network.bandwidth"),
            compute_cost=_numbers(n.get("compute_cost", DEFAULT_COMPUTE), "network.compute_cost"),
            uplink_bw=_numbers(n["uplink_bw"], "network.uplink_bw") if "uplink_bw" in n else None,
            downlink_bw=_numbers(n["downlink_bw"], "network.downlink_bw") if "downlink_bw" in n else None,
        )
        opi = d.get("objects_per_image", 1)
        augment = tuple(d.get("augment", ()))
        bad_aug = set(augment) - set(AUGMENTATIONS)
        if bad_aug:
            raise ConfigError(f"data.augment: unknown augmentations {sorted(bad_aug)}")
        data = DataSpec(
            source=d.get("source", "synthetic"),
            path=d.get("path"),
            count=_int(d.get("count", 600), "data.count"),
            image_size=_int(d.get("image_size", in_h), "data.image_size"),
            class_mix=tuple(_number(v, "data.class_mix") for v in d.get("class_mix", (1 / 3, 1 / 3, 1 / 3))),
            objects_per_image=opi if isinstance(opi, int) else tuple(opi),
            train_fraction=_number(d.get("train_fraction", 0.8), "data.train_fraction"),
            augment=augment,
        )
        if data.source not in ("synthetic", "directory"):
            raise ConfigError(f"data.source must be 'synthetic' or 'directory', got {data.source!r}")
        if data.source == "directory" and not data.path:
            raise ConfigError("data.path is required for a directory source")
        if not 0 < data.train_fraction < 1:
            raise ConfigError("data.train_fraction must lie in (0, 1)")
    except ConfigError:
        raise
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from None

    names = tuple(raw.get("class_names", CLASS_NAMES))
    if len(names) < model.num_classes:
        names = names + tuple(f"class_{k}" for k in range(len(names), model.num_classes))
    return ExperimentConfig(
        seed=seed,
        model=model,
        train=train,
        fed=fed,
        loss=loss,
        partition=part,
        network=net,
        data=data,
        output=output_override or raw.get("output", "runs/experiment"),
        class_names=names,
    )


def load_config(
    path: str | Path, seed_override: int | None = None, output_override: str | None = None
) -> ExperimentConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror or exc}") from None
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    return build_config(raw, seed_override, output_override)
