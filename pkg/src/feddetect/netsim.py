"""Synchronous-round cost model for communication and local compute.

Simulated time is bookkeeping only; it never feeds back into training.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

DEFAULT_LATENCY = 0.05  # seconds, one way
DEFAULT_BANDWIDTH = 10e6  # bytes / second
DEFAULT_COMPUTE = 1e-3  # seconds / sample


def _per_client(value, n: int, name: str) -> tuple[float, ...]:
    if isinstance(value, (int, float)):
        return (float(value),) * n
    vals = tuple(float(v) for v in value)
    if len(vals) != n:
        raise ValueError(f"{name} has {len(vals)} entries for {n} clients")
    return vals


@dataclass(frozen=True)
class NetProfile:
    """Per-client links and compute speed. ``math.inf`` bandwidth means free transfer."""

    uplink_bw: tuple[float, ...]
    downlink_bw: tuple[float, ...]
    latency: tuple[float, ...]
    compute_cost: tuple[float, ...]

    def __post_init__(self) -> None:
        n = len(self.latency)
        for name in ("uplink_bw", "downlink_bw", "compute_cost"):
            if len(getattr(self, name)) != n:
                raise ValueError(f"{name} length differs from latency length {n}")
        for bw in self.uplink_bw + self.downlink_bw:
            if not bw > 0:
                raise ValueError(f"bandwidth must be > 0, got {bw}")
        for v in self.latency + self.compute_cost:
            if not (v >= 0 and math.isfinite(v)):
                raise ValueError(f"latency and compute cost must be finite and >= 0, got {v}")

    @property
    def num_clients(self) -> int:
        return len(self.latency)

    @classmethod
    def uniform(
        cls,
        num_clients: int,
        latency: float | Sequence[float] = DEFAULT_LATENCY,
        bandwidth: float | Sequence[float] = DEFAULT_BANDWIDTH,
        compute_cost: float | Sequence[float] = DEFAULT_COMPUTE,
        uplink_bw: float | Sequence[float] | None = None,
        downlink_bw: float | Sequence[float] | None = None,
    ) -> NetProfile:
        up = bandwidth if uplink_bw is None else uplink_bw
        down = bandwidth if downlink_bw is None else downlink_bw
        return cls(
            uplink_bw=_per_client(up, num_clients, "uplink_bw"),
            downlink_bw=_per_client(down, num_clients, "downlink_bw"),
            latency=_per_client(latency, num_clients, "latency"),
            compute_cost=_per_client(compute_cost, num_clients, "compute_cost"),
        )


@dataclass(frozen=True)
class ClientCost:
    client: int
    download_seconds: float
    compute_seconds: float
    upload_seconds: float
    samples_processed: int
    bytes_down: int
    bytes_up: int

    @property
    def transfer_seconds(self) -> float:
        return self.download_seconds + self.upload_seconds

    @property
    def elapsed(self) -> float:
        return self.download_seconds + self.compute_seconds + self.upload_seconds


def client_cost(
    profile: NetProfile,
    client: int,
    checkpoint_bytes: int,
    num_samples: int,
    epochs: int,
) -> ClientCost:
    lat = profile.latency[client]
    return ClientCost(
        client=client,
        download_seconds=lat + checkpoint_bytes / profile.downlink_bw[client],
        compute_seconds=epochs * num_samples * profile.compute_cost[client],
        upload_seconds=lat + checkpoint_bytes / profile.uplink_bw[client],
        samples_processed=epochs * num_samples,
        bytes_down=checkpoint_bytes,
        bytes_up=checkpoint_bytes,
    )


def round_time(
    profile: NetProfile,
    checkpoint_bytes: int,
    sample_counts: Sequence[int],
    epochs: int,
) -> float:
    """Barrier time of one round: the slowest client's download + compute + upload."""
    if len(sample_counts) != profile.num_clients:
        raise ValueError(
            f"{len(sample_counts)} sample counts for a {profile.num_clients}-client profile"
        )
    return max(
        client_cost(profile, n, checkpoint_bytes, count, epochs).elapsed
        for n, count in enumerate(sample_counts)
    )


@dataclass
class RoundCost:
    round: int
    clients: list[ClientCost]
    seconds: float

    @property
    def samples_processed(self) -> int:
        return sum(c.samples_processed for c in self.clients)

    @property
    def bytes_up(self) -> int:
        return sum(c.bytes_up for c in self.clients)

    @property
    def bytes_down(self) -> int:
        return sum(c.bytes_down for c in self.clients)

    def as_dict(self) -> dict:
        return {
            "round": self.round,
            "seconds": self.seconds,
            "clients": [
                {
                    "client": c.client,
                    "compute_seconds": c.compute_seconds,
                    "transfer_seconds": c.transfer_seconds,
                    "samples_processed": c.samples_processed,
                    "bytes_down": c.bytes_down,
                    "bytes_up": c.bytes_up,
                }
                for c in self.clients
            ],
        }


@dataclass
class CostLedger:
    rounds: list[RoundCost] = field(default_factory=list)

    def record_round(
        self,
        round_index: int,
        profile: NetProfile,
        checkpoint_bytes: int,
        sample_counts: dict[int, int],
        epochs: int,
    ) -> RoundCost:
        """Record one round; ``sample_counts`` maps participating client -> |D_n|."""
        clients = [
            client_cost(profile, n, checkpoint_bytes, count, epochs)
            for n, count in sorted(sample_counts.items())
        ]
        rc = RoundCost(round_index, clients, max(c.elapsed for c in clients))
        self.rounds.append(rc)
        return rc

    @property
    def total_seconds(self) -> float:
        return math.fsum(r.seconds for r in self.rounds)

    @property
    def total_samples(self) -> int:
        return sum(r.samples_processed for r in self.rounds)

    @property
    def total_bytes(self) -> int:
        return sum(r.bytes_up + r.bytes_down for r in self.rounds)


@dataclass
class LedgerCheck:
    ok: bool
    diagnostics: list[str]
    expected_samples: int
    observed_samples: int

    def __bool__(self) -> bool:
        return self.ok


def ledger_check(
    ledger: CostLedger,
    num_rounds: int,
    local_epochs: int,
    partition_sizes: Sequence[int],
    checkpoint_bytes: int | None = None,
) -> LedgerCheck:
    """Verify the accounting identities of a finished full-participation run.

    Checks total samples ``K * sum_n I * |D_n|``, every per-client count,
    per-round barrier times, and (when ``checkpoint_bytes`` is given)
    ``2 * N * checkpoint_bytes`` traffic per round.
    """
    diags = []
    n = len(partition_sizes)
    expected = num_rounds * sum(local_epochs * s for s in partition_sizes)
    if len(ledger.rounds) != num_rounds:
        diags.append(f"ledger has {len(ledger.rounds)} rounds, expected {num_rounds}")
    for r in ledger.rounds:
        seen = {c.client for c in r.clients}
        for missing in sorted(set(range(n)) - seen):
            diags.append(f"round {r.round}: client {missing} missing")
        for c in r.clients:
            if not 0 <= c.client < n:
                diags.append(f"round {r.round}: unknown client {c.client}")
                continue
            want = local_epochs * partition_sizes[c.client]
            if c.samples_processed != want:
                diags.append(
                    f"round {r.round}, client {c.client}: samples_processed "
                    f"{c.samples_processed} != {want}"
                )
        if r.clients and r.seconds != max(c.elapsed for c in r.clients):
            diags.append(f"round {r.round}: time {r.seconds} is not the slowest client's")
        if checkpoint_bytes is not None:
            want_bytes = 2 * n * checkpoint_bytes
            got = r.bytes_up + r.bytes_down
            if got != want_bytes:
                diags.append(f"round {r.round}: moved {got} bytes, expected {want_bytes}")
    observed = ledger.total_samples
    if observed != expected:
        diags.append(f"total samples {observed} != K*I*sum|D_n| = {expected}")
    return LedgerCheck(not diags, diags, expected, observed)
