"""Communication graphs and per-round participant selection.

Two graphs: a full mesh, and a "bridged" graph that splits clients into the
odd-id and even-id groups, each internally complete, joined by a single edge
between the two group medians. Aggregator rotation is a uniform random walk
over the previous aggregator's neighbors; senders are sampled without
replacement from the current aggregator's neighborhood.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = ["Topology", "RoundPlan", "build_topology", "next_aggregator", "select_senders"]

TOPOLOGY_KINDS = ("mesh", "bridged")


@dataclass(frozen=True)
class Topology:
    kind: str
    num_clients: int

    def __post_init__(self) -> None:
        if self.kind not in TOPOLOGY_KINDS:
            raise ValueError(f"unknown topology {self.kind!r}")
        if self.num_clients < 2:
            raise ValueError(f"need at least 2 clients, got {self.num_clients}")

    def bridge_pair(self) -> tuple[int, int] | None:
        """The (even-side, odd-side) bridge clients, or None for a mesh."""
        if self.kind != "bridged":
            return None
        even = [i for i in range(self.num_clients) if i % 2 == 0]
        odd = [i for i in range(self.num_clients) if i % 2 == 1]
        if not even or not odd:
            return None  # degenerate: single group, plain mesh
        return even[len(even) // 2], odd[len(odd) // 2]

    def neighbors(self, client: int) -> np.ndarray:
        if not 0 <= client < self.num_clients:
            raise ValueError(f"client {client} out of range")
        if self.kind == "mesh":
            return np.array([i for i in range(self.num_clients) if i != client])
        pair = self.bridge_pair()
        if pair is None:
            return np.array([i for i in range(self.num_clients) if i != client])
        group = [i for i in range(self.num_clients) if i % 2 == client % 2 and i != client]
        if client in pair:
            other = pair[1] if client == pair[0] else pair[0]
            group.append(other)
        return np.array(sorted(group))


def build_topology(kind: str, num_clients: int) -> Topology:
    return Topology(kind=kind, num_clients=num_clients)


@dataclass(frozen=True)
class RoundPlan:
    """Who does what this round."""

    round: int
    aggregator: int
    senders: tuple[int, ...]
    alpha: float
    protocol: str
    extra_aggregators: tuple[int, ...] = field(default=())  # def_kt pairs only

    @property
    def participants(self) -> tuple[int, ...]:
        return tuple(sorted({self.aggregator, *self.extra_aggregators, *self.senders}))


def next_aggregator(
    topology: Topology,
    prev: int | None,
    rng: np.random.Generator,
    mode: str = "rotate",
    fixed_id: int = 0,
) -> int:
    """Pick this round's aggregator.

    rotate: round 1 (prev is None) starts at client 0, afterwards uniform over
    the previous aggregator's neighbors. fixed: always the configured id.
    """
    if mode == "fixed":
        if not 0 <= fixed_id < topology.num_clients:
            raise ValueError(f"fixed aggregator {fixed_id} out of range")
        return fixed_id
    if mode != "rotate":
        raise ValueError(f"unknown aggregator mode {mode!r}")
    if prev is None:
        return 0
    pool = topology.neighbors(prev)
    if pool.size == 0:
        raise ValueError(f"client {prev} has no neighbors")
    return int(pool[rng.integers(pool.size)])


def select_senders(
    topology: Topology,
    aggregator: int,
    fraction: float,
    rng: np.random.Generator,
) -> tuple[int, ...]:
    """Sample round(fraction * N) senders from the aggregator's neighborhood.

    Bankers' rounding (Python round) sets the target size; if the
    neighborhood is smaller, every neighbor is selected. Returned sorted.
    """
    if not 0.0 < fraction <= 1.0:
        raise ValueError(f"sender fraction must lie in (0, 1], got {fraction}")
    pool = topology.neighbors(aggregator)
    if pool.size == 0:
        raise ValueError(f"aggregator {aggregator} has no reachable clients")
    want = round(fraction * topology.num_clients)
    k = min(want, int(pool.size))
    if k <= 0:
        return ()
    chosen = rng.choice(pool, size=k, replace=False)
    return tuple(sorted(int(c) for c in chosen))
