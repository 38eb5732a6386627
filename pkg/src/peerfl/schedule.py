"""Cyclic cosine schedule for the distillation weight alpha.

One cycle walks ``pos`` from 0 to ``cycle_len`` inclusive; alpha rises on a
cosine from alpha_min to alpha_max (default shape), or rises and falls within
the cycle ("rise_fall"). When a cycle completes the period grows (default
doubles) and pos resets, so successive cycles are longer and the schedule
spends more and more rounds at low alpha. Transitions are pure: ``advance``
returns a new state.

Aggregators pass the schedule along as a tiny handoff (current round, round at
which the period last updated); ``state_from_handoff`` reconstructs the full
state from that pair plus the static config, and the engine asserts the two
stay in lockstep.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace

__all__ = [
    "CycleState",
    "SchedulerHandoff",
    "alpha_at",
    "advance",
    "is_peak_round",
    "component_scales",
    "grow_period",
    "state_from_handoff",
]

COMPONENT_MODES = ("opposed", "supervision_only", "distillation_only", "common")
CYCLE_SHAPES = ("rise", "rise_fall")


@dataclass(frozen=True)
class CycleState:
    """Position inside the current cosine cycle plus the growth rule."""

    alpha_min: float = 0.0
    alpha_max: float = 1.0
    cycle_len: int = 10
    pos: int = 0
    growth_kind: str = "mul"  # "mul" | "add"
    growth: float = 2.0
    shape: str = "rise"

    def __post_init__(self) -> None:
        if not 0.0 <= self.alpha_min <= self.alpha_max <= 1.0:
            raise ValueError(
                f"need 0 <= alpha_min <= alpha_max <= 1, got ({self.alpha_min}, {self.alpha_max})"
            )
        if self.cycle_len < 1:
            raise ValueError(f"cycle_len must be >= 1, got {self.cycle_len}")
        if not 0 <= self.pos <= self.cycle_len:
            raise ValueError(f"pos must lie in [0, {self.cycle_len}], got {self.pos}")
        if self.growth_kind not in ("mul", "add"):
            raise ValueError(f"unknown growth_kind {self.growth_kind!r}")
        if self.growth_kind == "mul" and self.growth < 1.0:
            raise ValueError("multiplicative growth must be >= 1")
        if self.growth_kind == "add" and self.growth < 0.0:
            raise ValueError("additive growth must be >= 0")
        if self.shape not in CYCLE_SHAPES:
            raise ValueError(f"unknown cycle shape {self.shape!r}")


@dataclass(frozen=True)
class SchedulerHandoff:
    """What one aggregator tells the next: where the schedule stands."""

    current_round: int
    last_period_update_round: int

    def __post_init__(self) -> None:
        if self.last_period_update_round < 1 or self.current_round < self.last_period_update_round:
            raise ValueError(
                f"invalid handoff ({self.current_round}, {self.last_period_update_round})"
            )


def alpha_at(state: CycleState) -> float:
    """Alpha at the current cycle position."""
    span = state.alpha_max - state.alpha_min
    frac = state.pos / state.cycle_len
    if state.shape == "rise":
        return state.alpha_min + 0.5 * span * (1.0 - math.cos(math.pi * frac))
    return state.alpha_min + 0.5 * span * (1.0 - math.cos(2.0 * math.pi * frac))


def grow_period(cycle_len: int, growth_kind: str, growth: float) -> int:
    if growth_kind == "mul":
        return max(cycle_len, int(round(cycle_len * growth)))
    return cycle_len + int(round(growth))


def advance(state: CycleState) -> CycleState:
    """Move one round forward; on cycle completion, reset pos and grow the period."""
    if state.pos + 1 > state.cycle_len:
        return replace(
            state,
            pos=0,
            cycle_len=grow_period(state.cycle_len, state.growth_kind, state.growth),
        )
    return replace(state, pos=state.pos + 1)


def is_peak_round(state: CycleState, num_peak_positions: int = 1) -> bool:
    """Whether the current position is one of the m highest-alpha positions.

    For the rising shape these are the last m positions of the cycle, so m=1
    fires exactly at pos == cycle_len (alpha == alpha_max). For rise_fall the
    m positions nearest the mid-cycle maximum fire.
    """
    m = int(num_peak_positions)
    if not 1 <= m <= state.cycle_len:
        raise ValueError(f"num_peak_positions must lie in [1, {state.cycle_len}], got {m}")
    if state.shape == "rise":
        return state.pos > state.cycle_len - m
    # rank all positions of this cycle by alpha, take the m largest
    alphas = [
        alpha_at(replace(state, pos=p)) for p in range(state.cycle_len + 1)
    ]
    order = sorted(range(len(alphas)), key=lambda p: (-alphas[p], p))
    return state.pos in order[:m]


def component_scales(state: CycleState, mode: str = "opposed") -> tuple[float, float]:
    """(supervision scale, distillation scale) for the current position.

    opposed: (1 - a, a); supervision_only: (1 - a, 1); distillation_only:
    (1, a); common: (a, a).
    """
    if mode not in COMPONENT_MODES:
        raise ValueError(f"unknown component mode {mode!r}")
    a = alpha_at(state)
    if mode == "opposed":
        return 1.0 - a, a
    if mode == "supervision_only":
        return 1.0 - a, 1.0
    if mode == "distillation_only":
        return 1.0, a
    return a, a


def state_from_handoff(
    handoff: SchedulerHandoff,
    *,
    alpha_min: float,
    alpha_max: float,
    initial_period: int,
    growth_kind: str,
    growth: float,
    shape: str = "rise",
) -> CycleState:
    """Rebuild the full cycle state an incoming aggregator needs.

    Replays cycle starts from round 1 (each cycle spans cycle_len + 1 rounds)
    until the advertised last-period-update round is reached; the handoff is
    rejected if it does not land exactly on a cycle boundary.
    """
    start, length = 1, initial_period
    while start < handoff.last_period_update_round:
        start += length + 1
        length = grow_period(length, growth_kind, growth)
    if start != handoff.last_period_update_round:
        raise ValueError(
            f"handoff round {handoff.last_period_update_round} is not a cycle boundary"
        )
    pos = handoff.current_round - start
    if pos > length:
        raise ValueError(
            f"handoff current_round {handoff.current_round} overruns cycle of length {length}"
        )
    return CycleState(
        alpha_min=alpha_min,
        alpha_max=alpha_max,
        cycle_len=length,
        pos=pos,
        growth_kind=growth_kind,
        growth=growth,
        shape=shape,
    )
