"""Schedule tests: cosine shape, period growth, peak positions, handoff."""
import math

import numpy as np
import pytest

from peerfl import (
    CycleState,
    SchedulerHandoff,
    advance,
    alpha_at,
    component_scales,
    is_peak_round,
    state_from_handoff,
)


def fresh(alpha_max=1.0, cycle_len=10, **kw):
    return CycleState(alpha_min=0.0, alpha_max=alpha_max, cycle_len=cycle_len, pos=0, **kw)


def walk(state, rounds):
    """Simulate: yield (round, state-before-advance), then advance."""
    out = []
    for t in range(1, rounds + 1):
        out.append((t, state))
        state = advance(state)
    return out


# ---------------------------------------------------------------------------
# alpha shape
# ---------------------------------------------------------------------------

def test_alpha_boundary_values_exact():
    s = fresh()
    assert alpha_at(s) == 0.0
    top = CycleState(cycle_len=10, pos=10)
    assert alpha_at(top) == 1.0
    mid = CycleState(cycle_len=10, pos=5, alpha_max=0.8)
    # cos(pi/2) = 0 -> alpha = 0.4
    assert abs(alpha_at(mid) - 0.4) < 1e-15


def test_alpha_monotone_within_rising_cycle():
    s = fresh(alpha_max=0.9, cycle_len=17)
    values = [alpha_at(CycleState(alpha_max=0.9, cycle_len=17, pos=p)) for p in range(18)]
    assert all(a <= b for a, b in zip(values, values[1:]))
    assert values[0] == 0.0 and abs(values[-1] - 0.9) < 1e-15


def test_alpha_matches_cosine_formula():
    for pos in range(11):
        s = CycleState(alpha_min=0.2, alpha_max=0.8, cycle_len=10, pos=pos)
        expected = 0.2 + 0.5 * 0.6 * (1.0 - math.cos(math.pi * pos / 10))
        assert abs(alpha_at(s) - expected) < 1e-15


def test_rise_fall_shape():
    states = [CycleState(cycle_len=10, pos=p, shape="rise_fall") for p in range(11)]
    values = [alpha_at(s) for s in states]
    assert values[0] == 0.0
    assert abs(values[5] - 1.0) < 1e-15  # max at mid-cycle
    assert abs(values[10]) < 1e-15       # back down
    assert abs(values[3] - values[7]) < 1e-12  # symmetric


# ---------------------------------------------------------------------------
# period growth
# ---------------------------------------------------------------------------

def test_doubling_growth_gives_10_20_40_over_100_rounds():
    s = fresh()
    lengths = []
    starts = []
    for t, st in walk(s, 100):
        if st.pos == 0:
            lengths.append(st.cycle_len)
            starts.append(t)
    # cycles completed within 100 rounds have lengths 10, 20, 40; the fourth
    # (length 80) starts at round 74 and is still running at round 100
    assert starts == [1, 12, 33, 74]
    assert lengths == [10, 20, 40, 80]
    completed = [n for n, start in zip(lengths, starts) if start + n <= 100]
    assert completed == [10, 20, 40]


def test_alpha_max_rounds_under_doubling():
    # the last position of each cycle is where alpha hits its maximum
    s = fresh()
    max_rounds = [t for t, st in walk(s, 100) if st.pos == st.cycle_len]
    assert max_rounds == [11, 32, 73]


def test_additive_growth():
    s = fresh(growth_kind="add", growth=5.0)
    lengths = [st.cycle_len for t, st in walk(s, 60) if st.pos == 0]
    assert lengths == [10, 15, 20, 25]


def test_advance_is_pure():
    s = fresh()
    advance(s)
    assert s.pos == 0  # original untouched


# ---------------------------------------------------------------------------
# peak positions
# ---------------------------------------------------------------------------

def test_peak_round_m1_only_at_cycle_end():
    flags = [is_peak_round(CycleState(cycle_len=10, pos=p), 1) for p in range(11)]
    assert flags == [False] * 10 + [True]


def test_peak_round_m3_last_three_positions():
    flags = [is_peak_round(CycleState(cycle_len=10, pos=p), 3) for p in range(11)]
    assert flags == [False] * 8 + [True] * 3


def test_peak_round_rise_fall_centered():
    flags = [
        is_peak_round(CycleState(cycle_len=10, pos=p, shape="rise_fall"), 1)
        for p in range(11)
    ]
    assert flags[5] and sum(flags) == 1


def test_peak_round_bounds():
    s = fresh()
    with pytest.raises(ValueError):
        is_peak_round(s, 0)
    with pytest.raises(ValueError):
        is_peak_round(s, 11)


# ---------------------------------------------------------------------------
# component scales
# ---------------------------------------------------------------------------

def test_component_scales_all_modes():
    s = CycleState(cycle_len=10, pos=5)  # alpha = 0.5
    a = alpha_at(s)
    assert component_scales(s, "opposed") == (1.0 - a, a)
    assert component_scales(s, "supervision_only") == (1.0 - a, 1.0)
    assert component_scales(s, "distillation_only") == (1.0, a)
    assert component_scales(s, "common") == (a, a)
    with pytest.raises(ValueError):
        component_scales(s, "inverted")


# ---------------------------------------------------------------------------
# handoff
# ---------------------------------------------------------------------------

def test_handoff_reconstruction_tracks_walk():
    kw = dict(alpha_min=0.0, alpha_max=1.0, initial_period=10,
              growth_kind="mul", growth=2.0, shape="rise")
    state = fresh()
    last_update = 1
    for t in range(1, 201):
        handoff = SchedulerHandoff(t, last_update)
        recon = state_from_handoff(handoff, **kw)
        assert recon == state
        state = advance(state)
        if state.pos == 0:
            last_update = t + 1


def test_handoff_rejects_non_boundary():
    kw = dict(alpha_min=0.0, alpha_max=1.0, initial_period=10,
              growth_kind="mul", growth=2.0)
    with pytest.raises(ValueError, match="boundary"):
        state_from_handoff(SchedulerHandoff(15, 13), **kw)
    with pytest.raises(ValueError, match="overruns"):
        state_from_handoff(SchedulerHandoff(33, 12), **kw)  # cycle 2 spans 12..32


def test_handoff_validation():
    with pytest.raises(ValueError):
        SchedulerHandoff(5, 9)
    with pytest.raises(ValueError):
        SchedulerHandoff(5, 0)


# ---------------------------------------------------------------------------
# state validation
# ---------------------------------------------------------------------------

def test_cycle_state_validation():
    with pytest.raises(ValueError):
        CycleState(alpha_min=0.5, alpha_max=0.4)
    with pytest.raises(ValueError):
        CycleState(alpha_max=1.5)
    with pytest.raises(ValueError):
        CycleState(cycle_len=0)
    with pytest.raises(ValueError):
        CycleState(cycle_len=5, pos=6)
    with pytest.raises(ValueError):
        CycleState(growth_kind="exp")
    with pytest.raises(ValueError):
        CycleState(growth_kind="mul", growth=0.5)
    with pytest.raises(ValueError):
        CycleState(shape="sawtooth")
