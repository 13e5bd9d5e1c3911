"""Meter behaviour: quarters, band crossings, exceedances, the cut countdown."""

import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from chain2sim.frames import (
    CrossingDirection,
    EnergyDirection,
    ExceedanceCause,
    FrameType,
    SupplyEventKind,
)
from chain2sim.meter import (
    QUARTER_S,
    QUARTERS_PER_DAY,
    Meter,
    MeterConfig,
    band_index,
    switchoff_remaining,
)

POD = "IT001E00000001"


def make_meter(pn_w=3000.0, tick_s=1, **kw) -> Meter:
    return Meter(POD, MeterConfig(pn_w=pn_w, tick_s=tick_s, **kw))


def drive(meter, powers, t0=0):
    """Step the meter over `powers` and return all emitted frames."""
    tick = meter.config.tick_s
    out = []
    for i, p in enumerate(powers):
        out.extend(meter.step(p, t0 + i * tick))
    return out


# -- band index ----------------------------------------------------------------


def test_band_index_thresholds():
    pn = 3000.0
    assert band_index(0.0, pn) == 0
    assert band_index(299.9, pn) == 0
    assert band_index(300.0, pn) == 1
    assert band_index(1500.0, pn) == 5
    assert band_index(2999.9, pn) == 9
    assert band_index(3000.0, pn) == 10
    assert band_index(50000.0, pn) == 10


@given(
    st.floats(0, 1e6, allow_nan=False),
    st.floats(0, 1e6, allow_nan=False),
    st.floats(100, 1e5),
)
def test_band_index_monotone(p1, p2, pn):
    lo, hi = sorted((p1, p2))
    assert band_index(lo, pn) <= band_index(hi, pn)
    assert 0 <= band_index(lo, pn) <= 10


# -- switch-off law --------------------------------------------------------------


def test_switchoff_none_at_or_below_tolerance():
    assert switchoff_remaining(3300.0, 3000.0) is None
    assert switchoff_remaining(3000.0, 3000.0) is None
    assert switchoff_remaining(0.0, 3000.0) is None


@pytest.mark.parametrize(
    "p_w,pn_w,expected_s",
    [
        # t = 180 * Pn / (P - 1.1 * Pn)
        (4000.0, 3000.0, 180.0 * 3000.0 / 700.0),
        (6600.0, 3000.0, 180.0 * 3000.0 / 3300.0),
        (3310.0, 3000.0, 180.0 * 3000.0 / 10.0),
        (9000.0, 4500.0, 180.0 * 4500.0 / (9000.0 - 4950.0)),
    ],
)
def test_switchoff_formula(p_w, pn_w, expected_s):
    t = switchoff_remaining(p_w, pn_w)
    assert t == pytest.approx(expected_s, rel=1e-12)


@given(st.floats(1, 5000), st.floats(500, 20000))
def test_switchoff_halves_when_margin_doubles(delta, pn):
    t1 = switchoff_remaining(1.1 * pn + delta, pn)
    t2 = switchoff_remaining(1.1 * pn + 2 * delta, pn)
    assert t1 / t2 == pytest.approx(2.0, rel=1e-9)


def test_switchoff_emergency_reference():
    # Against an armed limit the countdown runs with no tolerance factor.
    t = switchoff_remaining(3000.0, 2000.0, overrun_factor=1.0)
    assert t == pytest.approx(180.0 * 2000.0 / 1000.0)
    assert switchoff_remaining(2000.0, 2000.0, overrun_factor=1.0) is None


# -- load curve (T1) -------------------------------------------------------------


def test_one_day_constant_load():
    meter = make_meter(pn_w=3000.0, tick_s=60)
    frames = drive(meter, [1000.0] * (86400 // 60))
    t1 = [f for f in frames if f.frame_type is FrameType.T1]
    assert len(t1) == QUARTERS_PER_DAY
    assert [f.payload.quarter_index for f in t1] == list(range(96))
    assert [f.timestamp for f in t1] == [900 * (k + 1) for k in range(96)]
    assert all(f.payload.energy_wh == 250 for f in t1)
    assert all(f.payload.direction is EnergyDirection.WITHDRAWN for f in t1)
    assert meter.total_reported_wh == 24000


def test_quarter_index_wraps_on_second_day():
    meter = make_meter(tick_s=900)
    frames = drive(meter, [100.0] * (2 * 86400 // 900))
    t1 = [f for f in frames if f.frame_type is FrameType.T1]
    assert len(t1) == 2 * QUARTERS_PER_DAY
    assert t1[95].payload.quarter_index == 95
    assert t1[96].payload.quarter_index == 0
    assert t1[96].timestamp == 86400 + 900


def test_t1_energy_matches_profile_integral():
    rng = np.random.default_rng(7)
    tick = 300
    powers = rng.integers(0, 2500, size=4 * 3600 // tick).astype(float)
    meter = make_meter(pn_w=3000.0, tick_s=tick)
    frames = drive(meter, powers)
    t1 = [f for f in frames if f.frame_type is FrameType.T1]

    per_quarter = powers.reshape(-1, QUARTER_S // tick).sum(axis=1) * tick / 3600.0
    assert len(t1) == len(per_quarter)
    for frame, wh in zip(t1, per_quarter):
        assert abs(frame.payload.energy_wh - wh) <= 0.5 + 1e-9


# -- band crossings (T2) ----------------------------------------------------------


def _crossing_oracle(powers, pn_w):
    """Independent brute-force count of band-threshold crossings."""
    bands = np.clip(np.floor(10.0 * np.asarray(powers) / pn_w), 0, 10).astype(int)
    prev = np.concatenate(([0], bands[:-1]))
    return int(np.abs(bands - prev).sum())


def test_t2_count_matches_bruteforce_random_walk():
    rng = np.random.default_rng(21)
    pn = 3000.0
    powers = np.abs(np.cumsum(rng.normal(0, 120, size=6 * 3600))) % 3600.0
    meter = make_meter(pn_w=pn, energy_threshold_wh=None)
    frames = drive(meter, powers)
    t2 = [f for f in frames if f.frame_type is FrameType.T2]
    assert len(t2) == _crossing_oracle(powers, pn)
    assert all(1 <= f.payload.band_index <= 10 for f in t2)


def test_t2_multiband_jump_emits_one_frame_per_edge():
    meter = make_meter(pn_w=3000.0)
    up = meter.step(2850.0, 0)  # band 9
    assert [f.payload.band_index for f in up] == list(range(1, 10))
    assert all(f.payload.direction is CrossingDirection.UP for f in up)
    assert all(f.payload.power_w == 2850 for f in up)

    down = meter.step(100.0, 1)  # band 0
    assert [f.payload.band_index for f in down] == list(range(9, 0, -1))
    assert all(f.payload.direction is CrossingDirection.DOWN for f in down)


def test_t2_power_is_rounded_sample():
    meter = make_meter(pn_w=3000.0)
    (frame,) = meter.step(310.6, 0)
    assert frame.payload.power_w == 311


# -- exceedance (T3) --------------------------------------------------------------


def test_t3_power_exceedance_is_edge_triggered():
    meter = make_meter(pn_w=3000.0)
    frames = drive(meter, [2000.0, 3200.0, 3250.0, 2900.0, 3200.0])
    t3 = [f for f in frames if f.frame_type is FrameType.T3]
    assert [(f.payload.cause, f.payload.value) for f in t3] == [
        (ExceedanceCause.POWER_EXCEEDED, 3200),
        (ExceedanceCause.RESTORED, 2900),
        (ExceedanceCause.POWER_EXCEEDED, 3200),
    ]


def test_t3_energy_threshold_fires_once():
    meter = make_meter(pn_w=3000.0, tick_s=900, energy_threshold_wh=500.0)
    frames = drive(meter, [1000.0] * 8)  # 250 Wh per quarter
    alarms = [
        f
        for f in frames
        if f.frame_type is FrameType.T3
        and f.payload.cause is ExceedanceCause.ENERGY_THRESHOLD_EXCEEDED
    ]
    assert len(alarms) == 1
    assert alarms[0].timestamp == 900  # crosses 500 Wh during the second quarter
    assert alarms[0].payload.value == 500


# -- the cut countdown -------------------------------------------------------------


def test_overrun_leads_to_cut_at_formula_time():
    meter = make_meter(pn_w=3000.0)
    expected = 180.0 * 3000.0 / (4000.0 - 3300.0)
    frames = drive(meter, [4000.0] * 800)
    t4 = [f for f in frames if f.frame_type is FrameType.T4]
    assert len(t4) == 1
    assert t4[0].payload.event is SupplyEventKind.INTERRUPTION_START
    assert t4[0].timestamp == math.ceil(expected)
    assert not meter.supply_on
    assert meter.cut_deadline is None


def test_power_after_cut_reads_zero():
    meter = make_meter(pn_w=3000.0, tick_s=900)
    drive(meter, [40000.0] * 4)  # tripped on the second tick at the latest
    assert not meter.supply_on
    frames = meter.step(40000.0, 4 * 900)
    t1 = [f for f in frames if f.frame_type is FrameType.T1]
    assert t1 and t1[0].payload.energy_wh == 0


def test_recovery_before_deadline_clears_countdown():
    meter = make_meter(pn_w=3000.0)
    drive(meter, [4000.0] * 10)
    assert meter.cut_deadline is not None
    meter.step(3300.0, 10)
    assert meter.cut_deadline is None
    frames = drive(meter, [3300.0] * 1000, t0=11)
    assert not any(f.frame_type is FrameType.T4 for f in frames)
    assert meter.supply_on


def test_deadline_keeps_earliest_candidate():
    meter = make_meter(pn_w=3000.0)
    meter.step(3400.0, 0)
    slow = meter.cut_deadline
    meter.step(6000.0, 1)
    fast = meter.cut_deadline
    assert fast < slow
    meter.step(3400.0, 2)
    # Easing off without clearing the overrun must not push the cut back out.
    assert meter.cut_deadline == fast


def test_cut_emits_band_and_restore_frames_in_order():
    meter = make_meter(pn_w=3000.0)
    drive(meter, [6600.0] * 164)  # deadline = 180 * 3000 / 3300 = 163.6 s
    frames = meter.step(6600.0, 164)
    kinds = [f.frame_type for f in frames]
    assert kinds[0] is FrameType.T4
    assert kinds[1:-1] == [FrameType.T2] * 10
    assert kinds[-1] is FrameType.T3
    assert frames[-1].payload.cause is ExceedanceCause.RESTORED
    directions = {f.payload.direction for f in frames[1:-1]}
    assert directions == {CrossingDirection.DOWN}


# -- supply events -----------------------------------------------------------------


def test_supply_events_are_idempotent_and_carry_duration():
    meter = make_meter()
    start = meter.apply_supply_event(100, SupplyEventKind.INTERRUPTION_START)
    assert len(start) == 1 and start[0].payload.duration_s is None
    assert meter.apply_supply_event(150, SupplyEventKind.INTERRUPTION_START) == []
    end = meter.apply_supply_event(400, SupplyEventKind.INTERRUPTION_END)
    assert len(end) == 1 and end[0].payload.duration_s == 300
    assert meter.apply_supply_event(500, SupplyEventKind.INTERRUPTION_END) == []
    assert meter.supply_on


def test_voltage_event_does_not_touch_supply():
    meter = make_meter()
    frames = meter.apply_supply_event(10, SupplyEventKind.VOLTAGE_EVENT)
    assert frames[0].payload.event is SupplyEventKind.VOLTAGE_EVENT
    assert meter.supply_on


# -- emergency limit ----------------------------------------------------------------


def test_emergency_limit_tightens_reference():
    meter = make_meter(pn_w=3000.0)
    meter.arm_emergency_limit(2000.0, until_s=10_000)
    meter.step(3000.0, 0)  # legal against Pn, over the armed limit
    assert meter.cut_deadline == pytest.approx(180.0 * 2000.0 / 1000.0)
    frames = drive(meter, [3000.0] * 360, t0=1)
    t4 = [f for f in frames if f.frame_type is FrameType.T4]
    assert len(t4) == 1 and t4[0].timestamp == 360


def test_emergency_limit_expires():
    meter = make_meter(pn_w=3000.0)
    meter.arm_emergency_limit(2000.0, until_s=5)
    drive(meter, [3000.0] * 5)
    assert meter.cut_deadline is not None
    meter.step(3000.0, 5)  # expired: 3000 W is fine against 1.1 * 3000
    assert meter.emergency_limit_w is None
    assert meter.cut_deadline is None


def test_arming_drops_existing_deadline():
    meter = make_meter(pn_w=3000.0)
    drive(meter, [4000.0] * 5)
    assert meter.cut_deadline is not None
    meter.arm_emergency_limit(5000.0, until_s=1000)
    assert meter.cut_deadline is None
    meter.step(4000.0, 5)  # under the armed limit: no countdown at all
    assert meter.cut_deadline is None


# -- bookkeeping --------------------------------------------------------------------


def test_sequence_numbers_are_gapless_across_types():
    meter = make_meter(pn_w=3000.0, tick_s=300, energy_threshold_wh=100.0)
    frames = drive(meter, [0.0, 3500.0, 2000.0, 0.0, 6000.0, 6000.0] * 4)
    frames.extend(meter.apply_supply_event(7200, SupplyEventKind.VOLTAGE_EVENT))
    assert [f.seq for f in frames] == list(range(1, len(frames) + 1))
    assert meter.last_seq == len(frames)


def test_step_rejects_time_travel():
    meter = make_meter()
    meter.step(100.0, 0)
    with pytest.raises(ValueError, match="expected step at t=1"):
        meter.step(100.0, 5)
    with pytest.raises(ValueError, match="non-negative"):
        meter.step(-1.0, 1)


def test_first_step_must_be_tick_aligned():
    meter = make_meter(tick_s=60)
    with pytest.raises(ValueError, match="aligned"):
        meter.step(100.0, 30)
    meter.step(100.0, 60)  # any aligned origin is fine


@pytest.mark.parametrize(
    "kw",
    [
        {"pn_w": 0.0},
        {"pn_w": 3000.0, "tick_s": 7},
        {"pn_w": 3000.0, "overrun_factor": 0.9},
        {"pn_w": 3000.0, "switchoff_tau_s": 0.0},
        {"pn_w": 3000.0, "energy_threshold_wh": 0.0},
    ],
)
def test_config_validation(kw):
    with pytest.raises(ValueError):
        MeterConfig(**kw)
