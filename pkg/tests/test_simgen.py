"""Synthetic generator: traffic sampling and signal rendering."""

import math

import numpy as np
import pytest

from bridgeflow.core import (
    LaneId,
    SensorModality,
    VehicleClass,
    VehicleEvent,
    category_index,
)
from bridgeflow.simgen import (
    BridgeModel,
    DEFAULT_AXLES,
    TrafficModel,
    accel_response,
    default_bridge,
    default_traffic,
    iter_render_chunks,
    render_signals,
    sample_traffic,
    strain_response,
)

QUIET = BridgeModel(noise_std_accel=0.0, noise_std_strain=0.0)


def one_event(cls=VehicleClass.HEAVY, lane=LaneId.RIGHT_SLOW, speed=90.0, t_entry=10.0):
    dwell = 25.0 / (speed / 3.6)
    return VehicleEvent(1, cls, lane, speed, t_entry, t_entry + dwell,
                        DEFAULT_AXLES[cls])


# ---------------------------------------------------------------- models

def test_default_bridge_layout():
    b = default_bridge()
    assert b.n_nodes == 8
    assert b.violations() == []
    assert b.node_x[:4] == (1.8,) * 4 and b.node_x[4:] == (5.4,) * 4
    assert b.node_y[:4] == b.node_y[4:] == (3.125, 9.375, 15.625, 21.875)
    assert all(3.0 <= f <= 8.0 for f in b.modal_freq)
    # Same-girder loads couple at unit gain, opposite girder at 0.35.
    assert b.coupling_gain(LaneId.RIGHT_SLOW, 4) == 1.0
    assert b.coupling_gain(LaneId.RIGHT_SLOW, 0) == 0.35
    assert b.coupling_gain(LaneId.LEFT_OVERTAKING, 0) == 1.0
    assert b.coupling_gain(LaneId.LEFT_OVERTAKING, 4) == 0.35


def test_default_traffic_rates_match_weekly_counts():
    t = default_traffic()
    assert t.violations() == []
    week = {"light_right": 68498, "light_left": 55572,
            "heavy_right": 4784, "heavy_left": 52}
    for name, count in week.items():
        cls, lane = name.split("_")
        cat = category_index(VehicleClass(cls),
                             LaneId.LEFT_OVERTAKING if lane == "left" else LaneId.RIGHT_SLOW)
        assert t.hourly_rate[cat] == pytest.approx(count / 70.0, rel=1e-12)


def test_model_violations_flagged():
    assert BridgeModel(damping_ratio=1.5).violations()
    assert BridgeModel(coupling=((1.0, 0.4), (0.3, 1.0))).violations()
    assert TrafficModel(hourly_rate=(1.0, 1.0, 1.0)).violations()
    assert TrafficModel(speed_mean_kmh=(20.0, 85.0)).violations()


# ---------------------------------------------------------------- traffic

def test_sample_traffic_deterministic():
    a = sample_traffic(default_traffic(), 1800.0, seed=7)
    b = sample_traffic(default_traffic(), 1800.0, seed=7)
    assert a == b
    c = sample_traffic(default_traffic(), 1800.0, seed=8)
    assert a != c


def test_sample_traffic_chunk_prefix_property():
    """The first hour of a two-hour scenario is the one-hour scenario:
    chunks are seeded independently and thinning never reaches backwards."""
    short = sample_traffic(default_traffic(), 3600.0, seed=3)
    long = sample_traffic(default_traffic(), 7200.0, seed=3)
    prefix = [e for e in long if e.t_entry < 3600.0]
    assert prefix == short[: len(prefix)] and len(prefix) == len(short)


def test_sample_traffic_headway_enforced_across_chunks():
    events = sample_traffic(default_traffic(), 7200.0, seed=11)
    for lane in (LaneId.LEFT_OVERTAKING, LaneId.RIGHT_SLOW):
        entries = np.array([e.t_entry for e in events if e.lane is lane])
        assert np.all(np.diff(entries) >= 0.5 - 1e-12)


def test_sample_traffic_speeds_truncated_and_sane():
    events = sample_traffic(default_traffic(), 3600.0, seed=5)
    speeds = np.array([e.speed_kmh for e in events])
    assert np.all(speeds > 30.0)
    light = np.array([e.speed_kmh for e in events if e.vehicle_class is VehicleClass.LIGHT])
    heavy = np.array([e.speed_kmh for e in events if e.vehicle_class is VehicleClass.HEAVY])
    assert abs(light.mean() - 96.5) < 3.0
    assert abs(heavy.mean() - 85.0) < 8.0


def test_sample_traffic_event_structure():
    events = sample_traffic(default_traffic(), 600.0, seed=2)
    assert [e.event_id for e in events] == list(range(1, len(events) + 1))
    for e in events:
        assert e.axle_count == DEFAULT_AXLES[e.vehicle_class]
        assert e.t_exit - e.t_entry == pytest.approx(25.0 / (e.speed_kmh / 3.6))
        assert e.violations(25.0) == []
    entries = [e.t_entry for e in events]
    assert entries == sorted(entries)


def test_sample_traffic_counts_near_rates():
    """Thinning a rate-r Poisson stream with dead time d retains roughly
    r / (1 + r d); counts should land between that and the nominal rate."""
    model = default_traffic()
    hours = 10.0
    events = sample_traffic(model, hours * 3600.0, seed=13)
    for lane in (LaneId.LEFT_OVERTAKING, LaneId.RIGHT_SLOW):
        nominal = sum(
            model.hourly_rate[category_index(cls, lane)]
            for cls in (VehicleClass.LIGHT, VehicleClass.HEAVY)
        )
        r = nominal / 3600.0
        expected = nominal / (1.0 + r * model.min_headway)
        n = sum(1 for e in events if e.lane is lane) / hours
        assert 0.9 * expected < n < 1.02 * nominal


def test_heavy_left_share_below_one_per_mille():
    events = sample_traffic(default_traffic(), 20 * 3600.0, seed=17)
    heavy_left = sum(
        1
        for e in events
        if e.vehicle_class is VehicleClass.HEAVY and e.lane is LaneId.LEFT_OVERTAKING
    )
    assert heavy_left >= 1  # rare but present
    assert heavy_left / len(events) < 1e-3


def test_sample_traffic_rejects_bad_inputs():
    with pytest.raises(ValueError):
        sample_traffic(default_traffic(), 0.0, seed=1)
    with pytest.raises(ValueError):
        sample_traffic(TrafficModel(hourly_rate=(-1.0, 1.0, 1.0, 1.0)), 60.0, seed=1)


# ---------------------------------------------------------------- responses

def test_strain_triangle_peak_and_support():
    # 90 km/h = 25 m/s; node 5 sits at y = 9.375 m, reached 0.375 s in.
    ev = one_event(speed=90.0, t_entry=10.0)
    t_peak = 10.0 + 9.375 / 25.0
    times = np.array([9.99, 10.0, t_peak, 10.9999, 11.0001, 12.0])
    resp = strain_response(ev, 5, QUIET, times)
    assert resp[0] == 0.0 and resp[-1] == 0.0 and resp[4] == 0.0
    # Peak: weight 25 t x unit gain x unit coupling x unit influence.
    assert resp[2] == pytest.approx(25.0, abs=1e-12)
    # At entry the load is 9.375 m from the node: 1 - 9.375/12.5 = 0.25.
    assert resp[1] == pytest.approx(25.0 * 0.25, abs=1e-12)


def test_strain_light_vehicle_weight():
    ev = one_event(cls=VehicleClass.LIGHT, speed=90.0)
    times = np.array([10.0 + 9.375 / 25.0])
    assert strain_response(ev, 5, QUIET, times)[0] == pytest.approx(2.0)


def test_accel_zero_before_node_passage():
    ev = one_event(speed=90.0, t_entry=10.0)
    t_pass = 10.0 + 3.125 / 25.0
    times = np.array([9.0, 10.0, t_pass - 1e-6, t_pass])
    resp = accel_response(ev, 4, QUIET, times)
    assert np.all(resp[:3] == 0.0)
    assert resp[3] == pytest.approx(0.0, abs=1e-12)  # sin(0)


def test_accel_log_decrement_matches_damping():
    """Successive ring-down peaks decay by delta = 2 pi zeta / sqrt(1-zeta^2)."""
    ev = one_event(speed=90.0, t_entry=0.0)
    t_pass = 3.125 / 25.0  # node 4, f = 5 Hz
    times = t_pass + np.arange(0, 10.0, 1.0 / 2500.0)
    resp = accel_response(ev, 4, QUIET, times)
    from scipy.signal import find_peaks

    peaks, _ = find_peaks(resp)
    heights = resp[peaks]
    assert len(heights) >= 12
    delta = math.log(heights[0] / heights[10]) / 10.0
    zeta = QUIET.damping_ratio
    expected = 2 * math.pi * zeta / math.sqrt(1 - zeta * zeta)
    assert delta == pytest.approx(expected, rel=0.02)


def test_accel_amplitude_scales_with_weight_speed_coupling():
    times = np.arange(0.0, 30.0, 1.0 / 250.0)
    heavy = accel_response(one_event(speed=90.0, t_entry=5.0), 4, QUIET, times)
    light = accel_response(
        one_event(cls=VehicleClass.LIGHT, speed=90.0, t_entry=5.0), 4, QUIET, times
    )
    assert np.abs(heavy).max() / np.abs(light).max() == pytest.approx(12.5, rel=1e-9)
    # Expected first-peak scale: gain x weight x speed.
    assert np.abs(heavy).max() == pytest.approx(0.003 * 25.0 * 25.0, rel=0.05)


def test_cross_girder_coupling_ratio():
    ev = one_event(speed=90.0, t_entry=5.0)  # right lane
    times = np.arange(0.0, 40.0, 1.0 / 250.0)
    near_a = accel_response(ev, 4, QUIET, times)
    far_a = accel_response(ev, 0, QUIET, times)
    assert np.abs(far_a).max() / np.abs(near_a).max() == pytest.approx(0.35, rel=0.01)
    t100 = np.arange(0.0, 40.0, 1.0 / 100.0)
    near_s = strain_response(ev, 5, QUIET, t100)
    far_s = strain_response(ev, 1, QUIET, t100)  # same station, other girder
    assert np.abs(far_s).max() / np.abs(near_s).max() == pytest.approx(0.35, rel=1e-12)


def test_responses_superpose():
    e1 = one_event(speed=90.0, t_entry=3.0)
    e2 = one_event(cls=VehicleClass.LIGHT, lane=LaneId.LEFT_OVERTAKING,
                   speed=108.0, t_entry=4.0)
    _, strain = render_signals([e1, e2], QUIET, 60.0, seed=0)
    _, s1 = render_signals([e1], QUIET, 60.0, seed=0)
    _, s2 = render_signals([e2], QUIET, 60.0, seed=0)
    for node in range(8):
        np.testing.assert_allclose(
            strain[node].samples, s1[node].samples + s2[node].samples, atol=1e-12
        )


# ---------------------------------------------------------------- rendering

def test_render_signals_shapes_and_rates():
    accel, strain = render_signals([], default_bridge(), 10.0, seed=4, t0=100.0)
    assert len(accel) == len(strain) == 8
    for rec in accel:
        assert rec.modality is SensorModality.ACCELERATION
        assert rec.sample_rate == 250.0 and rec.t0 == 100.0
        assert rec.samples.shape == (2500,)
    for rec in strain:
        assert rec.sample_rate == 100.0 and rec.samples.shape == (1000,)
    assert [r.sensor_id for r in accel] == list(range(1, 9))


def test_render_noise_deterministic_per_seed():
    a1, s1 = render_signals([], default_bridge(), 5.0, seed=9)
    a2, s2 = render_signals([], default_bridge(), 5.0, seed=9)
    a3, _ = render_signals([], default_bridge(), 5.0, seed=10)
    np.testing.assert_array_equal(a1[0].samples, a2[0].samples)
    np.testing.assert_array_equal(s1[3].samples, s2[3].samples)
    assert not np.array_equal(a1[0].samples, a3[0].samples)
    assert abs(float(np.std(a1[0].samples)) - 0.02) < 0.002


def test_chunked_render_matches_direct_evaluation():
    """An event straddling the hour boundary renders identically whether
    chunks are assembled or the response is evaluated on the full grid."""
    ev = one_event(speed=90.0, t_entry=3595.0)
    rate_a, rate_s = 2.0, 1.0  # keep the two-hour grid small
    blocks = list(
        iter_render_chunks([ev], QUIET, 7200.0, seed=0,
                           rate_accel=rate_a, rate_strain=rate_s)
    )
    assert [c for c, _, _ in blocks] == [0, 1]
    accel = np.concatenate([b[SensorModality.ACCELERATION] for _, _, b in blocks], axis=1)
    strain = np.concatenate([b[SensorModality.STRAIN] for _, _, b in blocks], axis=1)
    t_a = np.arange(int(7200 * rate_a)) / rate_a
    t_s = np.arange(int(7200 * rate_s)) / rate_s
    # The generator zeroes ring-downs once the envelope is below 1e-9 of
    # peak; allow that much slack against the untruncated oracle.
    for node in range(8):
        np.testing.assert_allclose(accel[node], accel_response(ev, node, QUIET, t_a),
                                   atol=1e-7)
        np.testing.assert_allclose(strain[node], strain_response(ev, node, QUIET, t_s),
                                   atol=1e-12)
    assert np.abs(accel).max() > 0  # the tail actually crosses the boundary
    assert np.abs(accel[4][blocks[0][2][SensorModality.ACCELERATION].shape[1]:]).max() > 0


def test_iter_render_partial_last_chunk():
    chunks = list(
        iter_render_chunks([], QUIET, 3630.0, seed=0, rate_accel=10.0, rate_strain=5.0)
    )
    assert len(chunks) == 2
    assert chunks[0][2][SensorModality.ACCELERATION].shape == (8, 36000)
    assert chunks[1][2][SensorModality.ACCELERATION].shape == (8, 300)
    assert chunks[1][2][SensorModality.STRAIN].shape == (8, 150)
    assert chunks[1][1] == 3600.0


def test_render_rejects_invalid_bridge():
    with pytest.raises(ValueError):
        list(iter_render_chunks([], BridgeModel(damping_ratio=0.0), 10.0, seed=0))
