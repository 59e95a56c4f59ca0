import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from magmap.calibration import CalibrationParams, forward_model
from magmap.ingest import (FlightLog, LogFormatError, MagSample, MagSeries, ObservationSet, PoseSeries,
                           downsample, median_filter, merge_observations, preprocess, read_flight_log,
                           read_observations, replace_stale, to_world, write_flight_log, write_observations)
from magmap.sim import CorruptionProfile, evaluate_field, lawnmower_trajectory, simulate_flight


def _series(values, rate=200.0, age=None):
    v = np.asarray(values, dtype=float)
    b = np.column_stack([v, 2 * v, -v])
    return MagSeries(np.arange(len(v)) / rate, b, age)


def _hand_median(x, window):
    h = window // 2
    n = len(x)
    out = []
    for i in range(n):
        k = min(h, i, n - 1 - i)
        out.append(sorted(x[i - k:i + k + 1])[k])
    return np.array(out, dtype=float)


def test_median_removes_single_spike():
    out = median_filter(_series([1, 1, 9, 1, 1]), 5).field_body
    assert out[2, 0] == 1.0


def test_median_constant_series_unchanged():
    s = _series(np.full(20, 3.5))
    np.testing.assert_array_equal(median_filter(s, 5).field_body, s.field_body)


def test_median_shrinking_edges_by_hand():
    out = median_filter(_series([1, 9, 9, 1, 1]), 5).field_body[:, 0]
    # i=0: [1]; i=1: [1,9,9]; i=2: all five; i=3: [9,1,1]; i=4: [1]
    np.testing.assert_array_equal(out, [1, 9, 1, 1, 1])


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(-100, 100, allow_nan=False), min_size=5, max_size=60),
       st.sampled_from([1, 3, 5, 7]))
def test_median_matches_hand_rule(values, window):
    if window > len(values):
        return
    out = median_filter(_series(values), window).field_body
    np.testing.assert_array_equal(out[:, 0], _hand_median(values, window))
    np.testing.assert_array_equal(out[:, 2], _hand_median([-v for v in values], window))


@pytest.mark.parametrize("window", [0, 2, 4, -3, 2.5])
def test_median_rejects_bad_windows(window):
    with pytest.raises(ValueError):
        median_filter(_series(np.arange(10)), window)


def test_median_rejects_window_longer_than_series():
    with pytest.raises(ValueError):
        median_filter(_series([1, 2, 3]), 5)


def test_median_accepts_sample_lists():
    samples = [MagSample(0.01 * i, np.array([i, 0.0, 0.0])) for i in range(7)]
    out = median_filter(samples, 3)
    np.testing.assert_array_equal(out.field_body[:, 0], np.arange(7))


def test_downsample_count_for_one_minute():
    s = _series(np.zeros(12_000), rate=200.0)
    out = downsample(s, 2.0)
    assert len(out) == 120
    np.testing.assert_allclose(np.diff(out.t), 0.5)


def test_downsample_native_rate_is_identity():
    s = _series(np.arange(50), rate=200.0)
    out = downsample(s, 200.0)
    np.testing.assert_array_equal(out.t, s.t)


def test_downsample_collapses_repeated_pick_across_gap():
    # a lone sample at 1.2 s with 0.6 s gaps on both sides
    t = np.round(np.concatenate([np.arange(0, 0.65, 0.1), [1.2], np.arange(1.8, 2.95, 0.1)]), 9)
    s = MagSeries(t, np.zeros((len(t), 3)))
    out = downsample(s, 2.0)
    # slots 0, 0.5, ..., 2.5; 1.0 and 1.5 (a tie, earlier wins) both pick 1.2, kept once
    np.testing.assert_allclose(out.t, [0.0, 0.5, 1.2, 2.0, 2.5])


def test_downsample_errors():
    with pytest.raises(ValueError):
        downsample(MagSeries(np.array([]), np.zeros((0, 3))), 2.0)
    with pytest.raises(ValueError):
        downsample(_series(np.zeros(10), rate=10.0), 20.0)


def test_replace_stale_noop_when_all_fresh():
    s = _series(np.arange(10), age=np.full(10, 0.005))
    out = replace_stale(s)
    np.testing.assert_array_equal(out.t, s.t)
    np.testing.assert_array_equal(out.field_body, s.field_body)


def test_replace_stale_uses_nearer_neighbour():
    pool = MagSeries([0.0, 0.01, 0.03], np.array([[1.0, 0, 0], [2.0, 0, 0], [3.0, 0, 0]]), [0.0, 0.2, 0.0])
    picked = pool.take([1])
    out = replace_stale(picked, 0.05, pool=pool)
    assert out.t.tolist() == [0.0]
    assert out.field_body[0, 0] == 1.0


def test_replace_stale_drops_redundant_replacement():
    s = MagSeries([0.0, 0.5, 1.0], np.eye(3), [0.0, 0.3, 0.0])
    out = replace_stale(s, 0.05)
    # the stale middle sample is equidistant; the earlier fresh one wins and is already present
    assert len(out) == 2
    assert np.all(out.pose_age <= 0.05)


def test_replace_stale_without_any_fresh_sample():
    s = _series(np.arange(4), age=np.full(4, 1.0))
    with pytest.raises(ValueError):
        replace_stale(s)


def _poses(t, pos, quats):
    return PoseSeries(np.asarray(t, float), np.asarray(pos, float), np.asarray(quats, float))


def test_to_world_identity():
    poses = _poses([0, 1], [[0, 0, 0], [1, 0, 0]], [[1, 0, 0, 0], [1, 0, 0, 0]])
    mags = MagSeries([0.5], [[3.0, -2.0, 7.0]])
    obs = to_world(mags, poses)
    np.testing.assert_allclose(obs.Y, [[3.0, -2.0, 7.0]])
    np.testing.assert_allclose(obs.X, [[0.5, 0, 0]])


def test_to_world_yaw_ninety_degrees():
    q = [np.cos(np.pi / 4), 0, 0, np.sin(np.pi / 4)]
    poses = _poses([0, 1], [[0, 0, 0]] * 2, [q, q])
    obs = to_world(MagSeries([0.2], [[1.0, 0.0, 0.0]]), poses)
    np.testing.assert_allclose(obs.Y, [[0.0, 1.0, 0.0]], atol=1e-15)


def test_to_world_applies_calibration():
    p = CalibrationParams((1.1, 0.9, 1.0), (2.0, -1.0, 0.5), (0.02, 0.01, -0.03))
    truth = np.array([[10.0, -20.0, 45.0]])
    poses = _poses([0, 1], [[0, 0, 0]] * 2, [[1, 0, 0, 0]] * 2)
    obs = to_world(MagSeries([0.5], forward_model(p, truth)), poses, p)
    np.testing.assert_allclose(obs.Y, truth, atol=1e-12)


def test_to_world_rejects_samples_outside_pose_range():
    poses = _poses([0, 1], [[0, 0, 0]] * 2, [[1, 0, 0, 0]] * 2)
    with pytest.raises(ValueError):
        to_world(MagSeries([1.5], [[1.0, 0, 0]]), poses)


def test_simulator_round_trip(env):
    traj = lawnmower_trajectory([-1.0], sample_rate=50.0, attitude_sd_deg=5.0, seed=3)
    log = simulate_flight(env, traj, CorruptionProfile(), seed=0)
    obs = to_world(log.mags, log.poses)
    np.testing.assert_allclose(obs.Y, evaluate_field(env, obs.X), atol=1e-9)


def test_preprocess_on_clean_log_reproduces_field(env):
    traj = lawnmower_trajectory([-1.5], sample_rate=200.0)
    log = simulate_flight(env, traj, CorruptionProfile(), seed=0, flight_id="t1_02")
    obs = preprocess(log, 2.0)
    assert obs.sources == ("t1_02",)
    assert len(obs) == int(np.floor(traj.t[-1] * 2 + 1e-9)) + 1
    # a window-5 median of a smooth field moves it only slightly
    np.testing.assert_allclose(obs.Y, evaluate_field(env, obs.X), atol=1e-3)


def test_pose_series_validation():
    with pytest.raises(ValueError):
        _poses([0, 0], [[0, 0, 0]] * 2, [[1, 0, 0, 0]] * 2)
    with pytest.raises(ValueError):
        _poses([0], [[0, 0, 0]], [[1, 0.1, 0, 0]])


def test_observation_set_norms_and_merge():
    a = ObservationSet(np.zeros((2, 3)), [[3, 4, 0], [0, 0, 0]], sources=("t1_00",))
    b = ObservationSet(np.ones((1, 3)), [[1, 2, 2]], sources=("t1_01",))
    np.testing.assert_allclose(a.norms, [5, 0])
    m = merge_observations([a, b])
    assert len(m) == 3
    assert m.sources == ("t1_00", "t1_01")


def test_flight_log_csv_round_trip(tmp_path, env):
    traj = lawnmower_trajectory([-1.0], sample_rate=100.0, attitude_sd_deg=3.0)
    prof = CorruptionProfile(gaussian_noise_sd=0.1, pose_dropouts=((3.0, 3.3),))
    log = simulate_flight(env, traj, prof, seed=4, flight_id="t2_05")
    path = tmp_path / "t2_05.csv"
    write_flight_log(log, path)
    back = read_flight_log(path)
    assert back.id == "t2_05"
    np.testing.assert_array_equal(back.mags.t, log.mags.t)
    np.testing.assert_array_equal(back.mags.field_body, log.mags.field_body)
    np.testing.assert_allclose(back.mags.pose_age, log.mags.pose_age, atol=1e-12)
    assert len(back.poses) == len(log.poses)
    np.testing.assert_allclose(back.poses.position, log.poses.position, atol=1e-12)


def test_flight_log_without_age_column(tmp_path):
    poses = _poses([0.0, 0.1], [[0, 0, 0], [0.1, 0, 0]], [[1, 0, 0, 0]] * 2)
    log = FlightLog("t0_00", poses, MagSeries([0.0, 0.1], np.ones((2, 3))))
    path = tmp_path / "log.csv"
    write_flight_log(log, path)
    assert path.read_text().splitlines()[0] == "t_s,px,py,pz,qw,qx,qy,qz,bx_uT,by_uT,bz_uT"


def test_observation_csv_round_trip(tmp_path, rng):
    obs = ObservationSet(rng.normal(size=(5, 3)), rng.normal(size=(5, 3)), np.arange(5.0))
    path = tmp_path / "obs.csv"
    write_observations(obs, path)
    back = read_observations(path)
    np.testing.assert_array_equal(back.X, obs.X)
    np.testing.assert_array_equal(back.Y, obs.Y)
    np.testing.assert_array_equal(back.t, obs.t)


def test_malformed_csv_reports_line_and_field(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("x,y,z,bx_uT,by_uT,bz_uT,t_s\n0,0,0,1,2,3,0\n0,0,0,1,oops,3,1\n")
    with pytest.raises(LogFormatError, match=r"line 3: field 'by_uT'"):
        read_observations(path)


def test_missing_column_and_short_row(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("x,y,z,bx_uT,by_uT,t_s\n0,0,0,1,2,0\n")
    with pytest.raises(LogFormatError, match="bz_uT"):
        read_observations(path)
    path.write_text("x,y,z,bx_uT,by_uT,bz_uT,t_s\n0,0,0,1,2\n")
    with pytest.raises(LogFormatError, match="line 2"):
        read_observations(path)


def test_median_before_downsample_matters_on_spiky_data():
    v = np.zeros(400)
    v[100::100] = 3.0  # spikes exactly on the 2 Hz picks, clear of the edges
    s = _series(v)
    filtered_first = downsample(median_filter(s, 5), 2.0).field_body[:, 0]
    picked_first = median_filter(downsample(s, 2.0), 1).field_body[:, 0]
    np.testing.assert_array_equal(filtered_first, 0.0)
    np.testing.assert_array_equal(picked_first, [0.0, 3.0, 3.0, 3.0])
