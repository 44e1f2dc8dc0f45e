import csv
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from switched_fdo import detect as det
from switched_fdo.sim import SignalSpec, simulate

# squares of magnitudes below ~1e-154 are subnormal and lose relative precision
values = st.floats(-1e3, 1e3).filter(lambda v: v == 0 or abs(v) > 1e-100)
series = arrays(np.float64, st.integers(1, 300), elements=values)


def test_windowed_norm_of_zeros():
    assert not np.any(det.windowed_norm(np.zeros(50), 7))


def test_windowed_norm_constant():
    c, K = 0.3, 25
    out = det.windowed_norm(np.full(100, c), K)
    assert np.allclose(out[K - 1:], c * np.sqrt(K), rtol=1e-14)
    # partial windows at the start
    assert np.allclose(out[:K], c * np.sqrt(np.arange(1, K + 1)), rtol=1e-14)


def test_windowed_norm_vector_residual():
    r = np.array([[3.0, 4.0], [0.0, 0.0], [1.0, 0.0]])
    assert np.allclose(det.windowed_norm(r, 2), [5.0, 5.0, 1.0])


def test_window_samples_from_seconds():
    assert det.window_samples(0.1, 0.001) == 100
    assert det.window_samples(0.1, 0.01) == 10


@pytest.mark.parametrize("r, K", [(np.zeros(0), 3), (np.ones(5), 0), (np.ones(5), 1.5)])
def test_windowed_norm_errors(r, K):
    with pytest.raises(ValueError):
        det.windowed_norm(r, K)


@settings(max_examples=300, deadline=None)
@given(series, st.integers(1, 50))
def test_windowed_norm_matches_direct_sum(r, K):
    out = det.windowed_norm(r, K)
    ref = np.array([np.sqrt(np.sum(r[max(0, k - K + 1):k + 1] ** 2)) for k in range(len(r))])
    assert np.all(out >= 0)
    assert np.allclose(out, ref, rtol=1e-12, atol=1e-12 * max(1.0, np.abs(r).max()))


@settings(max_examples=300, deadline=None)
@given(series, st.integers(1, 50), st.floats(1e-3, 1e3))
def test_scaling_covariance(r, K, c):
    a = det.windowed_norm(r, K)
    b = det.windowed_norm(c * r, K)
    assert np.allclose(b, c * a, rtol=1e-12, atol=1e-300)
    J = float(np.median(a))
    ra = det.detect(a, J)
    rb = det.detect(b, c * J)
    # strict crossings may tie exactly at the threshold; off-tie steps must agree
    tie = np.isclose(a, J, rtol=1e-12, atol=0)
    assert np.array_equal(ra.alarm_mask[~tie], rb.alarm_mask[~tie])


@settings(max_examples=300, deadline=None)
@given(arrays(np.float64, st.integers(1, 200), elements=st.floats(0, 10)), st.floats(0, 10), st.floats(0, 10))
def test_raising_threshold_never_adds_alarms(nrm, j1, j2):
    lo, hi = sorted((j1, j2))
    a, b = det.detect(nrm, lo), det.detect(nrm, hi)
    assert np.all(b.alarm_mask <= a.alarm_mask)
    assert np.array_equal(a.alarm_mask, nrm > lo)


def test_no_alarm_below_threshold():
    rep = det.detect(np.full(20, 0.5), 1.0, fault_onset=5.0)
    assert rep.alarms == [] and rep.detection_delay is None and not rep.detected


def test_zero_threshold_alarms_on_first_nonzero_step():
    nrm = np.array([0.0, 0.0, 0.0, 1e-300, 0.0, 2.0])
    rep = det.detect(nrm, 0.0, sample_time=0.5)
    assert rep.alarms[0] == {"step": 3, "time": 1.5}
    assert [a["step"] for a in rep.alarms] == [3, 5]


def test_delay_and_false_alarm_bookkeeping():
    nrm = np.zeros(100)
    nrm[10] = 5.0      # before the fault: false alarm
    nrm[42:47] = 5.0   # fault response
    nrm[90] = 5.0      # long after the influence window: false alarm
    rep = det.detect(nrm, 1.0, fault_onset=0.4, sample_time=0.01, fault_end=0.5, window_samples=10)
    assert rep.detection_delay == pytest.approx(0.02) and rep.first_alarm_time == pytest.approx(0.42)
    assert [a["step"] for a in rep.false_alarms] == [10, 90]
    warm = det.detect(nrm, 1.0, fault_onset=0.4, sample_time=0.01, warmup=0.2, fault_end=0.5, window_samples=10)
    assert [a["step"] for a in warm.false_alarms] == [90]
    assert warm.alarm_mask[10]  # the mask itself is not truncated


def test_negative_threshold_rejected():
    with pytest.raises(ValueError):
        det.detect(np.ones(3), -1.0)


def test_exact_model_calibrates_to_zero(relaxed_cfg, relaxed_design):
    sig = SignalSpec.from_dict(relaxed_cfg.signals).without_fault().with_(
        horizon=2.0, disturbance={"kind": "gaussian_white", "amplitude": 0.0, "seed": 0})
    sig = sig.with_(xhat0=sig.x0)
    cal = det.calibrate_threshold(relaxed_cfg.plant, relaxed_design, sig, runs=3, warmup=0.0)
    assert cal.max_norm == 0.0 and cal.J_th == 0.0 and cal.seeds == [0, 1, 2]


def test_threshold_equal_to_own_supremum_has_no_false_alarm(sensor_cfg, sensor_design):
    sig = SignalSpec.from_dict(sensor_cfg.signals)
    cal = det.calibrate_threshold(sensor_cfg.plant, sensor_design, sig.without_fault(), runs=1, margin=1.0,
                                  warmup=1.0)
    tr = simulate(sensor_cfg.plant, sensor_design, sig.without_fault().with_seed(cal.seeds[0]))
    rep = det.evaluate_run(tr, sig.without_fault(), cal.J_th, warmup=1.0)
    assert cal.J_th > 0 and rep.alarms == []


def test_calibration_runs_are_alarm_free_with_margin(sensor_cfg, sensor_design):
    sig = SignalSpec.from_dict(sensor_cfg.signals)
    cal = det.calibrate_threshold(sensor_cfg.plant, sensor_design, sig, runs=5, margin=1.1, warmup=1.0)
    again = det.calibrate_threshold(sensor_cfg.plant, sensor_design, sig, runs=5, margin=1.1, warmup=1.0)
    assert cal == again
    assert cal.J_th == pytest.approx(1.1 * max(cal.per_run_max), rel=1e-15)
    for s in cal.seeds:
        tr = simulate(sensor_cfg.plant, sensor_design, sig.without_fault().with_seed(s))
        assert det.evaluate_run(tr, sig.without_fault(), cal.J_th, warmup=1.0).alarms == []


def test_calibration_argument_checks(sensor_cfg, sensor_design):
    sig = SignalSpec.from_dict(sensor_cfg.signals)
    with pytest.raises(ValueError):
        det.calibrate_threshold(sensor_cfg.plant, sensor_design, sig, runs=0)
    with pytest.raises(ValueError):
        det.calibrate_threshold(sensor_cfg.plant, sensor_design, sig, margin=0.5)


def test_sensor_fault_is_detected(tmp_path, sensor_cfg, sensor_design):
    sig = SignalSpec.from_dict(sensor_cfg.signals)
    dcfg = sensor_cfg.signals["detection"]
    cal = det.calibrate_threshold(sensor_cfg.plant, sensor_design, sig, runs=dcfg["runs"], margin=dcfg["margin"],
                                  warmup=dcfg["warmup"], seed=sig.seed + 1)
    for s in range(100, 105):
        tr = simulate(sensor_cfg.plant, sensor_design, sig.with_seed(s))
        rep = det.evaluate_run(tr, sig, cal.J_th, window=dcfg["window"], warmup=dcfg["warmup"],
                               calibration=cal.to_dict())
        assert rep.detected and rep.detection_delay <= 0.3
        assert rep.false_alarms == []
    rep.save(tmp_path / "detection.json")
    assert json.loads((tmp_path / "detection.json").read_text())["calibration"]["num_runs"] == dcfg["runs"]
    rep.norm_csv(tmp_path / "norm.csv")
    with open(tmp_path / "norm.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["t", "norm", "threshold", "alarm"] and len(rows) == len(tr.t) + 1
