"""Residual evaluation, threshold calibration and alarm logic.

The evaluation function is the trailing-window energy norm

    norm(k) = sqrt(sum_{j=k-K+1}^{k} r(j)^T r(j)),

with partial windows at the start of the series. An alarm is raised at every
sample where ``norm > J_th`` (strict).
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np

from .sim import SignalSpec, fault_window, simulate


def window_samples(window, sample_time) -> int:
    """Window length in samples, ``round(T / Ts)`` (at least 1)."""
    return max(1, int(round(float(window) / float(sample_time))))


def windowed_norm(r, K: int) -> np.ndarray:
    """Trailing-window 2-norm of a residual series.

    Parameters
    ----------
    r : array, shape (length,) or (length, p_r)
    K : int
        Window length in samples, ``K >= 1``.
    """
    r = np.asarray(r, dtype=float)
    if r.size == 0:
        raise ValueError("empty residual series")
    if int(K) != K or K < 1:
        raise ValueError("window length must be an integer >= 1")
    energy = r ** 2 if r.ndim == 1 else np.sum(r.reshape(r.shape[0], -1) ** 2, axis=1)
    # direct windowed sums: cumulative differences lose precision on long series
    sums = np.convolve(energy, np.ones(int(K)))[: energy.shape[0]]
    return np.sqrt(np.maximum(sums, 0.0))


@dataclass
class Calibration:
    J_th: float
    max_norm: float
    num_runs: int
    margin: float
    warmup: float
    window_samples: int
    seeds: list
    per_run_max: list

    def to_dict(self) -> dict:
        return {"J_th": self.J_th, "max_fault_free_norm": self.max_norm, "num_runs": self.num_runs,
                "margin": self.margin, "warmup": self.warmup, "window_samples": self.window_samples,
                "seeds": self.seeds, "per_run_max": self.per_run_max}


def calibrate_threshold(plant, design, signals: SignalSpec, runs: int = 50, margin: float = 1.1,
                        warmup: float = 4.0, window: float = 0.1, seed: int | None = None,
                        **sim_kwargs) -> Calibration:
    """Monte Carlo threshold: ``margin`` times the largest fault-free norm.

    Run ``i`` uses disturbance seed ``seed + i`` (``seed`` defaults to the
    signal spec's). Samples before ``warmup`` seconds are discarded. Any
    fault in ``signals`` is removed.
    """
    if runs < 1:
        raise ValueError("runs must be >= 1")
    if margin < 1:
        raise ValueError("margin must be >= 1")
    base = signals.without_fault()
    s0 = base.seed if seed is None else seed
    s0 = 0 if s0 is None else int(s0)
    K = window_samples(window, base.sample_time)
    k0 = int(round(warmup / base.sample_time))
    seeds, per_run = [], []
    for i in range(runs):
        tr = simulate(plant, design, base.with_seed(s0 + i), **sim_kwargs)
        nrm = windowed_norm(tr.r, K)[k0:]
        seeds.append(s0 + i)
        per_run.append(float(nrm.max()) if nrm.size else 0.0)
    mx = max(per_run)
    return Calibration(J_th=margin * mx, max_norm=mx, num_runs=runs, margin=float(margin), warmup=float(warmup),
                       window_samples=K, seeds=seeds, per_run_max=per_run)


@dataclass
class DetectionReport:
    """Alarm analysis of one norm series.

    ``alarm_mask`` is exactly ``norm_series > J_th``. ``alarms`` lists the
    first sample of each alarm episode at or after the warm-up;
    ``detection_delay`` is measured from the fault onset to the first alarm
    sample at or after it. ``false_alarms`` are episodes outside the fault's
    influence window ``[onset, t_off + window)``, or any episode when no fault
    is declared.
    """

    window_samples: int
    sample_time: float
    norm_series: np.ndarray
    J_th: float
    alarm_mask: np.ndarray
    alarms: list
    detection_delay: float | None
    first_alarm_time: float | None
    false_alarms: list
    fault_onset: float | None = None
    warmup: float = 0.0
    calibration: dict = field(default_factory=dict)

    @property
    def detected(self) -> bool:
        return self.detection_delay is not None

    def to_dict(self) -> dict:
        return {"window_samples": self.window_samples, "sample_time": self.sample_time, "J_th": self.J_th,
                "alarms": self.alarms, "detection_delay": self.detection_delay,
                "first_alarm_time": self.first_alarm_time, "false_alarms": self.false_alarms,
                "fault_onset": self.fault_onset, "warmup": self.warmup,
                "max_norm_post_warmup": float(self.norm_series[int(round(self.warmup / self.sample_time)):].max(
                    initial=0.0)),
                "calibration": self.calibration}

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)

    def norm_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "norm", "threshold", "alarm"])
            for k, v in enumerate(self.norm_series):
                w.writerow([repr(k * self.sample_time), repr(float(v)), repr(self.J_th), int(self.alarm_mask[k])])


def _episodes(mask, start):
    m = mask.copy()
    m[:start] = False
    rise = np.flatnonzero(m & ~np.concatenate([[False], m[:-1]]))
    return [int(k) for k in rise]


def detect(norm_series, J_th: float, fault_onset: float | None = None, sample_time: float = 1.0,
           warmup: float = 0.0, fault_end: float | None = None, window_samples: int = 1,
           calibration: dict | None = None) -> DetectionReport:
    """Compare a norm series to ``J_th`` and summarize alarms."""
    if J_th < 0:
        raise ValueError("J_th must be >= 0")
    nrm = np.asarray(norm_series, dtype=float)
    mask = nrm > J_th
    k0 = int(round(warmup / sample_time))
    starts = _episodes(mask, k0)
    alarms = [{"step": k, "time": k * sample_time} for k in starts]
    delay = first = None
    if fault_onset is not None:
        k_on = int(round(fault_onset / sample_time))
        hits = np.flatnonzero(mask[max(k_on, k0):])
        if hits.size:
            k = int(hits[0]) + max(k_on, k0)
            first = k * sample_time
            delay = (k - k_on) * sample_time
        k_end = len(nrm) if fault_end is None else int(round(fault_end / sample_time)) + window_samples
        false = [a for a in alarms if not k_on <= a["step"] < k_end]
    else:
        false = list(alarms)
    return DetectionReport(window_samples=int(window_samples), sample_time=float(sample_time), norm_series=nrm,
                           J_th=float(J_th), alarm_mask=mask, alarms=alarms, detection_delay=delay,
                           first_alarm_time=first, false_alarms=false, fault_onset=fault_onset,
                           warmup=float(warmup), calibration=calibration or {})


def evaluate_run(trace, signals: SignalSpec, J_th: float, window: float = 0.1, warmup: float = 4.0,
                 calibration: dict | None = None) -> DetectionReport:
    """Windowed norm and alarm analysis of a simulated trace."""
    Ts = signals.sample_time
    K = window_samples(window, Ts)
    win = fault_window(signals, Ts)
    onset = end = None
    if win is not None and win[1] > win[0]:
        onset, end = win[0] * Ts, win[1] * Ts
    return detect(windowed_norm(trace.r, K), J_th, fault_onset=onset, sample_time=Ts, warmup=warmup,
                  fault_end=end, window_samples=K, calibration=calibration)
