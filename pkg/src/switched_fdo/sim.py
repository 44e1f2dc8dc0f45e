"""Closed-loop simulation of the switched plant and the hybrid observer.

Per sample ``k`` the order is:

1. plant mode update: ``q`` advances along the mode sequence when the
   surface to the next mode changes sign between ``x(k-1)`` and ``x(k)``;
2. measurement ``y(k)``, observer output ``yhat(k) = C xhat(k)`` and residual
   ``r(k) = V (y(k) - yhat(k))``;
3. observer mode update on ``xhat`` with the same rule; on a switch the
   estimate is replaced by the jump update ``G_state xhat + G_output y``;
4. advance both systems to ``k + 1``.

Stored ``xhat`` and ``yhat`` are the pre-jump values, so the residual is
recomputable from the stored signals. Time-indexed arrays are time-major,
``(length, dim)``; the signal generators return channel-major matrices.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, replace

import numpy as np

from .model import ConfigError, SwitchedPlant, surface_value

DIVERGENCE_LIMIT = 1e9


class NonFiniteState(RuntimeError):
    """State norm exceeded the divergence limit or became non-finite."""

    def __init__(self, step, message=None):
        self.step = int(step)
        super().__init__(message or f"state diverged at step {self.step}")


class ScheduleMismatch(ValueError):
    pass


@dataclass(frozen=True)
class SignalSpec:
    """Excitation, timing and initial conditions of one experiment.

    ``disturbance`` is ``{"kind": "gaussian_white", "amplitude", "seed"}`` or
    ``{"kind": "none"}``; ``fault`` is ``{"kind": "pulse", "amplitude",
    "t_on", "t_off"}`` or ``{"kind": "none"}``; ``control`` is
    ``{"kind": "zero"}`` or ``{"kind": "sequence", "values": m x length}``.
    """

    sample_time: float
    horizon: float
    x0: tuple
    xhat0: tuple
    disturbance: dict = field(default_factory=lambda: {"kind": "none"})
    fault: dict = field(default_factory=lambda: {"kind": "none"})
    control: dict = field(default_factory=lambda: {"kind": "zero"})
    detection: dict = field(default_factory=dict)

    def __post_init__(self):
        if not (np.isfinite(self.sample_time) and self.sample_time > 0):
            raise ConfigError("sample_time must be > 0")
        if not (np.isfinite(self.horizon) and self.horizon >= 0):
            raise ConfigError("horizon must be >= 0")
        kind = self.disturbance.get("kind", "none")
        if kind not in ("none", "gaussian_white"):
            raise ConfigError(f"unknown disturbance kind {kind!r}")
        if kind == "gaussian_white" and not float(self.disturbance.get("amplitude", 0.0)) >= 0:
            raise ConfigError("disturbance amplitude must be >= 0")
        kind = self.fault.get("kind", "none")
        if kind not in ("none", "pulse"):
            raise ConfigError(f"unknown fault kind {kind!r}")
        if kind == "pulse":
            t_on, t_off = float(self.fault["t_on"]), float(self.fault["t_off"])
            if not 0 <= t_on <= t_off <= self.horizon:
                raise ConfigError("fault window must satisfy 0 <= t_on <= t_off <= horizon")
        if self.control.get("kind", "zero") not in ("zero", "sequence"):
            raise ConfigError(f"unknown control kind {self.control.get('kind')!r}")

    @property
    def length(self) -> int:
        """Number of samples, ``t = 0, Ts, ..., horizon``."""
        return int(round(self.horizon / self.sample_time)) + 1

    @property
    def seed(self):
        return self.disturbance.get("seed")

    @property
    def fault_onset(self):
        return float(self.fault["t_on"]) if self.fault.get("kind") == "pulse" else None

    def with_seed(self, seed) -> "SignalSpec":
        return replace(self, disturbance={**self.disturbance, "seed": int(seed)})

    def without_fault(self) -> "SignalSpec":
        return replace(self, fault={"kind": "none"})

    def with_(self, **changes) -> "SignalSpec":
        return replace(self, **changes)

    def to_dict(self) -> dict:
        out = {"sample_time": self.sample_time, "horizon": self.horizon,
               "x0": list(self.x0), "xhat0": list(self.xhat0),
               "disturbance": dict(self.disturbance), "fault": dict(self.fault),
               "control": dict(self.control)}
        if self.detection:
            out["detection"] = dict(self.detection)
        return out

    @classmethod
    def from_dict(cls, doc: dict) -> "SignalSpec":
        try:
            return cls(sample_time=float(doc["sample_time"]), horizon=float(doc["horizon"]),
                       x0=tuple(float(v) for v in doc["x0"]),
                       xhat0=tuple(float(v) for v in doc.get("xhat0", [0.0] * len(doc["x0"]))),
                       disturbance=dict(doc.get("disturbance", {"kind": "none"})),
                       fault=dict(doc.get("fault", {"kind": "none"})),
                       control=dict(doc.get("control", {"kind": "zero"})),
                       detection=dict(doc.get("detection", {})))
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"malformed signals section: {exc}") from None


def generate_disturbance(spec, length, channels=1) -> np.ndarray:
    """White Gaussian disturbance, ``channels x length``.

    Parameters
    ----------
    spec : SignalSpec or dict
        Either a full signal spec or its ``disturbance`` entry.
    """
    d = spec.disturbance if isinstance(spec, SignalSpec) else spec
    if d.get("kind", "none") == "none":
        return np.zeros((channels, length))
    amp = float(d.get("amplitude", 0.0))
    if amp < 0:
        raise ConfigError("disturbance amplitude must be >= 0")
    rng = np.random.default_rng(d.get("seed"))
    return amp * rng.standard_normal((channels, length))


def fault_window(spec, sample_time):
    """Integer sample range ``[k_on, k_off)`` of a pulse, or ``None``."""
    f = spec.fault if isinstance(spec, SignalSpec) else spec
    if f.get("kind", "none") == "none":
        return None
    return int(round(float(f["t_on"]) / sample_time)), int(round(float(f["t_off"]) / sample_time))


def generate_fault(spec, length, sample_time, channels=1) -> np.ndarray:
    """Pulse fault, ``channels x length``: ``amplitude`` on ``[t_on, t_off)``.

    The window is converted to sample indices by rounding, so a 0.3 s pulse
    at ``Ts = 1e-3`` has exactly 300 nonzero samples.
    """
    out = np.zeros((channels, length))
    win = fault_window(spec, sample_time)
    if win is not None:
        f = spec.fault if isinstance(spec, SignalSpec) else spec
        k_on, k_off = win
        out[:, max(k_on, 0):max(min(k_off, length), 0)] = float(f["amplitude"])
    return out


def _control(spec, plant, length):
    c = spec.control
    if c.get("kind", "zero") == "zero":
        return np.zeros((plant.m, length))
    u = np.atleast_2d(np.asarray(c["values"], dtype=float))
    if u.shape != (plant.m, length):
        raise ConfigError(f"control sequence must be {plant.m}x{length}, got {u.shape}")
    return u


@dataclass
class SimTrace:
    """Time-indexed simulation record (modes are 0-based internally).

    ``jumps`` lists ``(k, from_mode, to_mode)`` for every observer jump, which
    together with ``q`` and ``q_hat`` is the realized switching schedule.
    """

    t: np.ndarray
    x: np.ndarray
    xhat: np.ndarray
    q: np.ndarray
    q_hat: np.ndarray
    y: np.ndarray
    yhat: np.ndarray
    r: np.ndarray
    d: np.ndarray
    f: np.ndarray
    u: np.ndarray
    events: list = field(default_factory=list)
    jumps: list = field(default_factory=list)
    warnings: list = field(default_factory=list)

    @property
    def e(self) -> np.ndarray:
        return self.x - self.xhat

    @property
    def sample_time(self) -> float:
        return float(self.t[1] - self.t[0]) if len(self.t) > 1 else 1.0

    def mismatch_intervals(self) -> list:
        """Sample ranges ``[start, stop)`` where the observer mode differs."""
        bad = np.concatenate([[False], self.q != self.q_hat, [False]])
        edges = np.flatnonzero(np.diff(bad.astype(int)))
        return [(int(a), int(b)) for a, b in zip(edges[::2], edges[1::2])]

    def to_csv(self, path):
        n, p, pr = self.x.shape[1], self.y.shape[1], self.r.shape[1]
        md, nf = self.d.shape[1], self.f.shape[1]
        header = (["t", "q", "q_hat"] + [f"x{i + 1}" for i in range(n)] + [f"xhat{i + 1}" for i in range(n)]
                  + [f"y{i + 1}" for i in range(p)] + [f"r{i + 1}" for i in range(pr)]
                  + [f"d{i + 1}" for i in range(md)] + [f"f{i + 1}" for i in range(nf)])
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            for k in range(len(self.t)):
                w.writerow([repr(float(self.t[k])), int(self.q[k]) + 1, int(self.q_hat[k]) + 1]
                           + [repr(float(v)) for v in np.concatenate(
                               [self.x[k], self.xhat[k], self.y[k], self.r[k], self.d[k], self.f[k]])])

    def events_document(self) -> dict:
        return {"events": self.events, "warnings": self.warnings,
                "mismatch_intervals": [[a, b] for a, b in self.mismatch_intervals()]}

    def save_events(self, path):
        with open(path, "w") as fh:
            json.dump(self.events_document(), fh, indent=2)


def _crossed(prev, cur) -> bool:
    return (prev * cur < 0) or (cur == 0 and prev != 0)


def _check_finite(k, *vecs):
    for v in vecs:
        if not np.all(np.isfinite(v)) or np.linalg.norm(v) > DIVERGENCE_LIMIT:
            raise NonFiniteState(k)


class _SequenceTracker:
    """Position along the known mode sequence, advanced by surface crossings."""

    def __init__(self, plant, start):
        if not 0 <= start < len(plant.mode_sequence):
            raise ConfigError(f"sequence start {start} out of range")
        self.plant = plant
        self.pos = start
        self.prev = None

    @property
    def mode(self):
        return self.plant.mode_sequence[self.pos]

    @property
    def next_mode(self):
        seq = self.plant.mode_sequence
        return seq[self.pos + 1] if self.pos + 1 < len(seq) else None

    def step(self, state):
        """Return ``(switched, stray)``; ``stray`` names unexpected crossings."""
        nxt = self.next_mode
        switched, stray = False, []
        cur_vals = {sf.to_mode: surface_value(sf, state) for sf in self.plant.surfaces
                    if sf.from_mode == self.mode}
        if self.prev is not None:
            for to, val in cur_vals.items():
                if to in self.prev and _crossed(self.prev[to], val):
                    if to == nxt:
                        switched = True
                    else:
                        stray.append(to)
        if switched:
            self.pos += 1
            self.prev = {sf.to_mode: surface_value(sf, state) for sf in self.plant.surfaces
                         if sf.from_mode == self.mode}
        else:
            self.prev = cur_vals
        return switched, stray

    def reset_reference(self, state):
        self.prev = {sf.to_mode: surface_value(sf, state) for sf in self.plant.surfaces
                     if sf.from_mode == self.mode}


def simulate(plant: SwitchedPlant, design, signals: SignalSpec, *, d=None, f=None, u=None,
             plant_start=0, observer_start=None, forced_observer=None) -> SimTrace:
    """Simulate plant and hybrid observer.

    Parameters
    ----------
    plant : SwitchedPlant
    design : ObserverDesign
    signals : SignalSpec
    d, f, u : arrays, optional
        Channel-major overrides of the generated disturbance, fault and control.
    plant_start, observer_start : int
        Starting positions in ``plant.mode_sequence`` (the observer defaults to
        the plant's).
    forced_observer : (mode, k_start, k_stop), optional
        Force the observer to run with ``mode`` (0-based) on
        ``[k_start, k_stop)``. Its sequence tracking and jumps continue
        underneath and take over again at ``k_stop``.

    Raises
    ------
    NonFiniteState
        A state norm exceeded ``DIVERGENCE_LIMIT``.
    """
    n, p = plant.n, plant.p
    L = signals.length
    Ts = signals.sample_time
    d = generate_disturbance(signals, L, plant.m_d) if d is None else np.atleast_2d(np.asarray(d, dtype=float))
    f = generate_fault(signals, L, Ts, plant.l) if f is None else np.atleast_2d(np.asarray(f, dtype=float))
    u = _control(signals, plant, L) if u is None else np.atleast_2d(np.asarray(u, dtype=float))
    if d.shape != (plant.m_d, L) or f.shape != (plant.l, L) or u.shape != (plant.m, L):
        raise ConfigError("signal overrides have the wrong shape")
    x = np.asarray(signals.x0, dtype=float).reshape(n)
    xh = np.asarray(signals.xhat0, dtype=float).reshape(n)
    if x.shape != (n,) or xh.shape != (n,):
        raise ConfigError("initial states must have length n")
    V = np.atleast_2d(design.V)
    if len(design.K) != plant.N or V.shape[1] != p:
        raise ConfigError("design dimensions do not match the plant")
    C, B = plant.C, plant.B
    modes = plant.modes

    X = np.empty((L, n))
    XH = np.empty((L, n))
    Y = np.empty((L, p))
    YH = np.empty((L, p))
    R = np.empty((L, V.shape[0]))
    Q = np.empty(L, dtype=int)
    QH = np.empty(L, dtype=int)
    events, jumps, warns = [], [], []

    ptrack = _SequenceTracker(plant, plant_start)
    otrack = _SequenceTracker(plant, plant_start if observer_start is None else observer_start)
    for k in range(L):
        _check_finite(k, x, xh)
        q_old = ptrack.mode
        sw, stray = ptrack.step(x)
        if sw:
            events.append({"step": k, "time": k * Ts, "kind": "plant_switch", "from": q_old + 1, "to": ptrack.mode + 1})
        for to in stray:
            warns.append({"step": k, "kind": "out_of_sequence_crossing", "system": "plant",
                          "from": q_old + 1, "to": to + 1})
        q = ptrack.mode
        mq = modes[q]
        y = C @ x + mq.D_d @ d[:, k] + mq.D_f @ f[:, k]
        yh = C @ xh
        X[k], XH[k], Y[k], YH[k] = x, xh, y, yh
        R[k] = V @ (y - yh)
        Q[k] = q

        qh_old = otrack.mode
        sw, stray = otrack.step(xh)
        for to in stray:
            warns.append({"step": k, "kind": "out_of_sequence_crossing", "system": "observer",
                          "from": qh_old + 1, "to": to + 1})
        if sw:
            qh_new = otrack.mode
            Gs, Go = design.jump_maps[(qh_old, qh_new)]
            Pn = design.P[qh_new]
            # innovation form of G_state xh + G_output y, an exact no-op when C xh = y
            xj = xh + Go @ (y - C @ xh)
            pre, post = x - xh, x - xj
            events.append({"step": k, "time": k * Ts, "kind": "observer_switch_and_jump",
                           "from": qh_old + 1, "to": qh_new + 1,
                           "pre_energy": float(pre @ Pn @ pre), "post_energy": float(post @ Pn @ post),
                           "noise_free": bool(np.allclose(y, C @ x, rtol=0, atol=0))})
            jumps.append((k, qh_old, qh_new))
            xh = xj
        qh = otrack.mode
        if forced_observer is not None and forced_observer[1] <= k < forced_observer[2]:
            qh = int(forced_observer[0])
        QH[k] = qh

        mh = modes[qh]
        innov = y - C @ xh
        x_next = mq.A @ x + B @ u[:, k] + mq.B_d @ d[:, k] + mq.B_f @ f[:, k]
        xh = mh.A @ xh + B @ u[:, k] + design.K[qh] @ innov
        x = x_next

    if otrack.next_mode is None or ptrack.next_mode is None:
        for name, tr in (("plant", ptrack), ("observer", otrack)):
            if tr.next_mode is None:
                warns.append({"step": L - 1, "kind": "sequence_exhausted", "system": name})
    return SimTrace(t=np.arange(L) * Ts, x=X, xhat=XH, q=Q, q_hat=QH, y=Y, yhat=YH, r=R,
                    d=d.T.copy(), f=f.T.copy(), u=u.T.copy(), events=events, jumps=jumps, warnings=warns)


def decompose_residual(plant: SwitchedPlant, design, trace: SimTrace):
    """Split the residual into state-mismatch, disturbance and fault parts.

    Each part is an error subsystem run under the realized schedule of
    ``trace``. At an observer jump the linear part ``G_state`` acts on every
    component and the measurement correction ``-G_output D (.)`` is charged
    to the channel whose feedthrough produced it.

    Returns
    -------
    r_x, r_d, r_f : arrays shaped like ``trace.r``

    Raises
    ------
    ScheduleMismatch
        The trace arrays or jump list are inconsistent with the plant/design.
    """
    L = len(trace.t)
    for name in ("x", "xhat", "y", "r", "d", "f"):
        if getattr(trace, name).shape[0] != L:
            raise ScheduleMismatch(f"trace field {name} has a different length")
    if trace.q.shape != (L,) or trace.q_hat.shape != (L,):
        raise ScheduleMismatch("mode schedule length differs from the trace")
    if not (np.all((0 <= trace.q) & (trace.q < plant.N)) and np.all((0 <= trace.q_hat) & (trace.q_hat < plant.N))):
        raise ScheduleMismatch("mode schedule references an unknown mode")
    jumps = {}
    for k, a, b in trace.jumps:
        if (a, b) not in design.jump_maps:
            raise ScheduleMismatch(f"no jump map for {a + 1}->{b + 1}")
        jumps[int(k)] = design.jump_maps[(a, b)]

    C = plant.C
    V = np.atleast_2d(design.V)
    n = plant.n
    ex = trace.x[0] - trace.xhat[0]
    ed = np.zeros(n)
    ef = np.zeros(n)
    rx = np.empty_like(trace.r)
    rd = np.empty_like(trace.r)
    rf = np.empty_like(trace.r)
    for k in range(L):
        mq = plant.modes[trace.q[k]]
        dk, fk = trace.d[k], trace.f[k]
        rx[k] = V @ (C @ ex)
        rd[k] = V @ (C @ ed + mq.D_d @ dk)
        rf[k] = V @ (C @ ef + mq.D_f @ fk)
        if k in jumps:
            Gs, Go = jumps[k]
            ex = Gs @ ex
            ed = Gs @ ed - Go @ (mq.D_d @ dk)
            ef = Gs @ ef - Go @ (mq.D_f @ fk)
        qh = trace.q_hat[k]
        mh = plant.modes[qh]
        Kq = design.K[qh]
        Abar = mh.A - Kq @ C
        ex = Abar @ ex + (mq.A - mh.A) @ trace.x[k]
        ed = Abar @ ed + (mq.B_d - Kq @ mq.D_d) @ dk
        ef = Abar @ ef + (mq.B_f - Kq @ mq.D_f) @ fk
    return rx, rd, rf


def error_recursion(plant: SwitchedPlant, design, trace: SimTrace) -> np.ndarray:
    """Estimation error from the closed error dynamics (independent of ``xhat``)."""
    L = len(trace.t)
    jumps = {int(k): design.jump_maps[(a, b)] for k, a, b in trace.jumps}
    C = plant.C
    e = trace.x[0] - trace.xhat[0]
    out = np.empty((L, plant.n))
    for k in range(L):
        out[k] = e
        mq = plant.modes[trace.q[k]]
        w = mq.D_d @ trace.d[k] + mq.D_f @ trace.f[k]
        if k in jumps:
            Gs, Go = jumps[k]
            e = Gs @ e - Go @ w
        qh = trace.q_hat[k]
        mh = plant.modes[qh]
        Kq = design.K[qh]
        e = ((mh.A - Kq @ C) @ e + (mq.A - mh.A) @ trace.x[k]
             + mq.B_d @ trace.d[k] + mq.B_f @ trace.f[k] - Kq @ w)
    return out
