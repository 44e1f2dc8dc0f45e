"""Switched plant, switching geometry and experiment configuration.

Config documents are JSON. Mode labels in documents are 1-based (``mode 1``,
``mode 2``, ...); all in-memory indices are 0-based.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, fields, replace
from typing import Any, Mapping

import numpy as np


class ConfigError(ValueError):
    """Malformed or inconsistent configuration document."""


def _frozen(a, shape=None, name="matrix"):
    arr = np.array(a, dtype=float)
    if shape is not None and arr.ndim < 2 and arr.size == shape[0] * shape[1]:
        # row/column vectors and scalars may be written without nesting
        arr = arr.reshape(shape)
    if shape is not None and arr.shape != tuple(shape):
        raise ConfigError(f"dimension mismatch: {name} has shape {arr.shape}, expected {tuple(shape)}")
    if not np.all(np.isfinite(arr)):
        raise ConfigError(f"{name} has non-finite entries")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class ModeMatrices:
    """Per-mode matrices of the switched plant.

    Attributes
    ----------
    A : (n, n) state matrix.
    B_d : (n, m_d) disturbance input matrix.
    B_f : (n, l) fault input matrix.
    D_d : (p, m_d) disturbance feedthrough.
    D_f : (p, l) fault feedthrough.
    """

    A: np.ndarray
    B_d: np.ndarray
    B_f: np.ndarray
    D_d: np.ndarray
    D_f: np.ndarray

    @property
    def has_fault_channel(self) -> bool:
        return bool(np.any(self.B_f != 0) or np.any(self.D_f != 0))


@dataclass(frozen=True, eq=False)
class SwitchingSurface:
    """Hyperplane ``s @ x = 0`` triggering the transition ``from_mode -> to_mode``."""

    s: np.ndarray
    from_mode: int
    to_mode: int


def surface_value(surface: SwitchingSurface, x) -> float:
    """Signed distance-like value ``s @ x`` of a state relative to a surface."""
    x = np.asarray(x, dtype=float)
    if x.shape != surface.s.shape:
        raise ValueError(f"dimension mismatch: state has shape {x.shape}, surface normal {surface.s.shape}")
    return float(surface.s @ x)


def observability_rank(A, C) -> int:
    A = np.asarray(A, dtype=float)
    C = np.atleast_2d(np.asarray(C, dtype=float))
    n = A.shape[0]
    blocks = [C]
    for _ in range(n - 1):
        blocks.append(blocks[-1] @ A)
    return int(np.linalg.matrix_rank(np.vstack(blocks)))


@dataclass(frozen=True, eq=False)
class SwitchedPlant:
    """Discrete-time switched linear plant with hyperplane switching.

    ``x(k+1) = A_q x + B u + B_d,q d + B_f,q f`` and
    ``y(k) = C x + D_d,q d + D_f,q f``, with transitions ``i -> j`` fired by
    the surface registered for that ordered pair and the discrete trajectory
    fixed in advance by ``mode_sequence``.
    """

    n: int
    p: int
    m: int
    m_d: int
    l: int
    modes: tuple
    B: np.ndarray
    C: np.ndarray
    surfaces: tuple
    mode_sequence: tuple

    def __post_init__(self):
        if len(self.modes) < 1:
            raise ConfigError("plant needs at least one mode")
        seen = set()
        for sf in self.surfaces:
            key = (sf.from_mode, sf.to_mode)
            if key in seen:
                raise ConfigError(f"duplicate surface for transition ({key[0] + 1}, {key[1] + 1})")
            if not (0 <= sf.from_mode < self.N and 0 <= sf.to_mode < self.N) or sf.from_mode == sf.to_mode:
                raise ConfigError(f"surface has invalid transition ({sf.from_mode + 1}, {sf.to_mode + 1})")
            if not np.any(sf.s != 0):
                raise ConfigError(f"surface ({sf.from_mode + 1}, {sf.to_mode + 1}) has a zero normal")
            seen.add(key)
        for q in self.mode_sequence:
            if not 0 <= q < self.N:
                raise ConfigError(f"mode_sequence references unknown mode {q + 1}")
        for a, b in zip(self.mode_sequence[:-1], self.mode_sequence[1:]):
            if (a, b) not in seen:
                raise ConfigError(f"missing surface for transition ({a + 1}, {b + 1}) in mode_sequence")
        for q, mm in enumerate(self.modes):
            if observability_rank(mm.A, self.C) < self.n:
                raise ConfigError(f"unobservable pair ({q + 1}, C)")

    @property
    def N(self) -> int:
        return len(self.modes)

    @property
    def transitions(self) -> list:
        """Ordered transition set ``I_s`` as 0-based ``(from, to)`` pairs."""
        return [(sf.from_mode, sf.to_mode) for sf in self.surfaces]

    def surface(self, from_mode: int, to_mode: int) -> SwitchingSurface:
        for sf in self.surfaces:
            if sf.from_mode == from_mode and sf.to_mode == to_mode:
                return sf
        raise KeyError((from_mode, to_mode))


@dataclass(frozen=True)
class SynthesisParams:
    """Parameters of the iterative robustness/sensitivity synthesis.

    ``couple_multipliers`` adds ``-m/4 I >= H^T P^-1 H`` for every scalar
    multiplier ``m`` of the quadratic-elimination step so that the multiplier
    really dominates ``K^T P K``. Turning it off gives the bare blocks.
    ``fault_pairs_only_active`` restricts the sensitivity blocks to plant modes
    whose fault channel is nonzero (a mode with ``B_f = D_f = 0`` cannot have
    a positive sensitivity floor).
    """

    epsilon: float
    alpha: float
    xi: float
    lambda_q: tuple
    gamma_init: float = 10.0
    beta_init: float = 0.1
    gamma_step: float = 0.95
    beta_step: float = 1.05
    max_outer_iters: int = 200
    max_inner_iters: int = 50
    omega: float = 1.0
    solver_tol: float = 1e-7
    shared_indices: bool = True
    couple_multipliers: bool = True
    fault_pairs_only_active: bool = True
    v_seed: float = 1.0
    anchor_backoff: int = 6

    def __post_init__(self):
        lam = self.lambda_q
        lam = (float(lam),) if np.isscalar(lam) else tuple(float(v) for v in lam)
        object.__setattr__(self, "lambda_q", lam)
        if not self.epsilon > 0:
            raise ConfigError("epsilon must be > 0")
        if not 0 < self.alpha <= self.xi:
            raise ConfigError("need 0 < alpha <= xi")
        if not all(v > 0 for v in lam):
            raise ConfigError("lambda_q must be > 0")
        for name in ("gamma_init", "beta_init", "omega", "solver_tol", "v_seed"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be > 0")
        if not 0 < self.gamma_step < 1:
            raise ConfigError("gamma_step must be in (0, 1)")
        if not self.beta_step > 1:
            raise ConfigError("beta_step must be > 1")
        if self.max_outer_iters < 0 or self.max_inner_iters < 1 or self.anchor_backoff < 0:
            raise ConfigError("iteration caps must be non-negative (max_inner_iters >= 1)")

    def lam(self, q: int) -> float:
        return self.lambda_q[q] if len(self.lambda_q) > 1 else self.lambda_q[0]

    def to_dict(self) -> dict:
        out = {f.name: getattr(self, f.name) for f in fields(self)}
        out["lambda_q"] = list(self.lambda_q) if len(self.lambda_q) > 1 else self.lambda_q[0]
        return out

    @classmethod
    def from_dict(cls, doc: Mapping[str, Any]) -> "SynthesisParams":
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown synthesis keys: {sorted(unknown)}")
        try:
            return cls(**dict(doc))
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    def with_(self, **changes) -> "SynthesisParams":
        return replace(self, **changes)


@dataclass(frozen=True, eq=False)
class ExperimentConfig:
    plant: SwitchedPlant
    synthesis: SynthesisParams | None
    signals: dict = field(default_factory=dict)


def _get(doc, key, ctx="document"):
    try:
        return doc[key]
    except (KeyError, TypeError):
        raise ConfigError(f"missing key '{key}' in {ctx}") from None


def plant_from_dict(doc: Mapping[str, Any]) -> SwitchedPlant:
    dims = _get(doc, "dimensions")
    try:
        n, p, m_d, l = (int(_get(dims, k, "dimensions")) for k in ("n", "p", "m_d", "l"))
        m = int(dims.get("m", 1))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad dimensions: {exc}") from None
    shared = doc.get("shared", {})
    B = _frozen(shared.get("B", np.zeros((n, m))), (n, m), "B")
    C = _frozen(_get(shared, "C", "shared"), (p, n), "C")
    modes = []
    for q, md in enumerate(_get(doc, "modes")):
        tag = f"mode {q + 1}"
        modes.append(ModeMatrices(
            A=_frozen(_get(md, "A", tag), (n, n), f"{tag} A"),
            B_d=_frozen(md.get("B_d", np.zeros((n, m_d))), (n, m_d), f"{tag} B_d"),
            B_f=_frozen(md.get("B_f", np.zeros((n, l))), (n, l), f"{tag} B_f"),
            D_d=_frozen(md.get("D_d", np.zeros((p, m_d))), (p, m_d), f"{tag} D_d"),
            D_f=_frozen(md.get("D_f", np.zeros((p, l))), (p, l), f"{tag} D_f"),
        ))
    surfaces = []
    for sd in doc.get("surfaces", []):
        s = _frozen(_get(sd, "s", "surface"), None, "surface s").ravel()
        s.setflags(write=False)
        if s.shape != (n,):
            raise ConfigError(f"dimension mismatch: surface normal has {s.size} entries, expected {n}")
        surfaces.append(SwitchingSurface(s=s, from_mode=int(_get(sd, "from", "surface")) - 1,
                                         to_mode=int(_get(sd, "to", "surface")) - 1))
    seq = doc.get("mode_sequence", [1])
    seq = tuple(int(v) - 1 for v in seq)
    return SwitchedPlant(n=n, p=p, m=m, m_d=m_d, l=l, modes=tuple(modes), B=B, C=C,
                         surfaces=tuple(surfaces), mode_sequence=seq)


def plant_to_dict(plant: SwitchedPlant) -> dict:
    return {
        "dimensions": {"n": plant.n, "p": plant.p, "m": plant.m, "m_d": plant.m_d, "l": plant.l},
        "shared": {"B": plant.B.tolist(), "C": plant.C.tolist()},
        "modes": [{"A": mm.A.tolist(), "B_d": mm.B_d.tolist(), "B_f": mm.B_f.tolist(),
                   "D_d": mm.D_d.tolist(), "D_f": mm.D_f.tolist()} for mm in plant.modes],
        "surfaces": [{"from": sf.from_mode + 1, "to": sf.to_mode + 1, "s": sf.s.tolist()}
                     for sf in plant.surfaces],
        "mode_sequence": [q + 1 for q in plant.mode_sequence],
    }


def _parse(document):
    if isinstance(document, Mapping):
        return document
    try:
        return json.loads(document)
    except (json.JSONDecodeError, TypeError) as exc:
        raise ConfigError(f"parse error: {exc}") from None


def load_plant(document) -> SwitchedPlant:
    """Parse and validate a plant from a JSON document (text or mapping)."""
    return plant_from_dict(_parse(document))


def serialize(plant: SwitchedPlant) -> str:
    """JSON text that :func:`load_plant` maps back to an identical plant."""
    return json.dumps(plant_to_dict(plant), indent=2)


def load_config(document) -> ExperimentConfig:
    """Parse a full experiment document: plant, synthesis parameters, signals."""
    doc = _parse(document)
    plant = plant_from_dict(doc)
    syn = doc.get("synthesis")
    params = SynthesisParams.from_dict(syn) if syn is not None else None
    if params is not None and len(params.lambda_q) not in (1, plant.N):
        raise ConfigError("lambda_q must be a scalar or have one entry per mode")
    return ExperimentConfig(plant=plant, synthesis=params, signals=dict(doc.get("signals", {})))


def plants_equal(a: SwitchedPlant, b: SwitchedPlant) -> bool:
    """Bit-exact structural equality of two plants."""
    if (a.n, a.p, a.m, a.m_d, a.l, a.mode_sequence) != (b.n, b.p, b.m, b.m_d, b.l, b.mode_sequence):
        return False
    if a.N != b.N or len(a.surfaces) != len(b.surfaces):
        return False
    if not (np.array_equal(a.B, b.B) and np.array_equal(a.C, b.C)):
        return False
    for ma, mb in zip(a.modes, b.modes):
        for name in ("A", "B_d", "B_f", "D_d", "D_f"):
            if not np.array_equal(getattr(ma, name), getattr(mb, name)):
                return False
    for sa, sb in zip(a.surfaces, b.surfaces):
        if (sa.from_mode, sa.to_mode) != (sb.from_mode, sb.to_mode) or not np.array_equal(sa.s, sb.s):
            return False
    return True

