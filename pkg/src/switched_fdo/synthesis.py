"""Iterative robustness/sensitivity synthesis of the hybrid observer.

Procedure
---------
1. start from ``(gamma, beta)``;
2. jointly solve the Lyapunov bounds, mismatch-decrease, jump-coupling,
   gain-bound and attenuation conditions for ``(P, H, V)`` and multipliers;
3. if that fails, relax ``gamma <- gamma / gamma_step`` and
   ``beta <- beta / beta_step`` and retry;
4. freeze ``P``, linearize the sensitivity condition around the current ``V``
   and solve for ``(H, V)``;
5. tighten ``gamma <- gamma * gamma_step``, ``beta <- beta * beta_step`` and
   repeat 4 until infeasible;
6. return the last accepted ``(H, V)`` with ``K = P^-1 H``.

The first sensitivity solve of step 4 is part of the feasible start: the
anchor seed is backed off geometrically and, failing that, ``(gamma, beta)``
are relaxed as in step 3.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla

from . import lmi
from .model import ConfigError, SwitchedPlant, SynthesisParams
from .sdp_backend import FEASIBLE, INFEASIBLE, solve_feasibility


class SynthesisError(RuntimeError):
    pass


class NoFeasibleStart(SynthesisError):
    """No ``(gamma, beta)`` in the relaxation schedule admits a feasible start."""

    def __init__(self, message, trace=None, diagnosis=None):
        super().__init__(message)
        self.trace = trace or []
        self.diagnosis = diagnosis or {}


class SolverFailure(SynthesisError):
    """The backend stalled; ``context`` says where in the procedure."""

    def __init__(self, message, context=None):
        super().__init__(message)
        self.context = context or {}


class NearSingular(ValueError):
    pass


class RankDeficientC(ValueError):
    pass


def recover_gains(P, H) -> np.ndarray:
    """Solve ``P K = H`` for SPD ``P``.

    Raises
    ------
    NearSingular
        When the smallest eigenvalue of ``P`` is ``<= 1e-12``.
    """
    P = np.asarray(P, dtype=float)
    H = np.atleast_2d(np.asarray(H, dtype=float))
    if H.shape[0] != P.shape[0]:
        H = H.T if H.shape[1] == P.shape[0] else H
    Ps = 0.5 * (P + P.T)
    if np.linalg.eigvalsh(Ps)[0] <= 1e-12:
        raise NearSingular("P is not safely positive definite")
    return sla.solve(Ps, H, assume_a="pos")


def jump_projector(P, C):
    """State-jump maps for the estimate reset onto ``{x : C x = y}``.

    With ``P = R^T R`` (upper Cholesky factor ``R``),
    ``G_state = I - R^-1 (C R^-1)^+ C`` and ``G_output = R^-1 (C R^-1)^+``.
    ``x+ = G_state x + G_output y`` is the ``P``-weighted least-squares
    projection of ``x`` onto the measurement-consistent set.
    """
    P = np.asarray(P, dtype=float)
    C = np.atleast_2d(np.asarray(C, dtype=float))
    if np.linalg.matrix_rank(C) < C.shape[0]:
        raise RankDeficientC("C must have full row rank")
    R = sla.cholesky(0.5 * (P + P.T), lower=False)
    Rinv = sla.solve_triangular(R, np.eye(P.shape[0]), lower=False)
    G_out = Rinv @ np.linalg.pinv(C @ Rinv)
    G_state = np.eye(P.shape[0]) - G_out @ C
    return G_state, G_out


@dataclass
class ObserverDesign:
    """Synthesized hybrid observer.

    Attributes
    ----------
    K, H, P : lists of per-mode gains, ``P K`` products and certificates.
    V : (p_r, p) residual weight.
    jump_maps : dict ``(from, to) -> (G_state, G_output)`` using the target
        mode's certificate.
    gamma, beta : per-mode achieved attenuation level and sensitivity floor
        (``beta`` is NaN for a design without a sensitivity claim).
    perf_index : per-mode ``gamma / (omega beta)``; ``perf_aggregate`` is the
        worst mode.
    iterations : list of dicts, one per solve attempt.
    elapsed : wall-clock seconds of the synthesis run (not serialized, so
        design files are reproducible byte for byte).
    """

    K: list
    H: list
    V: np.ndarray
    P: list
    jump_maps: dict
    gamma: np.ndarray
    beta: np.ndarray
    params_used: SynthesisParams
    iterations: list = field(default_factory=list)
    sensitivity_certified: bool = True
    fault_pairs: list | None = None
    backend: str = ""
    elapsed: float = 0.0

    @property
    def perf_index(self) -> np.ndarray:
        return self.gamma / (self.params_used.omega * self.beta)

    @property
    def perf_aggregate(self) -> float:
        return float(np.max(self.perf_index))

    def to_dict(self) -> dict:
        return {
            "K": [k.tolist() for k in self.K],
            "H": [h.tolist() for h in self.H],
            "V": self.V.tolist(),
            "P": [p.tolist() for p in self.P],
            "jump_maps": [{"from": i + 1, "to": j + 1, "G_state": gs.tolist(), "G_output": go.tolist()}
                          for (i, j), (gs, go) in sorted(self.jump_maps.items())],
            "gamma": self.gamma.tolist(),
            "beta": [None if np.isnan(b) else b for b in self.beta.tolist()],
            "perf_index": [None if np.isnan(v) else v for v in self.perf_index.tolist()],
            "params_used": self.params_used.to_dict(),
            "iterations": self.iterations,
            "sensitivity_certified": self.sensitivity_certified,
            "fault_pairs": None if self.fault_pairs is None else [[a + 1, b + 1] for a, b in self.fault_pairs],
            "backend": self.backend,
        }

    @classmethod
    def from_dict(cls, doc) -> "ObserverDesign":
        try:
            arr = lambda v: np.atleast_2d(np.asarray(v, dtype=float))  # noqa: E731
            jm = {(e["from"] - 1, e["to"] - 1): (arr(e["G_state"]), arr(e["G_output"])) for e in doc["jump_maps"]}
            beta = np.array([np.nan if b is None else b for b in doc["beta"]], dtype=float)
            fp = doc.get("fault_pairs")
            return cls(K=[arr(k) for k in doc["K"]], H=[arr(h) for h in doc["H"]] if doc.get("H") else None,
                       V=arr(doc["V"]), P=[arr(p) for p in doc["P"]], jump_maps=jm,
                       gamma=np.asarray(doc["gamma"], dtype=float), beta=beta,
                       params_used=SynthesisParams.from_dict(doc["params_used"]),
                       iterations=list(doc.get("iterations", [])),
                       sensitivity_certified=bool(doc.get("sensitivity_certified", True)),
                       fault_pairs=None if fp is None else [(a - 1, b - 1) for a, b in fp],
                       backend=doc.get("backend", ""))
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"malformed design document: {exc}") from None

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)

    @classmethod
    def load(cls, path) -> "ObserverDesign":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


# ---------------------------------------------------------------------------
# programs


def _couplings(plant, params, v, fams):
    return lmi.assemble_multiplier_coupling(plant, v, which=fams) if params.couple_multipliers else []


def start_program(plant: SwitchedPlant, params: SynthesisParams, gamma):
    """Joint program of step 2 (``P`` free, no sensitivity blocks)."""
    lay, v = lmi.make_variables(plant, families=("sigma", "kappa", "nu", "d"))
    blocks, eqs = lmi.assemble_boundedness(plant, params, v)
    blocks += lmi.assemble_nu_sign(plant, v)
    blocks += lmi.assemble_disturbance(plant, params, gamma, v)
    blocks += _couplings(plant, params, v, ("sigma", "kappa"))
    return lmi.lower_to_standard_form(blocks, eqs, lay)


def boundedness_program(plant: SwitchedPlant, params: SynthesisParams):
    """Lyapunov bounds, mismatch decrease, jump coupling and gain bounds only."""
    lay, v = lmi.make_variables(plant, families=("sigma", "nu", "d"))
    blocks, eqs = lmi.assemble_boundedness(plant, params, v)
    blocks += lmi.assemble_nu_sign(plant, v)
    blocks += _couplings(plant, params, v, ("sigma",))
    return lmi.lower_to_standard_form(blocks, eqs, lay)


def frozen_program(plant: SwitchedPlant, params: SynthesisParams, P, gamma, beta, anchor, pairs=None):
    """Step-4 program: ``P`` fixed, sensitivity blocks linearized at ``anchor``."""
    fixed = {("P", q): P[q] for q in range(plant.N)}
    lay, v = lmi.make_variables(plant, fixed=fixed)
    blocks, eqs = lmi.assemble_boundedness(plant, params, v)
    blocks += lmi.assemble_nu_sign(plant, v)
    blocks += lmi.assemble_disturbance(plant, params, gamma, v)
    blocks += lmi.assemble_fault(plant, params, beta, anchor, v, pairs=pairs)
    blocks += _couplings(plant, params, v, ("sigma", "kappa", "varsigma"))
    return lmi.lower_to_standard_form(blocks, eqs, lay)


def full_program(plant: SwitchedPlant, params: SynthesisParams, gamma, beta, anchor, pairs=None):
    """All conditions with every variable free (used for bookkeeping/diagnosis)."""
    lay, v = lmi.make_variables(plant)
    blocks, eqs = lmi.assemble_boundedness(plant, params, v)
    blocks += lmi.assemble_nu_sign(plant, v)
    blocks += lmi.assemble_disturbance(plant, params, gamma, v)
    blocks += lmi.assemble_fault(plant, params, beta, anchor, v, pairs=pairs)
    blocks += _couplings(plant, params, v, ("sigma", "kappa", "varsigma"))
    return lmi.lower_to_standard_form(blocks, eqs, lay)


def _extract(plant, program, x, P=None):
    vals = program.unflatten(x)
    N = plant.N
    P = [vals[f"P[{q + 1}]"] for q in range(N)] if P is None else P
    H = [vals[f"H[{q + 1}]"] for q in range(N)]
    return P, H, vals["V"]


def _record(trace, stage, gamma, beta, out, **extra):
    rec = {"stage": stage, "gamma": [float(g) for g in gamma], "beta": [float(b) for b in beta],
           "status": out.status, "feasible": out.status == FEASIBLE,
           "worst_margin": None if not out.margins else float(max(out.margins.values()))}
    rec.update(extra)
    trace.append(rec)
    return rec


def _check(out, trace, stage):
    if out.status not in (FEASIBLE, INFEASIBLE):
        raise SolverFailure(f"backend failure during {stage} (iteration {len(trace)})",
                            context={"stage": stage, "iteration": len(trace), "info": out.info})


def diagnose_start(plant: SwitchedPlant, params: SynthesisParams, backend=None) -> dict:
    """Which condition family blocks a feasible start (gamma independent part)."""
    out = solve_feasibility(boundedness_program(plant, params), params.solver_tol, backend)
    worst = sorted(out.margins.items(), key=lambda kv: -kv[1])[:3]
    return {"boundedness_feasible": out.status == FEASIBLE, "status": out.status,
            "worst_blocks": [[k, float(v)] for k, v in worst]}


def _package(plant, params, P, H, V, gamma, beta, trace, sens, pairs, backend, t0):
    K = [recover_gains(P[q], H[q]) for q in range(plant.N)]
    jm = {(sf.from_mode, sf.to_mode): jump_projector(P[sf.to_mode], plant.C) for sf in plant.surfaces}
    return ObserverDesign(K=K, H=[np.array(h) for h in H], V=np.atleast_2d(np.array(V)),
                          P=[0.5 * (p + p.T) for p in P], jump_maps=jm,
                          gamma=np.asarray(gamma, dtype=float).copy(), beta=np.asarray(beta, dtype=float).copy(),
                          params_used=params, iterations=trace, sensitivity_certified=sens,
                          fault_pairs=pairs, backend=backend, elapsed=time.perf_counter() - t0)


def _anchors(V, params):
    V = np.atleast_2d(V)
    base = V if np.max(np.abs(V)) > 1e-9 else params.v_seed * np.eye(*V.shape)
    return [base * (0.1 ** j) for j in range(params.anchor_backoff + 1)]


def synthesize(plant: SwitchedPlant, params: SynthesisParams, backend: str | None = None,
               certify_tol: float = 1e-6) -> ObserverDesign:
    """Run the iterative procedure and return a certified design.

    Raises
    ------
    NoFeasibleStart
        The relaxation schedule was exhausted without a feasible start.
    SolverFailure
        The backend stalled.
    """
    from .certify import check_design

    t0 = time.perf_counter()
    N = plant.N
    tol = params.solver_tol
    pairs = lmi.fault_pairs(plant, params)
    gamma = np.full(N, params.gamma_init)
    beta = np.full(N, params.beta_init)
    trace: list = []
    start = None
    for it in range(params.max_inner_iters):
        prog2 = start_program(plant, params, gamma)
        out2 = solve_feasibility(prog2, tol, backend)
        _record(trace, "start", gamma, beta, out2, inner=it)
        _check(out2, trace, "start")
        if out2.status == FEASIBLE:
            P, H, V = _extract(plant, prog2, out2.assignment)
            for a, anchor in enumerate(_anchors(V, params)):
                prog4 = frozen_program(plant, params, P, gamma, beta, anchor, pairs)
                out4 = solve_feasibility(prog4, tol, backend)
                _record(trace, "start_sensitivity", gamma, beta, out4, inner=it, anchor_backoff=a)
                _check(out4, trace, "start_sensitivity")
                if out4.status == FEASIBLE:
                    start = (P, *_extract(plant, prog4, out4.assignment, P=P)[1:])
                    break
            if start is not None:
                break
        gamma = gamma / params.gamma_step
        beta = beta / params.beta_step
    if start is None:
        diag = diagnose_start(plant, params, backend)
        msg = (f"no feasible start after {params.max_inner_iters} relaxations "
               f"(final gamma={gamma[0]:.4g}, beta={beta[0]:.4g})")
        if not diag["boundedness_feasible"]:
            msg += "; the boundedness conditions are infeasible on their own, independent of gamma and beta"
        raise NoFeasibleStart(msg, trace=trace, diagnosis=diag)

    P, H, V = start
    accepted = [(H, V, gamma.copy(), beta.copy())]
    active = list(range(N)) if not params.shared_indices else [None]
    attempts = 0
    while active and attempts < params.max_outer_iters:
        for who in list(active):
            if attempts >= params.max_outer_iters:
                break
            g_try, b_try = gamma.copy(), beta.copy()
            sel = slice(None) if who is None else who
            g_try[sel] *= params.gamma_step
            b_try[sel] *= params.beta_step
            prog = frozen_program(plant, params, P, g_try, b_try, V, pairs)
            out = solve_feasibility(prog, tol, backend)
            attempts += 1
            _record(trace, "tighten", g_try, b_try, out, mode=None if who is None else who + 1)
            _check(out, trace, "tighten")
            if out.status != FEASIBLE:
                active.remove(who)
                continue
            _, H, V = _extract(plant, prog, out.assignment, P=P)
            gamma, beta = g_try, b_try
            accepted.append((H, V, gamma.copy(), beta.copy()))

    bk = backend or ""
    for H, V, g, b in reversed(accepted):
        design = _package(plant, params, P, H, V, g, b, trace, True, pairs, bk, t0)
        if check_design(plant, design, certify_tol).pass_:
            return design
    raise SolverFailure("no accepted iterate passes independent certification",
                        context={"accepted": len(accepted)})


def attenuation_design(plant: SwitchedPlant, params: SynthesisParams, backend: str | None = None,
                       V_direction=None) -> ObserverDesign:
    """Design certified for boundedness and attenuation only (no sensitivity claim).

    Runs steps 1-3, then sets ``V = v * V_direction`` with the largest ``v``
    (bisection) for which the attenuation blocks still hold at the achieved
    ``gamma``. Used when the sensitivity conditions admit no solution, e.g. to
    simulate and calibrate detection.
    """
    from .certify import assemble_numeric, rederive_multipliers

    t0 = time.perf_counter()
    N = plant.N
    gamma = np.full(N, params.gamma_init)
    beta = np.full(N, np.nan)
    trace: list = []
    found = None
    for it in range(params.max_inner_iters):
        prog = start_program(plant, params, gamma)
        out = solve_feasibility(prog, params.solver_tol, backend)
        _record(trace, "start", gamma, beta, out, inner=it)
        _check(out, trace, "start")
        if out.status == FEASIBLE:
            found = _extract(plant, prog, out.assignment)
            break
        gamma = gamma / params.gamma_step
    if found is None:
        diag = diagnose_start(plant, params, backend)
        raise NoFeasibleStart("no feasible boundedness/attenuation start", trace=trace, diagnosis=diag)
    P, H, _ = found
    Vd = np.eye(plant.p) if V_direction is None else np.atleast_2d(np.asarray(V_direction, dtype=float))

    def ok(scale):
        V = scale * Vd
        m = rederive_multipliers(plant, params, P, H, V, gamma, beta, sensitivity=False)
        blocks = assemble_numeric(plant, params, P, H, V, gamma, beta, m, sensitivity=False)
        return max(b.violation() for b in blocks) <= 0.5 * params.solver_tol

    if not ok(0.0):
        raise SolverFailure("attenuation start does not re-certify", context={"gamma": gamma.tolist()})
    lo, hi = 0.0, 1.0
    while ok(hi) and hi < 1e12:
        lo, hi = hi, hi * 2.0
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        lo, hi = (mid, hi) if ok(mid) else (lo, mid)
    return _package(plant, params, P, H, lo * Vd, gamma, beta, trace, False, None, backend or "", t0)
