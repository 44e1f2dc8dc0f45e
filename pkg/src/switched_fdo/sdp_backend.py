"""Feasibility decisions for :class:`~switched_fdo.lmi.ConicProgram`.

Every backend maximizes the smallest block margin ``t`` (capped at
``T_CAP``) so that a feasible answer is an interior point:

    maximize t  s.t.  M_b(x) + t I <= 0 (nsd blocks),  M_b(x) - t I >= 0 (psd),
                      A_eq x = b_eq,  t <= T_CAP.

The classification never trusts the solver's own status alone: violations
and equality residuals are re-evaluated with a dense symmetric eigensolver at
the returned point and compared to ``tol``.

Backends: ``"cvxpy"`` (Clarabel through cvxpy, default) and ``"barrier"``
(pure numpy primal log-barrier path following). The environment variable
``SWITCHED_FDO_BACKEND`` overrides the default.
"""

from __future__ import annotations

import os
import warnings
from dataclasses import dataclass, field

import numpy as np

from .lmi import NSD, ConicProgram

FEASIBLE = "Feasible"
INFEASIBLE = "Infeasible"
NUMERICAL_FAILURE = "NumericalFailure"

T_CAP = 1.0
ENV_VAR = "SWITCHED_FDO_BACKEND"


@dataclass
class SolveOutcome:
    """Result of a feasibility solve.

    ``margins`` maps block name to the most-positive eigenvalue of the block
    in its ``<= 0`` orientation (``-lambda_min`` for ``>= 0`` blocks), so a
    block holds iff its margin is ``<= 0`` and within tolerance iff
    ``<= tol``.
    """

    status: str
    assignment: np.ndarray | None
    margins: dict
    residuals: np.ndarray
    tol: float
    backend: str
    best_margin: float | None = None
    info: dict = field(default_factory=dict)

    @property
    def feasible(self) -> bool:
        return self.status == FEASIBLE

    @property
    def max_margin(self) -> float:
        return max(self.margins.values(), default=-np.inf)


def default_backend() -> str:
    return os.environ.get(ENV_VAR, "cvxpy").strip().lower() or "cvxpy"


def _classify(program, x, tol, backend, solver_ok, info):
    margins = program.violations(x)
    res = program.eq_residuals(x)
    worst = max(margins.values(), default=-np.inf)
    ok = worst <= tol and (res.size == 0 or res.max() <= tol)
    if ok:
        status = FEASIBLE
    elif solver_ok:
        status = INFEASIBLE
    else:
        status = NUMERICAL_FAILURE
    return SolveOutcome(status, x if ok else None, margins, res, tol, backend,
                        best_margin=-worst if np.isfinite(worst) else None, info=info)


def solve_feasibility(program: ConicProgram, tol: float = 1e-7, backend: str | None = None) -> SolveOutcome:
    """Decide feasibility of ``program`` within ``tol``.

    Parameters
    ----------
    program : ConicProgram
    tol : float
        Absolute tolerance on block margins and equality residuals.
    backend : {"cvxpy", "barrier"}, optional

    Returns
    -------
    SolveOutcome
        ``assignment`` is present iff the status is ``Feasible``.
    """
    backend = backend or default_backend()
    nv = program.num_vars
    if nv == 0:
        return _classify(program, np.zeros(0), tol, backend, True, {"trivial": True})
    if not program.blocks and program.A_eq.shape[0] == 0:
        return _classify(program, np.zeros(nv), tol, backend, True, {"trivial": True})
    if backend == "cvxpy":
        x, ok, info = _solve_cvxpy(program)
        if (x is None and not info.get("certified_infeasible")) or (x is not None and not ok):
            # positive block rescaling leaves the feasible set unchanged; retry better conditioned
            x, ok, info = _solve_cvxpy(program, scaled=True)
    elif backend == "barrier":
        x, ok, info = _solve_barrier(program)
    else:
        raise ValueError(f"unknown backend {backend!r}")
    if x is None:
        margins = {b.name: np.inf for b in program.blocks}
        status = INFEASIBLE if info.get("certified_infeasible") else NUMERICAL_FAILURE
        return SolveOutcome(status, None, margins, np.full(program.A_eq.shape[0], np.inf), tol, backend, info=info)
    return _classify(program, x, tol, backend, ok, info)


# ---------------------------------------------------------------------------
# cvxpy / Clarabel

CLARABEL_OPTS = dict(tol_gap_abs=1e-12, tol_gap_rel=1e-12, tol_feas=1e-12, tol_ktratio=1e-10, max_iter=500)


def _block_scale(b) -> float:
    peak = np.max(np.abs(b.F0), initial=0.0)
    if len(b.idx):
        peak = max(peak, float(np.max(np.abs(b.F))))
    return 1.0 / max(1.0, peak)


def _solve_cvxpy(program: ConicProgram, scaled=False):
    import cvxpy as cp

    nv = program.num_vars
    x = cp.Variable(nv)
    t = cp.Variable()
    cons = [t <= T_CAP]
    for b in program.blocks:
        m = b.dim
        expr = b.F0
        if len(b.idx):
            coef = b.F.reshape(len(b.idx), m * m).T  # column k = vec(F_k)
            expr = expr + cp.reshape(coef @ x[b.idx], (m, m), order="C")
        expr = 0.5 * (expr + expr.T) if len(b.idx) else cp.Constant(expr)
        if scaled:
            expr = _block_scale(b) * expr
        if b.sense == NSD:
            cons.append(expr + t * np.eye(m) << 0)
        else:
            cons.append(expr - t * np.eye(m) >> 0)
    if program.A_eq.shape[0]:
        cons.append(program.A_eq @ x == program.b_eq)
    prob = cp.Problem(cp.Maximize(t), cons)
    info = {"solver": "CLARABEL", "scaled": scaled}
    try:
        # inaccuracy warnings are superseded by the re-evaluation in _classify
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            prob.solve(solver="CLARABEL", **CLARABEL_OPTS)
    except cp.error.SolverError as exc:
        info["error"] = str(exc)
        return None, False, info
    if caught:
        info["warnings"] = [str(w.message) for w in caught]
    info["solver_status"] = prob.status
    info["t"] = None if t.value is None else float(t.value)
    if x.value is None:
        info["certified_infeasible"] = prob.status in ("infeasible", "infeasible_inaccurate")
        return None, False, info
    ok = prob.status in ("optimal", "optimal_inaccurate")
    return np.asarray(x.value, dtype=float).copy(), ok, info


# ---------------------------------------------------------------------------
# pure numpy log-barrier


def _nullspace_param(A, b):
    nv = A.shape[1]
    if A.shape[0] == 0:
        return np.zeros(nv), np.eye(nv), 0.0
    x0, *_ = np.linalg.lstsq(A, b, rcond=None)
    U, s, Vt = np.linalg.svd(A)
    rank = int(np.sum(s > max(A.shape) * np.finfo(float).eps * (s[0] if s.size else 1.0)))
    Nb = Vt[rank:].T
    return x0, Nb, float(np.max(np.abs(A @ x0 - b), initial=0.0))


def _solve_barrier(program: ConicProgram, box=1e6, max_newton=80, mu=10.0, s_final=1e12):
    """Primal barrier method on ``(w, t)`` with ``x = x0 + N w``."""
    x0, Nb, eq_res = _nullspace_param(program.A_eq, program.b_eq)
    info = {"solver": "barrier"}
    if eq_res > 1e-9 * max(1.0, np.max(np.abs(program.b_eq), initial=0.0)):
        info["certified_infeasible"] = True
        info["equality_residual"] = eq_res
        return None, False, info
    nz = Nb.shape[1] + 1
    # affine maps G_b(z) = G0 + sum z_j G_j that must be positive definite
    G0s, Gjs = [], []
    for b in program.blocks:
        m = b.dim
        F0 = b.value(x0)
        Fz = np.zeros((nz, m, m))
        if len(b.idx):
            Fz[:-1] = np.tensordot(Nb[b.idx].T, b.F, axes=1)
        sgn = -1.0 if b.sense == NSD else 1.0
        Fz = sgn * Fz
        Fz[-1] = -np.eye(m)
        G0s.append(sgn * F0)
        Gjs.append(Fz)

    def margin_min(z):
        vals = [np.linalg.eigvalsh(G0 + np.tensordot(z, Gj, axes=1))[0] for G0, Gj in zip(G0s, Gjs)]
        return min(vals) if vals else np.inf

    z = np.zeros(nz)
    z[-1] = min(margin_min(z) - 1.0, T_CAP - 1.0)

    def phi_grad_hess(z, s):
        w, t = z[:-1], z[-1]
        val = -s * t
        g = np.zeros(nz)
        g[-1] = -s
        Hs = np.zeros((nz, nz))
        for G0, Gj in zip(G0s, Gjs):
            G = G0 + np.tensordot(z, Gj, axes=1)
            try:
                L = np.linalg.cholesky(G)
            except np.linalg.LinAlgError:
                return np.inf, None, None
            val -= 2.0 * np.sum(np.log(np.diag(L)))
            Li = np.linalg.inv(L)
            S = Li @ Gj @ Li.T  # whitened coefficient stack
            g -= np.trace(S, axis1=1, axis2=2)
            Sf = S.reshape(nz, -1)
            Hs += Sf @ Sf.T
        # box on the free coordinates and the cap on t
        if np.any(np.abs(w) >= box) or t >= T_CAP:
            return np.inf, None, None
        val -= np.sum(np.log(box - w) + np.log(box + w)) + np.log(T_CAP - t)
        g[:-1] += 1.0 / (box - w) - 1.0 / (box + w)
        g[-1] += 1.0 / (T_CAP - t)
        Hs[:-1, :-1] += np.diag(1.0 / (box - w) ** 2 + 1.0 / (box + w) ** 2)
        Hs[-1, -1] += 1.0 / (T_CAP - t) ** 2
        return val, g, Hs

    s = 1.0
    total_newton = 0
    while True:
        for _ in range(max_newton):
            val, g, Hs = phi_grad_hess(z, s)
            if g is None:
                info["error"] = "left the interior"
                return None, False, info
            try:
                dz = -np.linalg.solve(Hs, g)
            except np.linalg.LinAlgError:
                dz = -np.linalg.lstsq(Hs, g, rcond=None)[0]
            lam2 = float(-g @ dz)
            total_newton += 1
            if lam2 / 2.0 <= 1e-10:
                break
            step = 1.0
            while step > 1e-12:
                cand = z + step * dz
                vc = _value_only(cand, s, G0s, Gjs, box)
                if np.isfinite(vc) and vc <= val - 0.25 * step * lam2:
                    break
                step *= 0.5
            else:
                break
            z = cand
        gap = (sum(G.shape[0] for G in G0s) + 2 * (nz - 1) + 1) / s
        if s >= s_final or gap < 1e-13:
            break
        s *= mu
    info.update(t=float(z[-1]), newton_steps=total_newton)
    return x0 + Nb @ z[:-1], True, info


def _value_only(z, s, G0s, Gjs, box):
    w, t = z[:-1], z[-1]
    if np.any(np.abs(w) >= box) or t >= T_CAP:
        return np.inf
    val = -s * t
    for G0, Gj in zip(G0s, Gjs):
        G = G0 + np.tensordot(z, Gj, axes=1)
        try:
            L = np.linalg.cholesky(G)
        except np.linalg.LinAlgError:
            return np.inf
        val -= 2.0 * np.sum(np.log(np.diag(L)))
    return val - np.sum(np.log(box - w) + np.log(box + w)) - np.log(T_CAP - t)
