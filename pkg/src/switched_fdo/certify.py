"""Independent verification of an observer design.

The certifier rebuilds ``H = P K`` from the stored certificates and gains,
re-derives the scalar multipliers and jump couplings with ``(P, H, V)``
fixed, evaluates every block with ``numpy.linalg.eigvalsh`` and reports
margins. It does not call the SDP backend.

Multipliers
-----------
* coupled mode (default): ``sigma = kappa = varsigma = -4 lambda_max(H^T P^-1 H)``,
  the least conservative value allowed by the coupling block;
* uncoupled mode: each shared multiplier minimizes the worst block it
  enters (bounded scalar minimization of a convex maximum eigenvalue);
* ``nu`` per mode pair: bounded scalar minimization on ``[0, hi]``;
* ``d`` per transition: least squares.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize_scalar

from . import lmi
from .model import SwitchedPlant


@dataclass
class CertificateReport:
    """Per-block verification record.

    Attributes
    ----------
    margins : dict
        Block name -> most-positive eigenvalue in the ``<= 0`` orientation.
    scaled_margins : dict
        ``margin / max(1, ||M||_2)``; ``pass_`` is decided on these.
    families : dict
        Block name -> constraint family.
    equality_residuals : dict
        Transition -> max-abs residual of the jump coupling after the
        least-squares fit of ``d``.
    gain_residual : float
        ``||P K - H||_max / max(1, ||H||_max)`` against the stored ``H``.
    jump_residual : float
        Max deviation of stored jump maps from a fresh projector.
    bound_coeff : float
        ``sqrt(xi / alpha) * epsilon``.
    multipliers : dict
    pass_ : bool
    """

    margins: dict
    scaled_margins: dict
    families: dict
    equality_residuals: dict
    gain_residual: float
    jump_residual: float
    bound_coeff: float
    multipliers: dict
    tol: float
    checked_families: tuple
    pass_: bool = False
    failures: list = field(default_factory=list)

    def worst(self, family=None):
        items = [(k, v) for k, v in self.scaled_margins.items() if family is None or self.families[k] == family]
        return max(items, key=lambda kv: kv[1]) if items else (None, -np.inf)

    def to_dict(self) -> dict:
        return {
            "pass": self.pass_,
            "tol": self.tol,
            "bound_coeff": self.bound_coeff,
            "checked_families": list(self.checked_families),
            "blocks": [{"name": k, "family": self.families[k], "margin": self.margins[k],
                        "scaled_margin": self.scaled_margins[k], "ok": self.scaled_margins[k] <= self.tol}
                       for k in self.margins],
            "equality_residuals": self.equality_residuals,
            "gain_residual": self.gain_residual,
            "jump_residual": self.jump_residual,
            "multipliers": self.multipliers,
            "failures": self.failures,
        }


def error_bound(design, x_max: float) -> float:
    """Eventual bound ``sqrt(xi/alpha) * epsilon * x_max`` on the mismatch error."""
    if x_max < 0:
        raise ValueError("x_max must be >= 0")
    p = design.params_used if hasattr(design, "params_used") else design
    return float(np.sqrt(p.xi / p.alpha) * p.epsilon * x_max)


def _lmax(M):
    M = np.asarray(M, dtype=float)
    return float(np.linalg.eigvalsh(0.5 * (M + M.T))[-1])


def _min_scalar(f, lo, hi):
    """Minimize a convex scalar function on ``[lo, hi]``; returns (arg, value)."""
    cands = [(lo, f(lo)), (hi, f(hi))]
    if hi > lo:
        r = minimize_scalar(f, bounds=(lo, hi), method="bounded",
                            options={"xatol": 1e-13 * max(1.0, abs(hi - lo)), "maxiter": 500})
        cands.append((float(r.x), float(r.fun)))
    return min(cands, key=lambda c: c[1])


def coupled_multiplier(P, H) -> float:
    """Largest admissible multiplier under ``-m/4 I >= H^T P^-1 H``."""
    M = H.T @ np.linalg.solve(P, H)
    return -4.0 * _lmax(M)


def _nu_bound(plant, params, P, H, qh, q):
    C = plant.C
    A = plant.modes[qh].A
    dA = plant.modes[q].A - A
    rho = A.T @ P @ A - A.T @ H @ C - C.T @ H.T @ A - P
    off = A.T @ P @ dA - C.T @ H.T @ dA
    return 2.0 * np.linalg.norm(rho, 2) + np.linalg.norm(off, 2) + np.linalg.norm(dA.T @ P @ dA, 2) + 1e-12


def _boundedness_value(plant, params, P, H, V, qh, q, sigma, nu):
    v = lmi.numeric_variables(P, H, V, sigma=[sigma] * plant.N, nu={(qh, q): nu})
    return lmi.boundedness_block(plant, params, v, qh, q).value()


def rederive_multipliers(plant: SwitchedPlant, params, P, H, V, gamma, beta, anchor=None,
                         sensitivity=True, fault_pairs=None) -> dict:
    """Re-derive ``sigma, kappa, varsigma, nu, d`` for fixed ``(P, H, V)``."""
    N = plant.N
    anchor = V if anchor is None else anchor
    gamma = lmi._per_mode(gamma, N, "gamma")
    couple = params.couple_multipliers
    pairs = lmi.fault_pairs(plant, params) if fault_pairs is None else fault_pairs
    sigma, kappa, varsigma, nu = [0.0] * N, [0.0] * N, [0.0] * N, {}

    for qh in range(N):
        others = [q for q in range(N) if q != qh]
        bounds = {q: _nu_bound(plant, params, P[qh], H[qh], qh, q) for q in others}

        def inner(sig, keep=None):
            worst = -np.inf
            for q in others:
                arg, val = _min_scalar(lambda t: _lmax(_boundedness_value(plant, params, P, H, V, qh, q,
                                                                           sig, t)), 0.0, bounds[q])
                if keep is not None:
                    keep[(qh, q)] = arg
                worst = max(worst, val)
            return worst

        if couple:
            m = coupled_multiplier(P[qh], H[qh])
            sigma[qh] = kappa[qh] = varsigma[qh] = m
        else:
            scale = 1.0 + sum(np.linalg.norm(X, 2) for X in (P[qh], H[qh]))
            span = 1e6 * scale
            sigma[qh] = _min_scalar(inner, -span, span)[0] if others else 0.0

            def att(k):
                v = lmi.numeric_variables(P, H, V, kappa=[k] * N)
                return max(_lmax(lmi.attenuation_block(plant, v, qh, q, gamma[qh]).value()) for q in range(N))

            kappa[qh] = _min_scalar(att, -span, span)[0]
            my_pairs = [pr for pr in pairs if pr[0] == qh]
            if sensitivity and my_pairs:
                b = lmi._per_mode(beta, N, "beta")

                def sens(s):
                    v = lmi.numeric_variables(P, H, V, varsigma=[s] * N)
                    return max(_lmax(lmi.sensitivity_block(plant, v, a, q, b[a], anchor).value()) for a, q in my_pairs)

                varsigma[qh] = _min_scalar(sens, -span, span)[0]
        inner(sigma[qh], keep=nu)

    d = {}
    d_res = {}
    C = plant.C
    n, p = plant.n, plant.p
    iu = np.triu_indices(n)
    for (qh, q) in plant.transitions:
        target = P[q] - P[qh]
        # columns: contribution of each d entry to (d C + C^T d^T) upper triangle
        cols = []
        for i in range(n):
            for j in range(p):
                E = np.zeros((n, p))
                E[i, j] = 1.0
                cols.append((E @ C + C.T @ E.T)[iu])
        A = np.array(cols).T
        sol, *_ = np.linalg.lstsq(A, target[iu], rcond=None)
        d[(qh, q)] = sol.reshape(n, p)
        d_res[(qh, q)] = float(np.max(np.abs(A @ sol - target[iu]), initial=0.0))
    return {"sigma": sigma, "kappa": kappa, "varsigma": varsigma, "nu": nu, "d": d, "d_residual": d_res}


def assemble_numeric(plant, params, P, H, V, gamma, beta, mult, anchor=None, sensitivity=True,
                     fault_pairs=None) -> list:
    """All certification blocks evaluated at numbers (list of lmi.Block)."""
    v = lmi.numeric_variables(P, H, V, sigma=mult["sigma"], kappa=mult["kappa"], varsigma=mult["varsigma"],
                              nu=mult["nu"], d=mult["d"])
    blocks, _eqs = lmi.assemble_boundedness(plant, params, v)
    blocks += lmi.assemble_disturbance(plant, params, gamma, v)
    fams = ["sigma", "kappa"]
    if sensitivity:
        blocks += lmi.assemble_fault(plant, params, beta, V if anchor is None else anchor, v, pairs=fault_pairs)
        fams.append("varsigma")
    if params.couple_multipliers:
        blocks += lmi.assemble_multiplier_coupling(plant, v, which=tuple(fams))
    return blocks


def check_design(plant: SwitchedPlant, design, tol: float = 1e-6) -> CertificateReport:
    """Verify every claimed condition of ``design`` on ``plant``.

    Parameters
    ----------
    plant : SwitchedPlant
    design : ObserverDesign
    tol : float
        Tolerance on block-norm-scaled margins and residuals.

    Raises
    ------
    ValueError
        On a design/plant dimension mismatch.
    """
    from .synthesis import jump_projector

    params = design.params_used
    n, p, N = plant.n, plant.p, plant.N
    if len(design.P) != N or len(design.K) != N:
        raise ValueError(f"dimension mismatch: design has {len(design.P)} modes, plant {N}")
    for q in range(N):
        if design.P[q].shape != (n, n) or design.K[q].shape != (n, p):
            raise ValueError(f"dimension mismatch in mode {q + 1}: P {design.P[q].shape}, K {design.K[q].shape}, "
                             f"plant n={n}, p={p}")
    if design.V.shape[1] != p:
        raise ValueError(f"dimension mismatch: V has shape {design.V.shape}, plant p={p}")

    P = [0.5 * (Pq + Pq.T) for Pq in design.P]
    H = [P[q] @ design.K[q] for q in range(N)]
    V = design.V
    sens = bool(design.sensitivity_certified)
    pairs = [tuple(pr) for pr in design.fault_pairs] if design.fault_pairs is not None else None
    mult = rederive_multipliers(plant, params, P, H, V, design.gamma, design.beta, sensitivity=sens,
                                fault_pairs=pairs)
    blocks = assemble_numeric(plant, params, P, H, V, design.gamma, design.beta, mult, sensitivity=sens,
                              fault_pairs=pairs)
    margins, scaled, families = {}, {}, {}
    for b in blocks:
        M = b.value()
        M = 0.5 * (M + M.T)
        w = np.linalg.eigvalsh(M)
        mg = float(w[-1]) if b.sense == lmi.NSD else float(-w[0])
        margins[b.name] = mg
        scaled[b.name] = mg / max(1.0, float(np.max(np.abs(w))))
        families[b.name] = b.family

    gain_res = 0.0
    if design.H is not None:
        for q in range(N):
            gain_res = max(gain_res, float(np.max(np.abs(design.P[q] @ design.K[q] - design.H[q])))
                           / max(1.0, float(np.max(np.abs(design.H[q])))))
    jump_res = 0.0
    for (i, j), (Gs, Go) in design.jump_maps.items():
        Gs2, Go2 = jump_projector(P[j], plant.C)
        jump_res = max(jump_res, float(np.max(np.abs(Gs - Gs2))), float(np.max(np.abs(Go - Go2))))

    eq_res = {f"{a + 1},{b + 1}": r for (a, b), r in mult["d_residual"].items()}
    checked = ("lyap_bounds", "boundedness", "gain_bound", "jump_coupling", "attenuation") + \
        (("sensitivity",) if sens else ()) + (("coupling",) if params.couple_multipliers else ())
    rep = CertificateReport(
        margins=margins, scaled_margins=scaled, families=families, equality_residuals=eq_res,
        gain_residual=gain_res, jump_residual=jump_res, bound_coeff=error_bound(params, 1.0),
        multipliers={"sigma": mult["sigma"], "kappa": mult["kappa"], "varsigma": mult["varsigma"],
                     "nu": {f"{a + 1},{b + 1}": val for (a, b), val in mult["nu"].items()}},
        tol=tol, checked_families=checked)
    fails = [k for k, v in scaled.items() if not v <= tol]
    fails += [f"jump_coupling[{k}]" for k, r in eq_res.items() if not r <= tol]
    if not gain_res <= tol:
        fails.append("gain_recovery")
    if not jump_res <= tol:
        fails.append("jump_maps")
    rep.failures = fails
    rep.pass_ = not fails
    return rep
