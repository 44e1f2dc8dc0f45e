import dataclasses
import json

import numpy as np
import pytest

from switched_fdo import certify, lmi, model, synthesis
from switched_fdo.sdp_backend import FEASIBLE, solve_feasibility

from conftest import two_mode_scalar


@pytest.mark.parametrize("xi, alpha, eps, x_max, expected, tol", [
    (1.0193, 0.0065, 2.3975, 1.0, 30.02, 0.01),
    (0.3, 0.3, 1.0, 5.0, 5.0, 1e-12),
    (1.0193, 0.0065, 2.3975, 0.0, 0.0, 0.0),
])
def test_error_bound_examples(xi, alpha, eps, x_max, expected, tol):
    p = model.SynthesisParams(epsilon=eps, alpha=alpha, xi=xi, lambda_q=1.0)
    assert abs(certify.error_bound(p, x_max) - expected) <= tol
    if x_max == 1.0:
        assert abs(certify.error_bound(p, x_max) - np.sqrt(xi / alpha) * eps) <= 1e-12


def test_error_bound_rejects_negative_state():
    p = model.SynthesisParams(epsilon=1.0, alpha=0.5, xi=1.0, lambda_q=1.0)
    with pytest.raises(ValueError):
        certify.error_bound(p, -1.0)


def test_synthesized_design_passes(sensor_cfg, sensor_design):
    rep = certify.check_design(sensor_cfg.plant, sensor_design, 1e-6)
    assert rep.pass_, rep.failures
    assert max(rep.scaled_margins.values()) <= 1e-6
    assert rep.gain_residual <= 1e-8 and rep.jump_residual <= 1e-10
    assert set(rep.checked_families) >= {"boundedness", "gain_bound", "attenuation", "sensitivity"}


def test_scaled_gain_fails_on_gain_bound(sensor_cfg, sensor_design):
    # the bundled design has |P K| far below lambda, so scale relative to the bound
    P1, lam = sensor_design.P[0], sensor_design.params_used.lam(0)
    scale = 100.0 * lam / np.linalg.norm(P1 @ sensor_design.K[0], 2)
    K = [k.copy() for k in sensor_design.K]
    K[0] = scale * K[0]
    bad = dataclasses.replace(sensor_design, K=K, H=None)
    rep = certify.check_design(sensor_cfg.plant, bad, 1e-6)
    assert not rep.pass_
    assert rep.margins["gain_bound[1]"] > 0
    # independent route: lambda^2 I - K^T P^2 K has a negative eigenvalue
    w = np.linalg.eigvalsh(lam ** 2 * np.eye(1) - K[0].T @ P1 @ P1 @ K[0])
    assert w[0] < 0


def _zero_design(plant, params):
    n, p = plant.n, plant.p
    P = [np.eye(n) for _ in range(plant.N)]
    jm = {(sf.from_mode, sf.to_mode): synthesis.jump_projector(P[sf.to_mode], plant.C) for sf in plant.surfaces}
    return synthesis.ObserverDesign(K=[np.zeros((n, p))] * plant.N, H=None, V=np.zeros((p, p)), P=P, jump_maps=jm,
                                    gamma=np.ones(plant.N), beta=np.full(plant.N, np.nan), params_used=params,
                                    sensitivity_certified=False)


def test_zero_design_on_unstable_plant_fails():
    pl = two_mode_scalar(a1=1.5, a2=0.5)
    params = model.SynthesisParams(epsilon=1.0, alpha=0.5, xi=2.0, lambda_q=1.0)
    rep = certify.check_design(pl, _zero_design(pl, params), 1e-6)
    assert not rep.pass_
    assert rep.margins["attenuation[1,1]"] >= 1.5 ** 2 - 1 - 1e-12
    assert max(rep.margins[k] for k in rep.margins if k.startswith("boundedness[1,")) > 0


def test_zero_design_on_stable_plant_passes():
    pl = two_mode_scalar(a1=0.5, a2=0.6)
    params = model.SynthesisParams(epsilon=1.0, alpha=0.5, xi=2.0, lambda_q=1.0)
    rep = certify.check_design(pl, _zero_design(pl, params), 1e-6)
    assert rep.pass_ and all(m <= 1e-6 for m in rep.scaled_margins.values())


def test_pass_iff_all_checks_within_tolerance(sensor_cfg, sensor_design):
    pl = sensor_cfg.plant
    for tol in (1e-9, 1e-6, 1e-3):
        rep = certify.check_design(pl, sensor_design, tol)
        ok = (all(v <= tol for v in rep.scaled_margins.values())
              and all(r <= tol for r in rep.equality_residuals.values())
              and rep.gain_residual <= tol and rep.jump_residual <= tol)
        assert rep.pass_ == ok
    d = dataclasses.replace(sensor_design, V=3.0 * sensor_design.V)
    rep = certify.check_design(pl, d, 1e-6)
    assert rep.pass_ == all(v <= 1e-6 for v in rep.scaled_margins.values())


def test_perturbation_flips_boundary_margins(sensor_cfg, sensor_design):
    pl, d = sensor_cfg.plant, sensor_design
    tol = 1e-6
    delta = 10 * tol
    P = d.P
    H = [P[q] @ d.K[q] for q in range(pl.N)]
    mult = certify.rederive_multipliers(pl, d.params_used, P, H, d.V, d.gamma, d.beta, fault_pairs=d.fault_pairs)
    blocks = certify.assemble_numeric(pl, d.params_used, P, H, d.V, d.gamma, d.beta, mult,
                                      fault_pairs=d.fault_pairs)
    checked = 0
    for b in blocks:
        if b.sense != lmi.NSD:
            continue
        M = b.value()
        I = np.eye(M.shape[0])
        m0 = np.linalg.eigvalsh(M)[-1]
        m1 = np.linalg.eigvalsh(M + delta * I)[-1]
        assert abs(m1 - m0 - delta) <= 1e-9 * max(1.0, np.abs(M).max())
        # move the block onto the boundary band (-delta, 0] and check the flip
        edge = M - (m0 + 0.5 * delta) * I
        assert -delta < np.linalg.eigvalsh(edge)[-1] <= 0
        assert np.linalg.eigvalsh(edge + delta * I)[-1] > 0
        checked += 1
    assert checked >= 8


def test_dimension_mismatch_raises(sensor_cfg, sensor_design):
    d = json.loads(model.serialize(sensor_cfg.plant))
    d["modes"] = d["modes"][:1]
    d["surfaces"] = []
    d["mode_sequence"] = [1]
    one = model.load_plant(d)
    with pytest.raises(ValueError, match="dimension mismatch"):
        certify.check_design(one, sensor_design)
    bad = dataclasses.replace(sensor_design, V=np.ones((1, 3)))
    with pytest.raises(ValueError, match="dimension mismatch"):
        certify.check_design(sensor_cfg.plant, bad)


def test_solver_margins_agree_with_certifier(sensor_cfg, sensor_design):
    """Backend margins and certifier evaluation at the same point agree to 1e-6."""
    pl, d = sensor_cfg.plant, sensor_design
    params = d.params_used
    prog = synthesis.frozen_program(pl, params, d.P, d.gamma, d.beta, d.V, d.fault_pairs)
    out = solve_feasibility(prog, params.solver_tol)
    assert out.status == FEASIBLE
    vals = prog.unflatten(out.assignment)
    N = pl.N
    H = [vals[f"H[{q + 1}]"] for q in range(N)]
    V = vals["V"]
    flat = lambda name: float(np.asarray(vals[name]).ravel()[0])  # noqa: E731
    mult = {fam: [flat(f"{fam}[{q + 1}]") for q in range(N)] for fam in ("sigma", "kappa", "varsigma")}
    mult["nu"] = {(a, b): flat(f"nu[{a + 1},{b + 1}]") for a in range(N) for b in range(N) if a != b}
    mult["d"] = {(a, b): vals[f"d[{a + 1},{b + 1}]"] for (a, b) in pl.transitions}
    blocks = certify.assemble_numeric(pl, params, d.P, H, V, d.gamma, d.beta, mult, anchor=d.V,
                                      fault_pairs=d.fault_pairs)
    shared = 0
    for b in blocks:
        if b.name not in out.margins:
            continue
        w = np.linalg.eigvalsh(b.value())
        m = w[-1] if b.sense == lmi.NSD else -w[0]
        assert abs(m - out.margins[b.name]) <= 1e-6
        shared += 1
    assert shared >= 10
    # and the packaged solution certifies (same verdict through the independent route)
    new = synthesis._package(pl, params, d.P, H, V, d.gamma, d.beta, [], True, d.fault_pairs, "", 0.0)
    assert certify.check_design(pl, new, 1e-6).pass_


def test_report_document(sensor_cfg, sensor_design):
    doc = certify.check_design(sensor_cfg.plant, sensor_design).to_dict()
    assert doc["pass"] is True
    assert {"name", "family", "margin", "scaled_margin", "ok"} <= set(doc["blocks"][0])
    assert np.isclose(doc["bound_coeff"], certify.error_bound(sensor_design, 1.0))
