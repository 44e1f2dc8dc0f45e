import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from switched_fdo import model
from switched_fdo.model import ConfigError, SwitchingSurface, surface_value

from conftest import bundled


def test_benchmark_plant_loads(paper_cfg):
    pl = paper_cfg.plant
    assert (pl.n, pl.p, pl.N) == (2, 1, 2)
    assert np.array_equal(pl.C, [[1.01, -2.4]])
    assert np.array_equal(pl.modes[0].B_d, [[1, 0], [1, 0]])
    assert np.array_equal(pl.modes[0].D_d, [[1, 0]])
    assert pl.modes[1].D_f[0, 0] == 4.3
    assert not pl.modes[0].has_fault_channel and pl.modes[1].has_fault_channel
    assert np.array_equal(pl.surface(1, 0).s, [0.25, 1.0])
    assert np.array_equal(pl.surface(0, 1).s, [1.0, 1.0])


def _doc(paper_cfg):
    return json.loads(model.serialize(paper_cfg.plant))


def test_unobservable_output_reports_mode(paper_cfg):
    doc = _doc(paper_cfg)
    doc["shared"]["C"] = [[0.0, 0.0]]
    with pytest.raises(ConfigError, match=r"unobservable pair \(1, C\)"):
        model.load_plant(doc)


def test_single_mode_scaled_identity_is_rejected_as_unobservable():
    # A = 0.5 I has a repeated eigenvalue, so a single output row cannot observe it
    doc = {"dimensions": {"n": 2, "p": 1, "m_d": 1, "l": 1}, "shared": {"C": [[1.0, 0.0]]},
           "modes": [{"A": (0.5 * np.eye(2)).tolist(), "B_d": [[0], [0]], "D_d": [[0]], "B_f": [[0], [0]],
                      "D_f": [[1]]}], "surfaces": [], "mode_sequence": [1]}
    with pytest.raises(ConfigError, match="unobservable"):
        model.load_plant(doc)


def test_single_mode_without_surfaces():
    doc = {"dimensions": {"n": 2, "p": 1, "m_d": 1, "l": 1}, "shared": {"C": [[1.0, 0.0]]},
           "modes": [{"A": [[0.5, 0.1], [0.0, 0.5]], "B_d": [[0], [0]], "D_d": [[0]], "B_f": [[0], [0]],
                      "D_f": [[1]]}], "surfaces": [], "mode_sequence": [1]}
    pl = model.load_plant(doc)
    assert pl.N == 1 and pl.transitions == []


@pytest.mark.parametrize("mutate, msg", [
    (lambda d: d["modes"][0].__setitem__("A", [[1.0, 0.0]]), "A"),
    (lambda d: d["shared"].__setitem__("C", [[1.0, 2.0, 3.0]]), "C"),
    (lambda d: d.__setitem__("surfaces", d["surfaces"][:1]), "missing surface"),
    (lambda d: d["surfaces"][0].__setitem__("s", [0.0, 0.0]), "zero normal"),
    (lambda d: d.__setitem__("mode_sequence", [1, 3]), "unknown mode"),
    (lambda d: d["modes"][1]["A"][0].__setitem__(0, float("nan")), "finite"),
])
def test_config_errors(paper_cfg, mutate, msg):
    doc = _doc(paper_cfg)
    mutate(doc)
    with pytest.raises(ConfigError, match=msg):
        model.load_plant(doc)


def test_malformed_document():
    with pytest.raises(ConfigError):
        model.load_plant("{not json")
    with pytest.raises(ConfigError):
        model.load_plant({"dimensions": {"n": 2}})


def test_round_trip_is_bit_exact(paper_cfg):
    pl = paper_cfg.plant
    again = model.load_plant(model.serialize(pl))
    assert model.plants_equal(pl, again)
    for a, b in zip(pl.modes, again.modes):
        assert a.A.tobytes() == b.A.tobytes()


@pytest.mark.parametrize("s, x, expected", [
    ([0.25, 1.0], [4.0, -1.0], 0.0),
    ([1.0, 1.0], [0.0, 0.0], 0.0),
    ([1.0, 1.0], [1.0, 2.0], 3.0),
])
def test_surface_value_examples(s, x, expected):
    assert surface_value(SwitchingSurface(np.array(s), 0, 1), x) == expected


def test_surface_value_dimension_mismatch():
    with pytest.raises(ValueError):
        surface_value(SwitchingSurface(np.array([1.0, 1.0]), 0, 1), [1.0, 2.0, 3.0])


finite = st.floats(-1e3, 1e3, allow_nan=False)


@settings(max_examples=200, deadline=None)
@given(st.lists(finite, min_size=3, max_size=3), st.lists(finite, min_size=3, max_size=3),
       st.lists(finite, min_size=3, max_size=3), finite, finite)
def test_surface_value_is_linear(s, x, y, a, b):
    sf = SwitchingSurface(np.array(s), 0, 1)
    if not np.any(sf.s):
        return
    x, y = np.array(x), np.array(y)
    lhs = surface_value(sf, a * x + b * y)
    rhs = a * surface_value(sf, x) + b * surface_value(sf, y)
    scale = np.abs(sf.s) @ (np.abs(a * x) + np.abs(b * y))
    assert abs(lhs - rhs) <= 1e-12 * max(scale, 1e-300) + 1e-300


def test_synthesis_params_validation():
    p = model.SynthesisParams(epsilon=1.0, alpha=0.1, xi=1.0, lambda_q=2.0)
    assert p.gamma_step == 0.95 and p.beta_step == 1.05
    assert p.max_outer_iters == 200 and p.max_inner_iters == 50 and p.omega == 1.0
    assert p.lam(3) == 2.0
    for bad in (dict(epsilon=0.0), dict(alpha=2.0), dict(lambda_q=-1.0), dict(gamma_step=1.2),
                dict(beta_step=0.9), dict(omega=0.0), dict(beta_init=0.0)):
        with pytest.raises(ConfigError):
            p.with_(**bad)
    assert model.SynthesisParams.from_dict(p.to_dict()) == p
    with pytest.raises(ConfigError, match="unknown"):
        model.SynthesisParams.from_dict({**p.to_dict(), "bogus": 1})


def test_bundled_configs_parse():
    for name in ("paper_example.cfg", "relaxed_example.cfg", "sensor_fault_example.cfg"):
        cfg = bundled(name)
        assert cfg.synthesis is not None and cfg.signals


def test_plant_arrays_are_read_only(paper_cfg):
    with pytest.raises(ValueError):
        paper_cfg.plant.C[0, 0] = 2.0
