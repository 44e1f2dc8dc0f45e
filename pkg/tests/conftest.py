import warnings
from importlib import resources

import numpy as np
import pytest

from switched_fdo import model, synthesis

warnings.filterwarnings("ignore", message="Solution may be inaccurate")


def bundled(name):
    return model.load_config((resources.files("switched_fdo") / "data" / name).read_text())


@pytest.fixture(scope="session")
def paper_cfg():
    return bundled("paper_example.cfg")


@pytest.fixture(scope="session")
def relaxed_cfg():
    return bundled("relaxed_example.cfg")


@pytest.fixture(scope="session")
def sensor_cfg():
    return bundled("sensor_fault_example.cfg")


@pytest.fixture(scope="session")
def sensor_design(sensor_cfg):
    return synthesis.synthesize(sensor_cfg.plant, sensor_cfg.synthesis)


@pytest.fixture(scope="session")
def relaxed_design(relaxed_cfg):
    return synthesis.attenuation_design(relaxed_cfg.plant, relaxed_cfg.synthesis)


def scalar_plant(a=0.5, c=1.0, bd=0.0, dd=0.0, bf=0.0, df=1.0):
    doc = {"dimensions": {"n": 1, "p": 1, "m_d": 1, "l": 1}, "shared": {"C": [[c]]},
           "modes": [{"A": [[a]], "B_d": [[bd]], "D_d": [[dd]], "B_f": [[bf]], "D_f": [[df]]}],
           "surfaces": [], "mode_sequence": [1]}
    return model.load_plant(doc)


def two_mode_scalar(a1=0.5, a2=0.6, c=1.0):
    doc = {"dimensions": {"n": 1, "p": 1, "m_d": 1, "l": 1}, "shared": {"C": [[c]]},
           "modes": [{"A": [[a1]], "B_d": [[0.0]], "D_d": [[0.0]], "B_f": [[0.0]], "D_f": [[0.0]]},
                     {"A": [[a2]], "B_d": [[0.0]], "D_d": [[0.0]], "B_f": [[0.0]], "D_f": [[0.0]]}],
           "surfaces": [{"from": 1, "to": 2, "s": [1.0]}, {"from": 2, "to": 1, "s": [1.0]}],
           "mode_sequence": [1, 2]}
    return model.load_plant(doc)


def random_plant(rng, n=2, p=1, m_d=1, l=1, N=2, radius=None):
    """Random observable plant with a 1->2->1... sequence.

    ``radius`` rescales every ``A`` to that spectral radius.
    """
    while True:
        modes = []
        for _ in range(N):
            A = 0.3 * rng.standard_normal((n, n)) + 0.5 * np.eye(n)
            if radius is not None:
                A *= radius / max(np.max(np.abs(np.linalg.eigvals(A))), 1e-12)
            modes.append({"A": A.tolist(),
                          "B_d": rng.standard_normal((n, m_d)).tolist(), "D_d": rng.standard_normal((p, m_d)).tolist(),
                          "B_f": rng.standard_normal((n, l)).tolist(), "D_f": rng.standard_normal((p, l)).tolist()})
        surfaces = []
        for i in range(N):
            j = (i + 1) % N
            if i != j:
                surfaces.append({"from": i + 1, "to": j + 1, "s": rng.standard_normal(n).tolist()})
        doc = {"dimensions": {"n": n, "p": p, "m_d": m_d, "l": l}, "shared": {"C": rng.standard_normal((p, n)).tolist()},
               "modes": modes, "surfaces": surfaces, "mode_sequence": [(k % N) + 1 for k in range(4 * N)] if N > 1 else [1]}
        try:
            return model.load_plant(doc)
        except model.ConfigError:
            continue
