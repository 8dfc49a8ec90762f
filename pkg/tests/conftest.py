"""Shared fixtures: small hand-checkable grids, a switching model provider and the bundled RTS-24 case."""

from pathlib import Path

import numpy as np
import pytest

from mtd_grid import gridmodel
from mtd_grid.gridmodel import CaseModelProvider, LinearModel
from mtd_grid.schemas import ScenarioSpec

DATA_DIR = Path(__file__).resolve().parents[1] / "src" / "mtd_grid" / "data"
RTS24 = DATA_DIR / "rts24.case"

# one generator feeding one load over a b = 10 line
TWO_BUS = """\
[system]
name = two_bus

[bus]
1 generator
2 load

[branch]
1 2 10.0

[generator]
# bus J D e_T T_u T_g K_t r capacity
1 6.0 1.5 1.0 0.3 0.25 1.0 0.05 2.0

[load]
# bus J D demand
2 3.0 1.2 1.0
"""

# two identical generators and one load on a triangle; swapping buses 1 and 2
# is a symmetry, so the two machines respond identically to any load change
TRIANGLE = """\
[system]
name = triangle

[bus]
1 generator
2 generator
3 load

[branch]
1 2 10.0
1 3 10.0
2 3 10.0

[generator]
1 6.0 1.5 1.0 0.3 0.25 1.0 0.05 2.0
2 6.0 1.5 1.0 0.3 0.25 1.0 0.05 2.0

[load]
3 3.0 1.2 1.0
"""


@pytest.fixture
def two_bus_path(tmp_path) -> Path:
    path = tmp_path / "two_bus.case"
    path.write_text(TWO_BUS)
    return path


@pytest.fixture
def triangle_path(tmp_path) -> Path:
    path = tmp_path / "triangle.case"
    path.write_text(TRIANGLE)
    return path


@pytest.fixture
def two_bus_case():
    return gridmodel.parse_case_text(TWO_BUS, "two_bus.case")


@pytest.fixture
def triangle_case():
    return gridmodel.parse_case_text(TRIANGLE, "triangle.case")


@pytest.fixture
def triangle_provider(triangle_case) -> CaseModelProvider:
    return CaseModelProvider(triangle_case)


def triangle_scenario(case: Path, **overrides) -> ScenarioSpec:
    """60 s on the triangle: +0.5 p.u. at bus 3 from t = 5 s to t = 40 s."""
    data = {
        "case": case,
        "duration": 60.0,
        "dt": 0.01,
        "ed_interval": 100.0,
        "theta": 1e-6,
        "seed": 7,
        "load_events": [{"time": 5.0, "bus": 3, "delta": 0.5}, {"time": 40.0, "bus": 3, "delta": -0.5}],
    }
    data.update(overrides)
    return ScenarioSpec(**data)


TRIANGLE_ATTACK = {
    "start": 20.0,
    "duration": 2.0,
    "target": "P_G[1]",
    "kind": "scale",
    "magnitude": 0.1,
    "repeat": 3,
    "every": 5.0,
}


# ============================================================================
# Synthetic semistable models
# ============================================================================

def diagonal_model(decays, loading_label: str = "synthetic") -> LinearModel:
    """x[1] is the zero mode; x[2..] decay at the given rates and share one input."""
    decays = np.asarray(decays, dtype=float)
    A = np.diag(np.concatenate([[0.0], -decays]))
    G = np.concatenate([[0.0], np.ones(decays.size)])[:, None]
    return LinearModel.from_matrices(A, G, loading_label=loading_label)


class SwitchingProvider:
    """Returns a different synthetic model per demand scale."""

    def __init__(self, models: dict[float, LinearModel]):
        self.models = models
        self.load_buses = [1]

    def model(self, scale: float) -> LinearModel:
        return self.models[scale]


@pytest.fixture
def switching_provider() -> SwitchingProvider:
    # x[2]~x[3] at the first operating point, x[2]~x[4] at the second
    return SwitchingProvider(
        {
            1.0: diagonal_model([1.0, 1.0, 2.0], "low"),
            2.0: diagonal_model([1.0, 2.0, 1.0], "high"),
        }
    )


@pytest.fixture
def laplacian3():
    """A = −L for the complete graph on three nodes; v_max is uniform."""
    return np.array([[-2.0, 1.0, 1.0], [1.0, -2.0, 1.0], [1.0, 1.0, -2.0]])


# ============================================================================
# Bundled case
# ============================================================================

@pytest.fixture(scope="session")
def rts24_case():
    return gridmodel.parse_case(RTS24)


@pytest.fixture(scope="session")
def rts24_provider(rts24_case) -> CaseModelProvider:
    return CaseModelProvider(rts24_case)


@pytest.fixture(scope="session")
def rts24_model(rts24_provider) -> LinearModel:
    return rts24_provider.model(1.0)
