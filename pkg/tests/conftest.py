import sys
from pathlib import Path

import numpy as np
import pytest
from hypothesis import settings

from monoeit import fem, mesh, synthdata

sys.path.insert(0, str(Path(__file__).parent))

settings.register_profile("default", max_examples=25, deadline=None)
settings.load_profile("default")

Z = 0.1


class Setup:
    def __init__(self, h, k, coverage=0.5, basis="gram_schmidt"):
        self.k = k
        self.mesh = mesh.disk_mesh_for_electrodes(h, k, coverage)
        self.layout = mesh.build_electrode_layout(self.mesh, k, coverage)
        self.basis = synthdata.current_basis(basis, k)
        self.ones = np.ones(self.mesh.n_triangles)

    def system(self, gamma=None, z=Z):
        return fem.assemble_cem_system(self.mesh, self.layout, self.ones if gamma is None else gamma, z)

    def r(self, gamma=None, z=Z):
        return fem.measurement_matrix(self.system(gamma, z), self.basis)


@pytest.fixture(scope="session")
def small():
    """k = 8 on a coarse mesh."""
    return Setup(0.05, 8)


@pytest.fixture(scope="session")
def medium():
    """k = 16 on a moderately coarse mesh."""
    return Setup(0.03, 16)


ACCEPTANCE: list[str] = []


def record(criterion: int, ok: bool, detail: str) -> None:
    """Keep one PASS/FAIL line per acceptance criterion for the terminal summary."""
    line = f"criterion {criterion:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE):
            terminalreporter.write_line(line)
