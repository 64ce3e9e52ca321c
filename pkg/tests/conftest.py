import numpy as np
import pytest
from hypothesis import settings

from hybridmpm.grid import Label, SimGrid
from hybridmpm.mpm import initial_state, step_physical
from hybridmpm.scenes import make_scene

settings.register_profile("repo", deadline=None, max_examples=40, derandomize=True)
settings.load_profile("repo")


def mixed_scene(seed, n=8):
    """Small two-phase scene with a random solid in a shallow pool."""
    rng = np.random.default_rng(seed)
    dx = 1.0 / n
    solid = {"shape": "box", "center": [rng.uniform(0.35, 0.65), rng.uniform(0.35, 0.55), rng.uniform(0.35, 0.65)],
             "half": [0.15, 0.15, 0.15], "density": float(rng.choice([500.0, 1000.0, 2000.0]))}
    return make_scene("dam_break", n, seed=seed, fluid_blocks=[{"lo": [0, 0, 0], "hi": [1, rng.uniform(0.4, 0.7), 1]}],
                      solids=[solid], spacing=dx)


@pytest.fixture(scope="session")
def dam_break_16():
    return make_scene("dam_break", 16)


@pytest.fixture(scope="session")
def solved_frame(dam_break_16):
    """One cold physical step of the 16^3 dam-break."""
    return step_physical(initial_state(dam_break_16), dam_break_16)


def uniform_grid(dims, spacing=1.0, density=1000.0, label=Label.FLUID):
    """Grid with every cell labelled ``label`` and uniform face mass and density."""
    g = SimGrid(dims, spacing)
    for a in range(3):
        g.mass_f[a][:] = density * spacing ** 3
        g.rho_f[a][:] = density
    g.labels[:] = label
    return g


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = getattr(config, "_acceptance_lines", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
