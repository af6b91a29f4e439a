import numpy as np
import pytest

from tetsolve.assembly import Model, SystemState, compute_z, newton_solve, step_velocity_update
from tetsolve.energy import MaterialParams
from tetsolve.primitives import box_grid, single_tet

BEAM_DIVISIONS = (8, 3, 3)
BEAM_EXTENTS = (0.4, 0.15, 0.15)


def beam_model(young=1e6, poisson=0.4, density=1000.0, divisions=BEAM_DIVISIONS,
               extents=BEAM_EXTENTS):
    """Cantilever beam clamped at the x=0 face."""
    mesh = box_grid(divisions, extents)
    material = MaterialParams.from_young_poisson(young, poisson, density)
    fixed = np.flatnonzero(mesh.rest_positions[:, 0] < 1e-9)
    return Model([(mesh, material, fixed, np.zeros(3), np.eye(3))])


def advance_frames(model, h, frames, tol=1e-6):
    """Run `frames` implicit steps with the Newton solver from rest."""
    state = SystemState.initial(model, h)
    for _ in range(frames):
        compute_z(model, state)
        state.x = state.z.copy()
        x_new, stats = newton_solve(model, state, tol_dx=tol)
        assert stats.converged
        step_velocity_update(model, state, x_new)
    return state


def fresh_step(state, h):
    """Copy of a trajectory state at the start of its next step (predictor init)."""
    s = SystemState(x=state.z.copy(), x_prev=state.x_prev.copy(),
                    v=state.v.copy(), z=state.z.copy(), h=h)
    return s


@pytest.fixture(scope="session")
def beam():
    return beam_model()


@pytest.fixture(scope="session")
def small_beam():
    return beam_model(divisions=(4, 1, 1), extents=(0.4, 0.1, 0.1))


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture(scope="session")
def reference_tet():
    return single_tet()
