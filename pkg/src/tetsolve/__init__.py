"""Implicit-Euler FEM elastodynamics with globally aware per-vertex solves."""

from .assembly import Model, SystemState, compute_z, newton_solve, step_velocity_update
from .energy import BarrierParams, MaterialParams
from .local_solver import IterationStats, LocalSolver, SolverConfig
from .mesh import TetMesh, build_mesh, load_mesh, normalize_scene
from .scene import SceneConfig, parse_scene

__all__ = [
    "BarrierParams", "IterationStats", "LocalSolver", "MaterialParams",
    "Model", "SceneConfig", "SolverConfig", "SystemState", "TetMesh",
    "build_mesh", "compute_z", "load_mesh", "newton_solve", "normalize_scene",
    "parse_scene", "step_velocity_update",
]
