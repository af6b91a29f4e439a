"""Scene files: TOML descriptions of bodies, materials, solver, and output.

A scene lists one or more bodies (TetGen-style mesh pair + material +
initial transform + Dirichlet pins), global integration settings, optional
contact (barrier + ground plane), solver configuration, and Cubature
training knobs. Unknown keys are rejected to catch typos early.
"""

import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .energy import BarrierParams, MaterialParams
from .local_solver import SolverConfig

SOLVER_TAGS = ("newton", "jgs2_exact", "jgs2_cubature", "plain_local")


class SceneError(Exception):
    """Malformed or inconsistent scene description."""


@dataclass
class BodyConfig:
    node: Path
    ele: Path
    material: MaterialParams
    translate: np.ndarray
    rotate: np.ndarray
    fix_vertices: list
    fix_box: tuple | None  # ((3,), (3,)) axis-aligned pin region in mesh coords


@dataclass
class CubatureConfig:
    target_residual: float = 0.01
    candidates_per_round: int = 32
    max_size: int = 4  # per-sub-problem sample budget
    training_poses: int = 2
    amplitude_fraction: float = 0.02


@dataclass
class SceneConfig:
    name: str
    bodies: list
    gravity: np.ndarray
    h: float
    frames: int
    seed: int
    solver: SolverConfig
    cubature: CubatureConfig
    barrier: BarrierParams | None
    ground_plane: tuple | None  # (point, normal)
    output: Path | None
    base_dir: Path


_TOP_KEYS = {"name", "gravity", "h", "frames", "seed", "output", "solver",
             "cubature", "barrier", "ground_plane", "bodies"}
_SOLVER_KEYS = {"mode", "subspace", "tol_dx", "max_outer", "local_line_search",
                "track_energy"}
_CUBATURE_KEYS = {"target_residual", "candidates_per_round", "max_size",
                  "training_poses", "amplitude_fraction"}
_BARRIER_KEYS = {"dhat", "kappa"}
_PLANE_KEYS = {"point", "normal"}
_BODY_KEYS = {"node", "ele", "young", "poisson", "mu", "lam", "density",
              "translate", "rotate_axis", "rotate_angle", "fix_vertices",
              "fix_box"}


def _reject_unknown(table, allowed, where):
    unknown = sorted(set(table) - allowed)
    if unknown:
        raise SceneError(f"unknown keys in {where}: {', '.join(unknown)}")


def _vec3(value, where):
    arr = np.asarray(value, dtype=np.float64)
    if arr.shape != (3,):
        raise SceneError(f"{where} must be a 3-vector, got {value!r}")
    return arr


def _axis_angle(axis, angle):
    axis = np.asarray(axis, dtype=np.float64)
    n = np.linalg.norm(axis)
    if n == 0:
        return np.eye(3)
    k = axis / n
    kx = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    return np.eye(3) + np.sin(angle) * kx + (1 - np.cos(angle)) * (kx @ kx)


def _parse_body(table, base_dir, index):
    where = f"bodies[{index}]"
    _reject_unknown(table, _BODY_KEYS, where)
    for key in ("node", "ele", "density"):
        if key not in table:
            raise SceneError(f"{where}: missing required key {key!r}")
    node = (base_dir / table["node"]).resolve()
    ele = (base_dir / table["ele"]).resolve()
    for path in (node, ele):
        if not path.exists():
            raise SceneError(f"{where}: mesh file not found: {path}")
    if "young" in table:
        material = MaterialParams.from_young_poisson(
            float(table["young"]), float(table.get("poisson", 0.4)),
            float(table["density"]))
    elif "mu" in table and "lam" in table:
        material = MaterialParams(mu=float(table["mu"]), lam=float(table["lam"]),
                                  density=float(table["density"]))
    else:
        raise SceneError(f"{where}: specify either 'young' (+'poisson') or 'mu'+'lam'")
    rotate = _axis_angle(table.get("rotate_axis", (0.0, 0.0, 1.0)),
                         float(table.get("rotate_angle", 0.0)))
    fix_box = None
    if "fix_box" in table:
        box = np.asarray(table["fix_box"], dtype=np.float64)
        if box.shape != (2, 3):
            raise SceneError(f"{where}: fix_box must be [[lo],[hi]]")
        fix_box = (box[0], box[1])
    return BodyConfig(
        node=node, ele=ele, material=material,
        translate=_vec3(table.get("translate", (0.0, 0.0, 0.0)),
                        f"{where}.translate"),
        rotate=rotate,
        fix_vertices=[int(v) for v in table.get("fix_vertices", [])],
        fix_box=fix_box)


def parse_scene(path) -> SceneConfig:
    """Load and validate a scene file. Defaults: tol_dx 1e-3 (normalized),
    Cubature sample budget 4."""
    path = Path(path)
    if not path.exists():
        raise SceneError(f"scene file not found: {path}")
    with open(path, "rb") as fh:
        try:
            data = tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise SceneError(f"{path}: {exc}") from exc
    _reject_unknown(data, _TOP_KEYS, str(path))
    if "h" not in data:
        raise SceneError(f"{path}: missing required key 'h'")
    if "bodies" not in data or not data["bodies"]:
        raise SceneError(f"{path}: at least one [[bodies]] entry is required")

    h = float(data["h"])
    if h <= 0:
        raise SceneError(f"{path}: h must be positive")
    frames = int(data.get("frames", 1))
    if frames < 1:
        raise SceneError(f"{path}: frames must be >= 1")

    solver_tbl = data.get("solver", {})
    _reject_unknown(solver_tbl, _SOLVER_KEYS, "solver")
    solver = SolverConfig(**solver_tbl)

    cub_tbl = data.get("cubature", {})
    _reject_unknown(cub_tbl, _CUBATURE_KEYS, "cubature")
    cubature = CubatureConfig(**cub_tbl)

    barrier = None
    if "barrier" in data:
        _reject_unknown(data["barrier"], _BARRIER_KEYS, "barrier")
        barrier = BarrierParams(dhat=float(data["barrier"]["dhat"]),
                                kappa=float(data["barrier"]["kappa"]))
    plane = None
    if "ground_plane" in data:
        _reject_unknown(data["ground_plane"], _PLANE_KEYS, "ground_plane")
        plane = (_vec3(data["ground_plane"]["point"], "ground_plane.point"),
                 _vec3(data["ground_plane"]["normal"], "ground_plane.normal"))
    if plane is not None and barrier is None:
        raise SceneError(f"{path}: ground_plane requires a [barrier] section")

    bodies = [_parse_body(b, path.parent, i) for i, b in enumerate(data["bodies"])]
    output = Path(data["output"]) if "output" in data else None
    return SceneConfig(
        name=str(data.get("name", path.stem)),
        bodies=bodies,
        gravity=_vec3(data.get("gravity", (0.0, -9.8, 0.0)), "gravity"),
        h=h, frames=frames, seed=int(data.get("seed", 0)),
        solver=solver, cubature=cubature, barrier=barrier,
        ground_plane=plane, output=output, base_dir=path.parent)


def cache_directory(scene: SceneConfig) -> Path:
    env = os.environ.get("TETSOLVE_CACHE_DIR")
    if env:
        return Path(env)
    return scene.base_dir / ".tetsolve_cache"
