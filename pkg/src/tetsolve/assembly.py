"""Global incremental potential: flattened multi-body model, sparse assembly,
and the full Newton reference solver with feasibility-capped line search.

DOF layout is vertex-major (3 DOFs per vertex) over the concatenation of all
bodies. Dirichlet constraints are enforced by row/column elimination with an
identity diagonal, so constrained vertices never move.
"""

import logging
import time
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import contact, energy
from .contact import HalfSpace
from .energy import BarrierParams, FeasibilityError, MaterialParams
from .mesh import SceneNormalization, TetMesh, greedy_color

logger = logging.getLogger(__name__)


class FactorizationError(Exception):
    """Sparse factorization failed; assembly is likely indefinite."""


@dataclass
class Body:
    mesh: TetMesh
    material: MaterialParams
    fixed: np.ndarray  # local vertex ids with Dirichlet constraints
    translate: np.ndarray  # initial world offset
    rotate: np.ndarray  # initial world rotation (3, 3)
    vertex_offset: int = 0
    element_offset: int = 0


class Model:
    """Static scene data: concatenated meshes, materials, constraints, contact."""

    def __init__(self, bodies, gravity=(0.0, -9.8, 0.0), planes=(),
                 barrier: BarrierParams | None = None):
        self.bodies = []
        voff = eoff = 0
        for mesh, material, fixed, translate, rotate in bodies:
            self.bodies.append(Body(
                mesh=mesh, material=material,
                fixed=np.asarray(fixed, dtype=np.int64),
                translate=np.asarray(translate, dtype=np.float64),
                rotate=np.asarray(rotate, dtype=np.float64),
                vertex_offset=voff, element_offset=eoff))
            voff += mesh.num_vertices
            eoff += mesh.num_elements
        self.num_vertices = voff
        self.num_elements = eoff
        self.gravity = np.asarray(gravity, dtype=np.float64)
        self.planes = [p if isinstance(p, HalfSpace) else HalfSpace(*p) for p in planes]
        self.barrier = barrier

        self.rest_positions = np.vstack([b.mesh.rest_positions for b in self.bodies]) \
            if self.bodies else np.zeros((0, 3))
        self.initial_positions = np.vstack([
            b.mesh.rest_positions @ b.rotate.T + b.translate for b in self.bodies]) \
            if self.bodies else np.zeros((0, 3))
        self.tets = np.vstack([b.mesh.tets + b.vertex_offset for b in self.bodies]) \
            if self.bodies else np.zeros((0, 4), dtype=np.int64)
        self.volumes = np.concatenate([b.mesh.rest_volumes for b in self.bodies]) \
            if self.bodies else np.zeros(0)
        self.dm_inv = np.vstack([b.mesh.dm_inv for b in self.bodies]) \
            if self.bodies else np.zeros((0, 3, 3))
        self.mu = np.concatenate([np.full(b.mesh.num_elements, b.material.mu)
                                  for b in self.bodies]) if self.bodies else np.zeros(0)
        self.lam = np.concatenate([np.full(b.mesh.num_elements, b.material.lam)
                                   for b in self.bodies]) if self.bodies else np.zeros(0)
        self.masses = np.concatenate([
            b.mesh.vertex_masses * (b.material.density / b.mesh.density)
            for b in self.bodies]) if self.bodies else np.zeros(0)
        # Quarter of each element's mass, used when folding inertia into
        # element stencils for complement sampling.
        self.elem_qmass = np.concatenate([
            np.full(b.mesh.num_elements, b.material.density) * b.mesh.rest_volumes / 4.0
            for b in self.bodies]) if self.bodies else np.zeros(0)

        self.vertex_body = np.concatenate([
            np.full(b.mesh.num_vertices, k) for k, b in enumerate(self.bodies)]) \
            if self.bodies else np.zeros(0, dtype=np.int64)
        self.tet_body = np.concatenate([
            np.full(b.mesh.num_elements, k) for k, b in enumerate(self.bodies)]) \
            if self.bodies else np.zeros(0, dtype=np.int64)
        self.surface_tris = np.vstack([
            b.mesh.surface_tris + b.vertex_offset for b in self.bodies]) \
            if self.bodies else np.zeros((0, 3), dtype=np.int64)
        self.surface_tri_body = np.concatenate([
            np.full(len(b.mesh.surface_tris), k) for k, b in enumerate(self.bodies)]) \
            if self.bodies else np.zeros(0, dtype=np.int64)
        self.surface_vertices = np.unique(self.surface_tris) \
            if len(self.surface_tris) else np.zeros(0, dtype=np.int64)

        self.fixed_mask = np.zeros(self.num_vertices, dtype=bool)
        for b in self.bodies:
            self.fixed_mask[b.fixed + b.vertex_offset] = True
        self.free_mask = ~self.fixed_mask

        self.incident = [np.empty(0, dtype=np.int64) for _ in range(self.num_vertices)]
        for b in self.bodies:
            for j, inc in enumerate(b.mesh.incident):
                self.incident[j + b.vertex_offset] = inc + b.element_offset
        self.colors = greedy_color(self.tets, self.num_vertices)

        lo = self.initial_positions.min(axis=0)
        extent = float((self.initial_positions.max(axis=0) - lo).max())
        if extent <= 0:
            extent = 1.0
        self.normalization = SceneNormalization(scale=1.0 / extent, offset=-lo / extent)

    def dx_norm(self, dx: np.ndarray) -> float:
        """L2 norm of a position change, in scene-normalized units."""
        return float(self.normalization.scale * np.linalg.norm(dx))

    def find_pairs(self, positions: np.ndarray):
        if self.barrier is None:
            return []
        return contact.point_distances(
            positions, self.surface_vertices, self.vertex_body,
            self.surface_tris, self.surface_tri_body, self.planes,
            self.barrier.dhat)


@dataclass
class SystemState:
    x: np.ndarray  # (nv, 3)
    x_prev: np.ndarray
    v: np.ndarray
    z: np.ndarray
    h: float
    rotations: np.ndarray | None = None  # (nv, 3, 3)

    @staticmethod
    def initial(model: Model, h: float) -> "SystemState":
        x0 = model.initial_positions.copy()
        return SystemState(x=x0.copy(), x_prev=x0.copy(),
                           v=np.zeros_like(x0), z=x0.copy(), h=float(h))


@dataclass
class SparseSystem:
    energy: float
    gradient: np.ndarray  # (3N,)
    hessian: sp.csr_matrix | None


@dataclass
class NewtonStats:
    energies: list = field(default_factory=list)
    dx_norms: list = field(default_factory=list)
    grad_norms: list = field(default_factory=list)
    line_search_halvings: list = field(default_factory=list)
    wall_ms: list = field(default_factory=list)
    iterations: int = 0
    converged: bool = False


def compute_z(model: Model, state: SystemState, external_force=None) -> np.ndarray:
    """Inertia target z = x_prev + h v + h^2 M^-1 f_ext, stored in the state.

    The default external force is gravity, f = M g. Dirichlet vertices keep
    z = x_prev so their inertia term is inert.
    """
    h = state.h
    if external_force is None:
        accel = np.broadcast_to(model.gravity, state.x_prev.shape)
    else:
        accel = np.asarray(external_force, dtype=np.float64).reshape(-1, 3) \
            / model.masses[:, None]
    z = state.x_prev + h * state.v + h * h * accel
    z[model.fixed_mask] = state.x_prev[model.fixed_mask]
    state.z = z
    return z


def total_energy(model: Model, state: SystemState, x: np.ndarray, pairs) -> float:
    """Incremental potential at positions x (inertia + elastic + barrier)."""
    elastic = float(np.sum(energy.snh_energy_only(
        x[model.tets], model.dm_inv, model.volumes, model.mu, model.lam)))
    diff = x - state.z
    inert = float(0.5 * np.sum(model.masses * np.einsum("ij,ij->i", diff, diff)) / state.h ** 2)
    bar = 0.0
    for pair in pairs:
        bar += contact.pair_energy(x, pair, model.planes, model.barrier)
    return elastic + inert + bar


def assemble(model: Model, state: SystemState, pairs=None, project_spd=True,
             with_hessian=True) -> SparseSystem:
    """Energy, gradient, and sparse Hessian of the incremental potential.

    Element contributions are accumulated in ascending element order and
    COO duplicates are summed canonically, so the result is reproducible.
    """
    x = state.x
    n = 3 * model.num_vertices
    if pairs is None:
        pairs = model.find_pairs(x)

    e_el, g_el, h_el = energy.snh_batch(
        x[model.tets], model.dm_inv, model.volumes, model.mu, model.lam,
        project_spd=project_spd, with_hessian=with_hessian)

    grad = np.zeros((model.num_vertices, 3))
    np.add.at(grad, model.tets.ravel(), g_el.reshape(-1, 4, 3).reshape(-1, 3))

    diff = x - state.z
    c = model.masses / state.h ** 2
    grad += c[:, None] * diff
    total = float(np.sum(e_el)
                  + 0.5 * np.sum(c * np.einsum("ij,ij->i", diff, diff)))

    rows = []
    cols = []
    vals = []
    if with_hessian and model.num_elements:
        dof = (3 * model.tets[:, :, None] + np.arange(3)).reshape(-1, 12)
        rows.append(np.repeat(dof, 12, axis=1).ravel())
        cols.append(np.tile(dof, (1, 12)).ravel())
        vals.append(h_el.ravel())
    if with_hessian:
        diag = np.repeat(c, 3)
        rows.append(np.arange(n))
        cols.append(np.arange(n))
        vals.append(diag)

    for pair in pairs:
        b, gp, hp = contact.pair_energy_grad_hess(
            x, pair, model.planes, model.barrier, project_spd=project_spd)
        total += b
        st = pair.stencil
        grad[st] += gp.reshape(-1, 3)
        if with_hessian:
            dof = (3 * st[:, None] + np.arange(3)).ravel()
            rows.append(np.repeat(dof, dof.size))
            cols.append(np.tile(dof, dof.size))
            vals.append(hp.ravel())

    grad[model.fixed_mask] = 0.0
    hess = None
    if with_hessian:
        hess = sp.coo_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
            shape=(n, n)).tocsr()
        fixed_dofs = np.flatnonzero(np.repeat(model.fixed_mask, 3))
        if fixed_dofs.size:
            mask = sp.csr_matrix(
                (np.ones(n - fixed_dofs.size),
                 (np.setdiff1d(np.arange(n), fixed_dofs),) * 2), shape=(n, n))
            hess = mask @ hess @ mask
            hess = hess + sp.csr_matrix(
                (np.ones(fixed_dofs.size), (fixed_dofs, fixed_dofs)), shape=(n, n))
    return SparseSystem(energy=total, gradient=grad.ravel(), hessian=hess)


def feasibility_step_cap(model: Model, x: np.ndarray, dx: np.ndarray) -> float:
    """Largest safe fraction of dx before any contact distance could reach zero.

    Conservative Lipschitz bound: a pair's distance changes at most as fast
    as its endpoints move. Capped at 0.9x the bound, 1.0 when contact-free.
    """
    if model.barrier is None or not len(model.surface_vertices):
        return 1.0
    alpha = 1.0
    sv = model.surface_vertices
    for plane in model.planes:
        d = (x[sv] - plane.point) @ plane.normal
        rate = -(dx[sv] @ plane.normal)
        moving = rate > 0
        if np.any(moving):
            alpha = min(alpha, 0.9 * float(np.min(d[moving] / rate[moving])))
    if len(model.bodies) > 1 and len(model.surface_tris):
        p = x[sv]
        tri = x[model.surface_tris]
        dist, _ = contact.closest_point_triangles(p, tri)
        cross = model.vertex_body[sv][:, None] != model.surface_tri_body[None, :]
        dist = np.where(cross, dist, np.inf)
        speed_v = np.linalg.norm(dx[sv], axis=1)
        speed_tri = np.linalg.norm(dx[model.surface_tris], axis=2).max(axis=1)
        rate = speed_v[:, None] + speed_tri[None, :]
        ok = rate > 1e-30
        if np.any(ok):
            alpha = min(alpha, 0.9 * float(np.min(dist[ok] / rate[ok])))
    return max(alpha, 0.0)


def newton_solve(model: Model, state: SystemState, tol_dx: float = 1e-6,
                 max_iterations: int = 100, max_halvings: int = 30) -> tuple:
    """Minimize the incremental potential with sparse Newton + backtracking.

    Stops when the normalized position change drops below ``tol_dx``.
    Returns (x_new, NewtonStats); ``state.x`` is left at the solution.
    """
    stats = NewtonStats()
    x = state.x
    for _ in range(max_iterations):
        t_it = time.perf_counter()
        pairs = model.find_pairs(x)
        system = assemble(model, state, pairs=pairs)
        try:
            factor = spla.splu(system.hessian.tocsc())
        except RuntimeError as exc:
            raise FactorizationError(
                f"Newton factorization failed: {exc}; enable SPD projection") from exc
        dx = factor.solve(-system.gradient).reshape(-1, 3)
        if not np.all(np.isfinite(dx)):
            raise FactorizationError("Newton solve produced non-finite update")

        alpha = min(1.0, feasibility_step_cap(model, x, dx))
        halvings = 0
        while halvings < max_halvings:
            x_try = x + alpha * dx
            try:
                e_try = total_energy(model, state, x_try, model.find_pairs(x_try))
            except FeasibilityError:
                e_try = np.inf
            if e_try <= system.energy + 1e-12 * abs(system.energy):
                break
            alpha *= 0.5
            halvings += 1
        step = alpha * dx
        x = x + step

        state.x = x
        dxn = model.dx_norm(step)
        stats.wall_ms.append(1e3 * (time.perf_counter() - t_it))
        stats.energies.append(system.energy)
        stats.dx_norms.append(dxn)
        stats.grad_norms.append(float(np.linalg.norm(system.gradient)))
        stats.line_search_halvings.append(halvings)
        stats.iterations += 1
        if dxn < tol_dx:
            stats.converged = True
            break
    state.x = x
    return x, stats


def step_velocity_update(model: Model, state: SystemState, x_new: np.ndarray) -> SystemState:
    """Implicit-Euler velocity update, advancing the state to the next frame."""
    state.v = (x_new - state.x_prev) / state.h
    state.x_prev = x_new.copy()
    state.x = x_new.copy()
    return state
