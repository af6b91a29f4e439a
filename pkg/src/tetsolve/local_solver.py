"""Parallel per-vertex relaxation with globally aware local systems.

Each outer iteration sweeps all free vertices, solving a 3x3 system per
vertex. The system's damping term makes the local solve globally aware:

  * ``exact``: the Schur-reduced rows of the current global Newton system
    (verification path; one complement factorization per vertex per sweep);
  * ``corotated_cubature``: the precomputed reduced rest Hessian (the stored
    inverse Schur block, conjugated by per-vertex rotations) corrected by
    Cubature-sampled current-pose element terms, with the reduced gradient
    collected exactly through the kept rest factorization (one substitution
    per sweep);
  * ``none``: the plain vertex block descent baseline (own stencil only).

Jacobi sweeps read a common snapshot; Gauss-Seidel sweeps walk color groups
in ascending order. A sweep-level backtracking guard keeps the global
potential non-increasing; it activates only when the parallel updates
collectively overshoot, which the local solves cannot observe. All
accumulation orders are fixed, so runs are bit reproducible.
"""

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from . import contact, cubature as cublib, energy, subspace
from .assembly import (Model, SystemState, assemble, feasibility_step_cap,
                       total_energy)

logger = logging.getLogger(__name__)

SUBSPACE_MODES = ("exact", "corotated_cubature", "none")
SCHEDULES = ("jacobi", "gauss_seidel")


@dataclass
class SolverConfig:
    mode: str = "jacobi"
    subspace: str = "corotated_cubature"
    tol_dx: float = 1e-3  # normalized units
    max_outer: int = 500
    local_line_search: bool = True
    track_energy: bool = True
    exact_size_cap: int = 6000  # DOF cap guarding the exact verification path
    max_halvings: int = 30
    alpha_floor: float = 1e-6

    def __post_init__(self):
        if self.mode not in SCHEDULES:
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.subspace not in SUBSPACE_MODES:
            raise ValueError(f"unknown subspace {self.subspace!r}")
        if self.tol_dx <= 0:
            raise ValueError("tol_dx must be positive")


@dataclass
class IterationStats:
    energies: list = field(default_factory=list)
    dx_norms: list = field(default_factory=list)
    grad_norms: list = field(default_factory=list)
    max_local_steps: list = field(default_factory=list)
    line_search_activations: list = field(default_factory=list)
    wall_ms: list = field(default_factory=list)
    outer_iterations: int = 0
    wall_seconds: float = 0.0
    converged: bool = False


def solve_local(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Direct 3x3 solve; non-SPD input falls back to a scaled gradient step."""
    try:
        delta = np.linalg.solve(a, b)
        if np.all(np.isfinite(delta)):
            return delta
    except np.linalg.LinAlgError:
        pass
    logger.warning("local system not SPD; falling back to gradient step")
    tr = np.trace(a)
    return b * (3.0 / tr) if tr > 0 else np.zeros(3)


def _pair_rows(pair, vertex, mode, basis=None, rotations=None):
    """Perturbation rows of a contact pair's stencil for one sub-problem.

    The sub-problem vertex keeps identity; in subspace modes the opposing
    body copies its perturbation weighted by the closest point's barycentric
    coordinates, and own-body triangle neighbors respond through the basis.
    """
    if pair.kind == "plane":
        return np.eye(3)
    rows = np.zeros((12, 3))
    coupled = mode != "none"
    if vertex == pair.vertex:
        rows[0:3] = np.eye(3)
        if coupled:
            for k in range(3):
                rows[3 + 3 * k:6 + 3 * k] = pair.bary[k] * np.eye(3)
    else:
        j = int(np.flatnonzero(pair.tri == vertex)[0])
        rows[3 + 3 * j:6 + 3 * j] = np.eye(3)
        if coupled:
            rows[0:3] = pair.bary[j] * np.eye(3)
            if basis is not None and rotations is not None:
                r_i = rotations[vertex]
                for k in range(3):
                    w = int(pair.tri[k])
                    if k != j and w in basis.vrows:
                        rows[3 + 3 * k:6 + 3 * k] = rotations[w] @ basis.vrows[w] @ r_i.T
    return rows


def reduced_collect(model: Model, factor, rotations, g_assembled) -> np.ndarray:
    """Exact reduced gradients U_i^T g for all sub-problems at once.

    With the co-rotated basis U_i = R Ubar_i R_i^T and Ubar_i =
    -Hbar^-1 S_i^T Gbar_i, the collect for vertex i is
    -R_i Gbar_i [Hbar^-1 (R^T g)]_i: one forward/backward substitution on
    the rest factorization shared by every sub-problem. Returns q (nv, 3);
    the caller applies its own Gbar_i and rotation.
    """
    y = np.einsum("wba,wb->wa", rotations, g_assembled)
    y[model.fixed_mask] = 0.0
    return factor.solve(y.ravel()).reshape(-1, 3)


def local_system(model: Model, state: SystemState, vertex: int,
                 config: SolverConfig, bases=None, cubature_sets=None,
                 rotations=None, pairs=(), system=None, factor=None,
                 rest_hessians=None):
    """Reference (scalar) local 3x3 system (A, b) at one vertex.

    The batched sweep reproduces this exactly; kept as the readable
    specification of each mode's system.
    """
    x = state.x
    h = state.h
    inc = model.incident[vertex]
    if config.subspace == "exact":
        if system is None:
            system = assemble(model, state, pairs=list(pairs), project_spd=True)
        return subspace.exact_local_system(system.hessian, system.gradient, vertex)

    a = (model.masses[vertex] / h ** 2) * np.eye(3)
    g = (model.masses[vertex] / h ** 2) * (x[vertex] - state.z[vertex])
    if len(inc):
        g_el, h_el = cublib.stencil_gradients(model, x, state.z, h,
                                              with_hessian=True, elements=inc)
        a = np.zeros((3, 3))
        g = np.zeros(3)
        for k, eid in enumerate(inc):
            c = int(np.flatnonzero(model.tets[eid] == vertex)[0])
            a += h_el[k, 3 * c:3 * c + 3, 3 * c:3 * c + 3]
            g += g_el[k, 3 * c:3 * c + 3]
    basis = bases.get(vertex) if bases else None

    if config.subspace == "corotated_cubature":
        r_i = rotations[vertex]
        a = -r_i @ basis.gbar @ r_i.T
        a = a + _delta_correction(model, basis, cubature_sets[vertex], rotations,
                                  x, rest_hessians)
        gst = cublib.stencil_gradients(model, x, state.z, h)
        g_asm = cublib.assembled_gradient(model, x, state.z, h, stencil_grads=gst)
        for pair in pairs:
            _, gp, _ = contact.pair_energy_grad_hess(x, pair, model.planes,
                                                     model.barrier)
            g_asm[pair.stencil] += gp.reshape(-1, 3)
        q = reduced_collect(model, factor, rotations, g_asm)
        g = -r_i @ (basis.gbar_rows @ q[basis.group].ravel())

    for pair in pairs:
        if vertex != pair.vertex and (pair.kind == "plane"
                                      or vertex not in pair.tri):
            continue
        _, gp, hp = contact.pair_energy_grad_hess(
            x, pair, model.planes, model.barrier, project_spd=True)
        rows = _pair_rows(pair, vertex, config.subspace, basis, rotations)
        a += rows.T @ hp @ rows
        if config.subspace == "corotated_cubature":
            # The assembled field already carried the own-row barrier force
            # into the collect; add only the coupled remainder.
            own = 0 if vertex == pair.vertex \
                else 3 * (1 + int(np.flatnonzero(pair.tri == vertex)[0]))
            own_gp = gp if pair.kind == "plane" else gp[own:own + 3]
            g += rows.T @ gp - own_gp
        else:
            g += rows.T @ gp
    return a, -g


def _delta_correction(model, basis, cset, rotations, x, rest_hessians):
    """Cubature-sampled pose correction of the reduced rest Hessian."""
    if cset is None or len(cset.elements) == 0 or rest_hessians is None:
        return np.zeros((3, 3))
    r_i = rotations[basis.vertex]
    _, _, h_cur = energy.snh_batch(
        x[model.tets[cset.elements]], model.dm_inv[cset.elements],
        model.volumes[cset.elements], model.mu[cset.elements],
        model.lam[cset.elements], project_spd=True)
    out = np.zeros((3, 3))
    for k, eid in enumerate(cset.elements):
        verts = model.tets[eid]
        rows = np.vstack([rotations[w] @ basis.vrows[int(w)] @ r_i.T for w in verts])
        rb = np.zeros((12, 12))
        for c in range(4):
            rb[3 * c:3 * c + 3, 3 * c:3 * c + 3] = rotations[verts[c]]
        delta = h_cur[k] - rb @ rest_hessians[eid] @ rb.T
        out += cset.weights[k] * rows.T @ delta @ rows
    return out


class LocalSolver:
    """Drives outer iterations for one model + configuration."""

    def __init__(self, model: Model, config: SolverConfig, bases=None,
                 cubature_sets=None, factor=None):
        self.model = model
        self.config = config
        self.bases = bases or {}
        self.cubature_sets = cubature_sets or {}
        self.factor = factor
        if config.subspace == "corotated_cubature":
            if not self.bases:
                raise ValueError("corotated_cubature needs precomputed bases")
            if self.factor is None:
                raise ValueError("corotated_cubature needs the rest-Hessian "
                                 "factorization from precomputation")
        if config.subspace == "exact" and 3 * model.num_vertices > config.exact_size_cap:
            raise ValueError(
                f"exact subspace is a verification path; {3 * model.num_vertices} DOFs "
                f"exceed the cap of {config.exact_size_cap}")
        self.free = np.flatnonzero(model.free_mask)
        self.rest_hessians = None
        if config.subspace == "corotated_cubature":
            _, _, self.rest_hessians = energy.snh_batch(
                model.rest_positions[model.tets], model.dm_inv, model.volumes,
                model.mu, model.lam, project_spd=True)
        self._build_packs()

    # ---------------------------------------------------------------- setup
    def _build_packs(self):
        model = self.model
        nv = model.num_vertices
        self.valence = np.array([len(model.incident[v]) for v in range(nv)]) \
            if nv else np.zeros(0, dtype=np.int64)
        imax = int(self.valence.max()) if nv and self.valence.size else 0
        self.inc_ids = np.zeros((nv, imax), dtype=np.int64)
        self.inc_slot = np.zeros((nv, imax), dtype=np.int64)
        self.inc_valid = np.zeros((nv, imax), dtype=bool)
        for v in range(nv):
            for k, eid in enumerate(model.incident[v]):
                self.inc_ids[v, k] = eid
                self.inc_slot[v, k] = int(np.flatnonzero(model.tets[eid] == v)[0])
                self.inc_valid[v, k] = True

        self.gbar = np.zeros((nv, 3, 3))
        self.smax = 0
        gmax = 1
        if self.config.subspace == "corotated_cubature":
            gmax = max((len(self.bases[v].group) for v in self.free), default=1)
        # Own rows of the group Schur inverse, padded over group slots.
        self.gbar_rows = np.zeros((nv, 3, 3 * gmax))
        self.group_verts = np.zeros((nv, gmax), dtype=np.int64)
        if self.config.subspace == "corotated_cubature":
            for v in self.free:
                basis = self.bases[v]
                self.gbar[v] = basis.gbar
                k = len(basis.group)
                self.gbar_rows[v, :, :3 * k] = basis.gbar_rows
                self.group_verts[v, :k] = basis.group
            self.smax = max((len(self.cubature_sets[v].elements)
                             for v in self.free), default=0)
        s = self.smax
        self.cub_ids = np.zeros((nv, s), dtype=np.int64)
        self.cub_w = np.zeros((nv, s))
        self.cub_valid = np.zeros((nv, s), dtype=bool)
        self.cub_rows = np.zeros((nv, s, 4, 3, 3))
        self.cub_verts = np.zeros((nv, s, 4), dtype=np.int64)
        if self.config.subspace == "corotated_cubature" and s:
            for v in self.free:
                basis = self.bases[v]
                cset = self.cubature_sets[v]
                for k, eid in enumerate(cset.elements):
                    verts = self.model.tets[eid]
                    missing = [int(w) for w in verts if w not in basis.vrows]
                    if missing:
                        raise KeyError(
                            f"basis at vertex {v} lacks rows for vertices {missing} "
                            f"of cubature element {int(eid)}")
                    self.cub_ids[v, k] = eid
                    self.cub_w[v, k] = cset.weights[k]
                    self.cub_valid[v, k] = True
                    self.cub_verts[v, k] = verts
                    self.cub_rows[v, k] = np.stack([basis.vrows[int(w)] for w in verts])

        self.color_groups = []
        ncol = int(model.colors.max()) + 1 if nv else 0
        for c in range(ncol):
            verts = np.flatnonzero((model.colors == c) & model.free_mask)
            if verts.size:
                self.color_groups.append(verts)

    # ------------------------------------------------------------- assembly
    def _assembled_field(self, x, state, pairs):
        """Per-vertex assembled gradient including barrier forces.

        Element stencils carry all inertia except for isolated vertices,
        whose inertia is added directly.
        """
        g_el = cublib.stencil_gradients(self.model, x, state.z, state.h)
        g_asm = cublib.assembled_gradient(self.model, x, state.z, state.h,
                                          stencil_grads=g_el)
        iso = self.valence == 0
        if np.any(iso):
            g_asm[iso] += (self.model.masses[iso] / state.h ** 2)[:, None] \
                * (x[iso] - state.z[iso])
        for pair in pairs:
            _, gp, _ = contact.pair_energy_grad_hess(x, pair, self.model.planes,
                                                     self.model.barrier)
            g_asm[pair.stencil] += gp.reshape(-1, 3)
        return g_asm

    def _plain_systems(self, x, state, verts, g_asm, pairs, rotations):
        """Own-stencil (vertex block descent) local systems for a subset."""
        model = self.model
        nvv = verts.size
        elems = np.unique(self.inc_ids[verts][self.inc_valid[verts]]) \
            if self.inc_ids.size else np.zeros(0, dtype=np.int64)
        a = np.zeros((nvv, 3, 3))
        g = g_asm[verts].copy()
        if elems.size:
            _, h_el = cublib.stencil_gradients(model, x, state.z, state.h,
                                               with_hessian=True, elements=elems)
            emap = np.full(model.num_elements, -1, dtype=np.int64)
            emap[elems] = np.arange(elems.size)
            ids = self.inc_ids[verts]
            valid = self.inc_valid[verts]
            loc = np.where(valid, emap[ids], 0)
            rsel = 3 * self.inc_slot[verts][..., None] + np.arange(3)
            hsub = h_el[loc][
                np.arange(nvv)[:, None, None, None],
                np.arange(ids.shape[1])[None, :, None, None],
                rsel[:, :, :, None], rsel[:, :, None, :]]
            hsub[~valid] = 0.0
            a += hsub.sum(axis=1)
        iso = self.valence[verts] == 0
        if np.any(iso):
            vi = verts[iso]
            a[iso] += (model.masses[vi] / state.h ** 2)[:, None, None] * np.eye(3)
        self._add_pair_terms(x, verts, a, g, pairs, rotations, own_in_field=True)
        return a, g

    def _sampled_corrections(self, x, state, verts, rotations):
        """Cubature-sampled pose corrections of the reduced rest Hessians.

        For each sub-problem, the sampled elements contribute the reduced
        difference between their current and co-rotated rest Hessians, so the
        frozen Schur damping adapts to stretch-dependent stiffness. Returns
        (nvv, 3, 3) additive corrections.
        """
        model = self.model
        nvv = verts.size
        corr = np.zeros((nvv, 3, 3))
        if not self.smax:
            return corr
        ids = self.cub_ids[verts]
        valid = self.cub_valid[verts]
        flat = np.unique(ids[valid]) if np.any(valid) else np.zeros(0, np.int64)
        if not flat.size:
            return corr
        r_i = rotations[verts]
        _, _, h_cur = energy.snh_batch(
            x[model.tets[flat]], model.dm_inv[flat], model.volumes[flat],
            model.mu[flat], model.lam[flat], project_spd=True)
        emap = np.full(model.num_elements, 0, dtype=np.int64)
        emap[flat] = np.arange(flat.size)
        rot_w = rotations[self.cub_verts[verts]]  # (nvv, s, 4, 3, 3)
        rows = np.einsum("vskab,vskbc,vsdc->vskad", rot_w, self.cub_rows[verts],
                         np.broadcast_to(r_i[:, None], rot_w.shape[:2] + (3, 3)))
        rows12 = rows.reshape(nvv, self.smax, 12, 3)
        hg = h_cur[emap[ids]]
        # Co-rotate the rest element Hessians blockwise.
        hrest = self.rest_hessians[ids].reshape(nvv, self.smax, 4, 3, 4, 3)
        hrot = np.einsum("vskab,vskbmc,vsmdc->vskamd", rot_w, hrest, rot_w)
        delta = hg - hrot.reshape(nvv, self.smax, 12, 12)
        w = self.cub_w[verts] * valid
        corr = np.einsum("vs,vsia,vsij,vsjb->vab", w, rows12, delta, rows12)
        return corr

    def _reduced_systems(self, x, state, verts, g_asm, pairs, rotations,
                         q=None, corr=None):
        """Co-rotated reduced systems: frozen Schur block + sampled correction."""
        model = self.model
        r_i = rotations[verts]
        a = -np.einsum("vab,vbc,vdc->vad", r_i, self.gbar[verts], r_i)
        if q is None:
            q = reduced_collect(model, self.factor, rotations, g_asm)
        # Collect through the own rows of the group Schur inverse; padded
        # group slots carry zero rows.
        qg = q[self.group_verts[verts]].reshape(verts.size, -1)
        g = -np.einsum("vab,vbk,vk->va", r_i, self.gbar_rows[verts], qg)

        if corr is None:
            corr = self._sampled_corrections(x, state, verts, rotations)
        a = a + corr
        a = 0.5 * (a + np.swapaxes(a, 1, 2))
        # SPD floor: the sampled correction may not be definite.
        wmin = np.linalg.eigvalsh(a).min(axis=1)
        bad = wmin <= 0.0
        if np.any(bad):
            floor = model.masses[verts[bad]] / state.h ** 2
            a[bad] += (1e-9 * floor - wmin[bad])[:, None, None] * np.eye(3)
        self._add_pair_terms(x, verts, a, g, pairs, rotations, own_in_field=False)
        return a, g

    def _add_pair_terms(self, x, verts, a, g, pairs, rotations, own_in_field):
        """Contact contributions per sub-problem, via the pair's coupling rows.

        ``own_in_field`` False means the own-row barrier force already entered
        g through the assembled-field collect, so only the remainder is added.
        """
        if not pairs:
            return
        model = self.model
        vmap = {int(v): k for k, v in enumerate(verts)}
        for pair in pairs:
            members = [pair.vertex] if pair.kind == "plane" \
                else [pair.vertex, *pair.tri.tolist()]
            hit = [vmap[m] for m in members if m in vmap]
            if not hit:
                continue
            _, gp, hp = contact.pair_energy_grad_hess(
                x, pair, model.planes, model.barrier, project_spd=True)
            for k in hit:
                v = int(verts[k])
                basis = self.bases.get(v)
                rows = _pair_rows(pair, v, self.config.subspace, basis, rotations)
                a[k] += rows.T @ hp @ rows
                proj = rows.T @ gp
                if not own_in_field:
                    own = 0 if v == pair.vertex \
                        else 3 * (1 + int(np.flatnonzero(pair.tri == v)[0]))
                    own_gp = gp if pair.kind == "plane" else gp[own:own + 3]
                    proj = proj - own_gp
                g[k] += proj

    # ----------------------------------------------------------- line search
    def _alpha_caps(self, x, verts, delta, pairs):
        alpha = np.ones(verts.size)
        if not pairs:
            return alpha
        vmap = {int(v): k for k, v in enumerate(verts)}
        dnorm = np.linalg.norm(delta, axis=1)
        for pair in pairs:
            d = contact.pair_current_distance(x, pair, self.model.planes)
            members = [pair.vertex] if pair.kind == "plane" \
                else [pair.vertex, *pair.tri.tolist()]
            for v in members:
                k = vmap.get(int(v))
                if k is None:
                    continue
                if pair.kind == "plane":
                    rate = max(-(delta[k] @ self.model.planes[pair.plane].normal), 0.0)
                else:
                    rate = 2.0 * dnorm[k]
                if rate > 0:
                    alpha[k] = min(alpha[k], 0.9 * d / rate)
        return np.minimum(alpha, 1.0)

    def _local_estimates(self, x, state, verts, delta, alpha, pairs, rotations,
                         a, g):
        """Per-vertex decrease model at alpha: the mode's quadratic local
        system plus exact barrier energies under the coupled virtual moves.
        Plain mode instead evaluates its own stencil energies exactly."""
        model = self.model
        nvv = verts.size
        step = alpha[:, None] * delta
        if self.config.subspace == "none":
            energies = np.zeros(nvv)
            ids = self.inc_ids[verts]
            valid = self.inc_valid[verts]
            if ids.size:
                pos = x[model.tets[ids]]
                own = self.inc_slot[verts]
                pos[np.arange(nvv)[:, None], np.arange(ids.shape[1])[None, :],
                    own] += step[:, None, :]
                flat = ids.ravel()
                e = energy.snh_energy_only(pos.reshape(-1, 4, 3),
                                           model.dm_inv[flat],
                                           model.volumes[flat], model.mu[flat],
                                           model.lam[flat])
                diff = pos - state.z[model.tets[ids]]
                inert = 0.5 * model.elem_qmass[flat].reshape(nvv, -1) / state.h ** 2 \
                    * np.einsum("vekc,vekc->ve", diff, diff)
                e = e.reshape(nvv, -1) + inert
                e[~valid] = 0.0
                energies += e.sum(axis=1)
            iso = self.valence[verts] == 0
            if np.any(iso):
                vi = verts[iso]
                diff = x[vi] + step[iso] - state.z[vi]
                energies[iso] += 0.5 * model.masses[vi] / state.h ** 2 \
                    * np.einsum("vc,vc->v", diff, diff)
            if pairs:
                # The stencil estimate misses barrier energy; add it exactly.
                vmap = {int(v): k for k, v in enumerate(verts)}
                for pair in pairs:
                    members = [pair.vertex] if pair.kind == "plane" \
                        else [pair.vertex, *pair.tri.tolist()]
                    for v in members:
                        k = vmap.get(int(v))
                        if k is None:
                            continue
                        xt = x.copy()
                        xt[v] = xt[v] + step[k]
                        try:
                            energies[k] += contact.pair_energy(
                                xt, pair, model.planes, model.barrier)
                        except energy.FeasibilityError:
                            energies[k] += np.inf
        else:
            # Quadratic model of the reduced system (g holds +gradient and the
            # system already carries the linearized barrier terms).
            energies = np.einsum("vc,vc->v", step, g) \
                + 0.5 * np.einsum("va,vab,vb->v", step, a, step)
        return energies

    def _line_search(self, x, state, verts, delta, pairs, rotations, a, g):
        if not self.config.local_line_search:
            return np.ones(verts.size), 0
        alpha = self._alpha_caps(x, verts, delta, pairs)
        zero = np.zeros(verts.size)
        base = self._local_estimates(x, state, verts, delta, zero, pairs,
                                     rotations, a, g)
        activations = 0
        accepted = np.zeros(verts.size, dtype=bool)
        for halving in range(self.config.max_halvings + 1):
            cand = self._local_estimates(x, state, verts, delta, alpha, pairs,
                                         rotations, a, g)
            accepted |= cand <= base + 1e-12 * np.abs(base)
            if halving == 0:
                activations = int(np.count_nonzero(~accepted))
            if accepted.all():
                break
            alpha[~accepted] *= 0.5
            if alpha[~accepted].max(initial=0.0) < self.config.alpha_floor:
                logger.warning("local line search floored at %d vertices",
                               int(np.count_nonzero(~accepted)))
                alpha[~accepted] = self.config.alpha_floor
                break
        return alpha, activations

    def _global_backtrack(self, state, x_before, dx, e_before, pairs):
        """Sweep-level safety: keep the collective update feasible and
        non-increasing in the global potential. Rarely active; a parallel
        sweep has no monotonicity guarantee of its own."""
        model = self.model
        gamma = feasibility_step_cap(model, x_before, dx) if pairs or model.planes \
            else 1.0
        halvings = 0
        while halvings <= self.config.max_halvings:
            x_try = x_before + gamma * dx
            try:
                e_try = total_energy(model, state, x_try,
                                     model.find_pairs(x_try))
            except energy.FeasibilityError:
                e_try = np.inf
            if e_try <= e_before + 1e-12 * abs(e_before):
                break
            gamma *= 0.5
            halvings += 1
        if halvings > self.config.max_halvings:
            logger.warning("global sweep backtracking floored; keeping tiny step")
        state.x = x_before + gamma * dx
        return gamma * dx, halvings

    # --------------------------------------------------------------- sweeps
    def _solve_batch(self, a, b):
        try:
            delta = np.linalg.solve(a, b[..., None])[..., 0]
        except np.linalg.LinAlgError:
            delta = np.stack([solve_local(a[k], b[k]) for k in range(a.shape[0])])
        bad = ~np.all(np.isfinite(delta), axis=1)
        for k in np.flatnonzero(bad):
            delta[k] = solve_local(a[k], b[k])
        return delta

    def _group_update(self, x, state, verts, pairs, rotations, info, q=None,
                      corr=None):
        g_asm = self._assembled_field(x, state, pairs)
        if self.config.subspace == "corotated_cubature":
            a, g = self._reduced_systems(x, state, verts, g_asm, pairs, rotations,
                                         q=q, corr=corr)
        else:
            a, g = self._plain_systems(x, state, verts, g_asm, pairs, rotations)
        delta = self._solve_batch(a, -g)
        alpha, acts = self._line_search(x, state, verts, delta, pairs,
                                        rotations, a, g)
        info["line_search_activations"] += acts
        info["grad_sq"] += float(np.sum(g_asm[self.model.free_mask] ** 2)) \
            if self.config.mode == "jacobi" else float(np.sum(g_asm[verts] ** 2))
        return alpha[:, None] * delta

    def sweep(self, state: SystemState, rotations=None):
        """One outer iteration; returns (dx applied, info dict)."""
        model = self.model
        x = state.x
        if rotations is None:
            rotations = np.broadcast_to(np.eye(3), (model.num_vertices, 3, 3))
        pairs = model.find_pairs(x)
        info = {"line_search_activations": 0, "max_local_step": 0.0,
                "grad_norm": 0.0, "grad_sq": 0.0}
        dx = np.zeros_like(x)

        guard = self.config.local_line_search
        e_before = total_energy(model, state, x, pairs) if guard else None

        if self.config.subspace == "exact":
            dx, info = self._sweep_exact(state, pairs, info)
        elif self.config.mode == "jacobi":
            verts = self.free
            dx[verts] = self._group_update(x, state, verts, pairs, rotations, info)
            state.x = x + dx
            info["grad_norm"] = np.sqrt(info["grad_sq"])
        else:
            # Gauss-Seidel: colors see earlier colors' positions through the
            # stencil and contact terms, but the reduced collect is taken
            # against the sweep-start residual; re-collecting per color would
            # let every color absorb the same global correction again.
            x_cur = x.copy()
            q0 = None
            corr0 = {}
            if self.config.subspace == "corotated_cubature":
                g_asm0 = self._assembled_field(x, state, pairs)
                q0 = reduced_collect(model, self.factor, rotations, g_asm0)
                for ci, verts in enumerate(self.color_groups):
                    corr0[ci] = self._sampled_corrections(x, state, verts,
                                                          rotations)
            for ci, verts in enumerate(self.color_groups):
                cpairs = model.find_pairs(x_cur)
                step = self._group_update(x_cur, state, verts, cpairs,
                                          rotations, info, q=q0,
                                          corr=corr0.get(ci))
                x_cur[verts] += step
                dx[verts] += step
            state.x = x_cur
            info["grad_norm"] = np.sqrt(info["grad_sq"])

        if guard:
            dx, halvings = self._global_backtrack(state, x, dx, e_before, pairs)
            info["line_search_activations"] += halvings
        info["max_local_step"] = float(np.linalg.norm(dx, axis=1).max(initial=0.0))
        return dx, info

    def _sweep_exact(self, state, pairs, info):
        """Exact-mode sweep: each vertex takes its Schur-reduced Newton row.

        Per-vertex backtracking is skipped (the stacked update is the global
        Newton direction; the sweep-level guard handles nonlinear frames).
        """
        model = self.model
        x = state.x
        system = assemble(model, state, pairs=pairs, project_spd=True)
        info["grad_norm"] = float(np.linalg.norm(system.gradient))
        dx = np.zeros_like(x)
        if self.config.mode == "jacobi":
            verts_groups = [self.free]
        else:
            verts_groups = self.color_groups
        x_cur = x.copy()
        for gi, verts in enumerate(verts_groups):
            if gi > 0:  # re-linearize after earlier colors moved
                state.x = x_cur
                system = assemble(model, state, pairs=model.find_pairs(x_cur),
                                  project_spd=True)
            delta = np.zeros((verts.size, 3))
            for k, v in enumerate(verts):
                delta[k] = subspace.exact_local_update(system.hessian,
                                                       system.gradient, int(v))
            x_cur[verts] += delta
            dx[verts] += delta
        state.x = x_cur
        return dx, info

    # ---------------------------------------------------------------- outer
    def outer_solve(self, state: SystemState) -> IterationStats:
        """Sweeps until the normalized position change drops below tol_dx.

        Vertex rotations are refreshed each sweep in co-rotated mode. Reports
        non-convergence in the stats rather than raising.
        """
        cfg = self.config
        stats = IterationStats()
        t0 = time.perf_counter()
        for _ in range(cfg.max_outer):
            t_it = time.perf_counter()
            rotations = None
            if cfg.subspace == "corotated_cubature":
                rotations = subspace.vertex_rotations(self.model, state.x)
                state.rotations = rotations
            dx, info = self.sweep(state, rotations=rotations)
            stats.wall_ms.append(1e3 * (time.perf_counter() - t_it))
            dxn = self.model.dx_norm(dx)
            stats.dx_norms.append(dxn)
            stats.grad_norms.append(info["grad_norm"])
            stats.max_local_steps.append(info["max_local_step"])
            stats.line_search_activations.append(info["line_search_activations"])
            if cfg.track_energy:
                stats.energies.append(total_energy(
                    self.model, state, state.x, self.model.find_pairs(state.x)))
            stats.outer_iterations += 1
            if dxn < cfg.tol_dx:
                stats.converged = True
                break
        stats.wall_seconds = time.perf_counter() - t0
        if not stats.converged:
            logger.warning("outer solve hit max_outer=%d with |dx|=%.3g",
                           cfg.max_outer, stats.dx_norms[-1] if stats.dx_norms else np.nan)
        return stats
