"""Per-sub-problem perturbation bases.

A sub-problem (one free vertex, or a color group of them) owns a basis that
maps its DOF increment to the induced increment on the rest of the mesh under
incremental equilibrium. Three constructions live here:

  * the exact runtime form, factorizing the current complement Hessian block
    per call (verification only);
  * the rest-shape precomputation that factorizes the full rest Hessian once
    and recovers every basis through a small Schur-block inverse;
  * the co-rotated runtime form that conjugates precomputed rows by
    per-vertex rotations from polar decomposition.
"""

import hashlib
import logging
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import energy
from .assembly import Model, SystemState, assemble

logger = logging.getLogger(__name__)


class PrecomputeError(Exception):
    """Singular Schur block or failed factorization during precomputation."""


@dataclass
class PerturbationBasis:
    vertex: int
    gbar: np.ndarray  # (3, 3) own diagonal block of the (negated) inverse Schur complement
    vrows: dict  # retained vertex id -> (3, 3) basis rows at that vertex
    reduced_mass: np.ndarray  # (3, 3) complement mass projected through the basis
    group: np.ndarray = None  # sub-problem vertex ids (self alone in Jacobi mode)
    gbar_rows: np.ndarray = None  # (3, 3k) own rows of the group's Schur inverse
    full: np.ndarray | None = None  # (N, 3), verification / training only

    def element_rows(self, eid: int, tets: np.ndarray) -> np.ndarray:
        """Stacked (12, 3) rows over the element's four vertices."""
        return np.vstack([self.vrows[w] for w in tets[eid]])


def rest_hessian(model: Model, h_ref: float) -> sp.csr_matrix:
    """Rest-shape Hessian M/h_ref^2 + SPD-projected elastic, Dirichlet-eliminated.

    Built in the material frame; the inertia term removes the rigid null
    space so the matrix is positive definite.
    """
    x0 = model.rest_positions.copy()
    state = SystemState(x=x0, x_prev=x0.copy(), v=np.zeros_like(x0),
                        z=x0.copy(), h=float(h_ref))
    return assemble(model, state, pairs=[], project_spd=True).hessian


def exact_local_system(hessian: sp.spmatrix, gradient: np.ndarray, vertex: int):
    """Schur-reduced 3x3 system at one vertex of the current global Hessian.

    Returns (A, b) with A = H_ii + H_iC U_C and b = H_iC H_CC^-1 g_C - g_i;
    solving A dx = b reproduces the vertex's rows of the global Newton step.
    The complement block is factorized per call, so this is a verification
    path for small systems.
    """
    n = hessian.shape[0]
    dofs = np.arange(3 * vertex, 3 * vertex + 3)
    comp = np.setdiff1d(np.arange(n), dofs)
    hcsr = hessian.tocsr()
    h_ii = hcsr[dofs][:, dofs].toarray()
    h_ic = hcsr[dofs][:, comp].toarray()
    h_cc = hcsr[comp][:, comp].tocsc()
    try:
        factor = spla.splu(h_cc)
    except RuntimeError as exc:
        raise PrecomputeError(f"singular complement block at vertex {vertex}: {exc}") from exc
    u_c = -factor.solve(h_ic.T)  # (n-3, 3)
    y = factor.solve(gradient[comp])
    a = h_ii + h_ic @ u_c
    b = h_ic @ y - gradient[dofs]
    return a, b


def exact_local_update(hessian: sp.spmatrix, gradient: np.ndarray, vertex: int) -> np.ndarray:
    a, b = exact_local_system(hessian, gradient, vertex)
    return np.linalg.solve(a, b)


def naive_complement_basis(hessian: sp.spmatrix, vertex: int) -> np.ndarray:
    """Full basis by factorizing the vertex's complement block directly.

    One complement factorization per call; the reference against which the
    single-factorization path is checked.
    """
    n = hessian.shape[0]
    dofs = np.arange(3 * vertex, 3 * vertex + 3)
    comp = np.setdiff1d(np.arange(n), dofs)
    hcsr = hessian.tocsr()
    h_ic = hcsr[dofs][:, comp].toarray()
    h_cc = hcsr[comp][:, comp].tocsc()
    factor = spla.splu(h_cc)
    u_c = -factor.solve(h_ic.T)
    u = np.zeros((n, 3))
    u[dofs] = np.eye(3)
    u[comp] = u_c
    return u


def subproblem_groups(model: Model, mode: str):
    """Vertex groups defining sub-problems: singletons (jacobi) or color groups."""
    free = np.flatnonzero(model.free_mask)
    if mode == "jacobi":
        return [np.array([v]) for v in free]
    if mode == "gauss_seidel":
        groups = []
        for c in range(int(model.colors.max()) + 1 if model.colors.size else 0):
            g = np.flatnonzero((model.colors == c) & model.free_mask)
            if g.size:
                groups.append(g)
        return groups
    raise ValueError(f"unknown scheduling mode: {mode}")


def rest_factorization(hbar: sp.spmatrix):
    try:
        return spla.splu(hbar.tocsc())
    except RuntimeError as exc:
        raise PrecomputeError(f"rest Hessian factorization failed: {exc}") from exc


def precompute_bases(model: Model, h_ref: float, mode: str = "jacobi",
                     keep_full: bool = True, hbar=None, factor=None):
    """Bases for every free sub-problem from one factorization of the rest Hessian.

    For a group of k vertices the constrained equilibria are solved in full
    coordinates: Y = Hbar^-1 S^T (3k substitutions), Gbar = -(S Y)^-1, and
    U = -Y Gbar. Group rows at the group's own vertices form the identity.
    Returns ({vertex: PerturbationBasis}, info dict with factorization count).
    A prebuilt (hbar, factor) pair is reused when supplied.
    """
    factorizations = 0
    if hbar is None:
        hbar = rest_hessian(model, h_ref)
    if factor is None:
        factor = rest_factorization(hbar)
        factorizations = 1
    info = {"factorizations": factorizations, "solves": 0, "mode": mode,
            "h_ref": float(h_ref)}

    masses = model.masses
    bases = {}
    for group in subproblem_groups(model, mode):
        dofs = (3 * group[:, None] + np.arange(3)).ravel()
        rhs = np.zeros((hbar.shape[0], dofs.size))
        rhs[dofs, np.arange(dofs.size)] = 1.0
        y = factor.solve(rhs)
        info["solves"] += dofs.size
        schur = y[dofs]  # S Hbar^-1 S^T
        try:
            gbar_g = -np.linalg.inv(schur)
        except np.linalg.LinAlgError as exc:
            raise PrecomputeError(
                f"singular Schur block for sub-problem at vertices {group.tolist()}: {exc}"
            ) from exc
        u_g = -y @ gbar_g
        for j, v in enumerate(group):
            cols = slice(3 * j, 3 * j + 3)
            u_v = np.ascontiguousarray(u_g[:, cols])
            blocks = u_v.reshape(-1, 3, 3)
            m = masses.copy()
            m[v] = 0.0
            red = np.einsum("wia,w,wib->ab", blocks, m, blocks)
            bases[int(v)] = PerturbationBasis(
                vertex=int(v),
                gbar=np.ascontiguousarray(gbar_g[cols, cols]),
                vrows={},
                reduced_mass=red,
                group=group.copy(),
                gbar_rows=np.ascontiguousarray(gbar_g[cols, :]),
                full=u_v if keep_full else None,
            )
    return bases, info


def retain_rows(bases: dict, model: Model, cubature_elements: dict,
                drop_full: bool = True) -> None:
    """Truncate each basis to the rows consumed at runtime.

    Retained vertices: the sub-problem vertex, vertices of its incident
    elements, and vertices of its cubature elements.
    """
    for v, basis in bases.items():
        keep = {v}
        for eid in model.incident[v]:
            keep.update(int(w) for w in model.tets[eid])
        for eid in cubature_elements.get(v, ()):
            keep.update(int(w) for w in model.tets[eid])
        basis.vrows = {w: np.ascontiguousarray(basis.full[3 * w:3 * w + 3])
                       for w in sorted(keep)}
        if drop_full:
            basis.full = None


def vertex_rotations(model: Model, x: np.ndarray) -> np.ndarray:
    """Per-vertex rotations: polar factor of the volume-weighted average of
    incident deformation gradients. Near-singular averages fall back to identity."""
    nv = model.num_vertices
    rot = np.tile(np.eye(3), (nv, 1, 1))
    if model.num_elements == 0:
        return rot
    f = energy.deformation_gradient(x[model.tets], model.dm_inv)
    fw = f * model.volumes[:, None, None]
    acc = np.zeros((nv, 3, 3))
    np.add.at(acc, model.tets.ravel(), np.repeat(fw, 4, axis=0))
    norms = np.linalg.norm(acc, axis=(1, 2))
    ok = norms > 1e-12
    if not np.any(ok):
        return rot
    try:
        u, s, vt = np.linalg.svd(acc[ok])
    except np.linalg.LinAlgError:
        return rot
    det = np.linalg.det(u @ vt)
    u[:, :, 2] *= np.sign(det)[:, None]
    r = u @ vt
    degenerate = s[:, 0] <= 1e-12 * np.maximum(norms[ok], 1.0)
    r[degenerate] = np.eye(3)
    rot[ok] = r
    return rot


def corotate_rows(basis: PerturbationBasis, rotations: np.ndarray) -> dict:
    """Conjugated rows R_w @ row_w @ R_i^T for every retained vertex."""
    r_i = rotations[basis.vertex]
    return {w: rotations[w] @ row @ r_i.T for w, row in basis.vrows.items()}


def rest_eigenmodes(hessian: sp.spmatrix, k: int, masses: np.ndarray,
                    free_mask: np.ndarray):
    """Lowest-k eigenpairs of the rest Hessian restricted to free DOFs.

    Eigenvectors are zero-padded at Dirichlet DOFs and scaled to unit mass
    norm. Returns (eigenvalues (k,), modes (N, k)).
    """
    free = np.flatnonzero(np.repeat(free_mask, 3))
    hff = hessian.tocsr()[free][:, free].tocsc()
    k = min(k, hff.shape[0] - 2)
    # Deterministic Arnoldi start vector so reruns are bit-identical.
    v0 = np.random.default_rng(0).standard_normal(hff.shape[0])
    try:
        vals, vecs = spla.eigsh(hff, k=k, sigma=0, which="LM", v0=v0)
    except spla.ArpackNoConvergence as exc:
        raise PrecomputeError(f"eigensolver did not converge: {exc}") from exc
    order = np.argsort(vals)
    vals = vals[order]
    vecs = vecs[:, order]
    n = hessian.shape[0]
    modes = np.zeros((n, k))
    modes[free] = vecs
    mdiag = np.repeat(masses, 3)
    for j in range(k):
        mn = np.sqrt(modes[:, j] @ (mdiag * modes[:, j]))
        if mn > 0:
            modes[:, j] /= mn
    return vals, modes


def cache_key(model: Model, h_ref: float, mode: str) -> str:
    """Content hash over geometry, materials, constraints, scheduling, and the
    h_ref bucket (power of two, so steps within 2x reuse the cache)."""
    digest = hashlib.sha256()
    for arr in (model.rest_positions, model.tets, model.mu, model.lam,
                model.masses, model.fixed_mask):
        digest.update(np.ascontiguousarray(arr).tobytes())
    bucket = int(np.round(np.log2(h_ref)))
    digest.update(f"{mode}|{bucket}".encode())
    return digest.hexdigest()[:16]


def save_bases(path, bases: dict, info: dict) -> None:
    payload = {"vertices": np.array(sorted(bases), dtype=np.int64),
               "h_ref": np.array([info.get("h_ref", 0.0)]),
               "mode": np.array([info.get("mode", "jacobi")])}
    for v in sorted(bases):
        b = bases[v]
        keys = np.array(sorted(b.vrows), dtype=np.int64)
        payload[f"gbar_{v}"] = b.gbar
        payload[f"rmass_{v}"] = b.reduced_mass
        payload[f"group_{v}"] = b.group
        payload[f"grows_{v}"] = b.gbar_rows
        payload[f"rkeys_{v}"] = keys
        payload[f"rows_{v}"] = np.stack([b.vrows[int(w)] for w in keys]) \
            if keys.size else np.zeros((0, 3, 3))
    np.savez_compressed(path, **payload)


def load_bases(path) -> tuple:
    data = np.load(path, allow_pickle=False)
    bases = {}
    for v in data["vertices"]:
        v = int(v)
        keys = data[f"rkeys_{v}"]
        rows = data[f"rows_{v}"]
        bases[v] = PerturbationBasis(
            vertex=v, gbar=data[f"gbar_{v}"],
            vrows={int(w): rows[i] for i, w in enumerate(keys)},
            reduced_mass=data[f"rmass_{v}"],
            group=data[f"group_{v}"], gbar_rows=data[f"grows_{v}"])
    info = {"h_ref": float(data["h_ref"][0]), "mode": str(data["mode"][0])}
    return bases, info
