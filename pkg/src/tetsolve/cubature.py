"""Cubature sampling of the complement energy.

Each sub-problem approximates its reduced gradient/Hessian by a handful of
remote sample elements with nonnegative weights. Element stencils fold in a
quarter of each corner vertex's inertia (the share that element contributes
to the lumped mass), so the sampled terms cover inertia as well as
elasticity. Weights are retrained per sub-problem by greedy selection plus a
nonnegative least-squares refit on pose-normalized reduced gradients.
"""

import logging
from dataclasses import dataclass, field

import numpy as np

from . import energy
from .assembly import Model

logger = logging.getLogger(__name__)


@dataclass
class CubatureSet:
    elements: np.ndarray  # element ids, disjoint from the sub-problem's incident set
    weights: np.ndarray  # nonnegative
    residual: float = np.inf  # relative training residual
    converged: bool = False


@dataclass
class TrainingSet:
    poses: np.ndarray  # (T, nv, 3) displacement fields
    stencil_gradients: np.ndarray  # (T, ne, 12) per-pose element gradients
    h_ref: float


def stencil_gradients(model: Model, x, z, h, with_hessian=False,
                      elements=None, project_spd=True):
    """Element stencil gradient (and optionally Hessian): elastic plus the
    element's quarter-mass share of its corners' inertia."""
    if elements is None:
        elements = slice(None)
        tets = model.tets
        qm = model.elem_qmass
        dm_inv, vol, mu, lam = model.dm_inv, model.volumes, model.mu, model.lam
    else:
        tets = model.tets[elements]
        qm = model.elem_qmass[elements]
        dm_inv, vol = model.dm_inv[elements], model.volumes[elements]
        mu, lam = model.mu[elements], model.lam[elements]
    _, g, hmat = energy.snh_batch(x[tets], dm_inv, vol, mu, lam,
                                  project_spd=project_spd,
                                  with_hessian=with_hessian)
    diff = (x - z) / h ** 2
    g = g + (qm[:, None] * diff[tets].reshape(-1, 12))
    if with_hessian:
        idx = np.arange(12)
        hmat[:, idx, idx] += (qm / h ** 2)[:, None]
        return g, hmat
    return g


def build_training_set(model: Model, modes: np.ndarray, h_ref: float,
                       amplitude_fraction: float = 0.02) -> TrainingSet:
    """Training poses from rest eigenmodes, scaled so the largest vertex
    displacement is ``amplitude_fraction`` of the rest bounding-box diagonal."""
    rest = model.rest_positions
    diag = float(np.linalg.norm(rest.max(axis=0) - rest.min(axis=0)))
    poses = []
    grads = []
    for j in range(modes.shape[1]):
        disp = modes[:, j].reshape(-1, 3)
        peak = np.linalg.norm(disp, axis=1).max()
        if peak <= 0:
            continue
        disp = disp * (amplitude_fraction * diag / peak)
        poses.append(disp)
        grads.append(stencil_gradients(model, rest + disp, rest, h_ref))
    return TrainingSet(poses=np.array(poses), stencil_gradients=np.array(grads),
                       h_ref=float(h_ref))


def assembled_gradient(model: Model, x, z, h, stencil_grads=None) -> np.ndarray:
    """Per-vertex assembled gradient (nv, 3) of inertia plus elasticity."""
    if stencil_grads is None:
        stencil_grads = stencil_gradients(model, x, z, h)
    out = np.zeros((model.num_vertices, 3))
    np.add.at(out, model.tets.ravel(),
              stencil_grads.reshape(-1, 4, 3).reshape(-1, 3))
    return out


def exact_reduced_gradient(model: Model, basis_full: np.ndarray, vertex: int,
                           x, z, h) -> np.ndarray:
    """Reduced complement gradient with the full basis (precompute phase only).

    The complement gradient is assembled from element stencils with the
    vertex's incident elements excluded, then projected through the basis.
    This is the target the sampled element sum is trained against.
    """
    g_all = stencil_gradients(model, x, z, h)
    scattered = np.zeros((model.num_vertices, 3))
    np.add.at(scattered, model.tets.ravel(),
              g_all.reshape(-1, 4, 3).reshape(-1, 3))
    inc = model.incident[vertex]
    if len(inc):
        np.add.at(scattered, model.tets[inc].ravel(),
                  -g_all[inc].reshape(-1, 4, 3).reshape(-1, 3))
    blocks = basis_full.reshape(-1, 3, 3)
    return np.einsum("wab,wa->b", blocks, scattered)


def nnls(a: np.ndarray, b: np.ndarray, maxiter: int | None = None) -> np.ndarray:
    """Nonnegative least squares by the Lawson-Hanson active-set method.

    Returns w >= 0 minimizing |a w - b|; raises RuntimeError if the
    iteration cap is exceeded.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    m, n = a.shape
    if n < 1:
        raise ValueError("nnls needs at least one column")
    if maxiter is None:
        maxiter = max(10 * n, 50)
    tol = 1e-10 * max(np.abs(a.T @ b).max(initial=0.0), 1.0)

    w = np.zeros(n)
    passive = np.zeros(n, dtype=bool)
    # Columns whose entry immediately zeroed out are barred from re-entering;
    # they are (numerically) dependent on the passive set.
    barred = np.zeros(n, dtype=bool)
    resid = b.copy()
    dual = a.T @ resid
    iters = 0
    while not (passive | barred).all() \
            and np.any(dual[~passive & ~barred] > tol):
        j = int(np.argmax(np.where(passive | barred, -np.inf, dual)))
        passive[j] = True
        while True:
            iters += 1
            if iters > maxiter:
                raise RuntimeError(f"nnls exceeded the iteration cap ({maxiter})")
            s = np.zeros(n)
            cols = np.flatnonzero(passive)
            s[cols] = np.linalg.lstsq(a[:, cols], b, rcond=None)[0]
            if s[cols].min(initial=np.inf) > 0.0:
                w = s
                break
            if s[j] <= 0.0 and w[j] == 0.0:
                passive[j] = False
                barred[j] = True
                s = np.zeros(n)
                cols = np.flatnonzero(passive)
                if cols.size:
                    s[cols] = np.linalg.lstsq(a[:, cols], b, rcond=None)[0]
                w = np.where(passive, s, 0.0)
                break
            neg = passive & (s <= 0.0)
            ratio = w[neg] / (w[neg] - s[neg])
            alpha = ratio.min()
            w = w + alpha * (s - w)
            passive &= w > tol
            w[~passive] = 0.0
        resid = b - a @ w
        dual = a.T @ resid
    return w


def _labels(model, basis_full, vertex, training: TrainingSet):
    """Per-pose reduced complement gradients for one sub-problem."""
    blocks = basis_full.reshape(-1, 3, 3)
    inc = model.incident[vertex]
    out = np.zeros((len(training.poses), 3))
    for t, g_all in enumerate(training.stencil_gradients):
        scattered = np.zeros((model.num_vertices, 3))
        np.add.at(scattered, model.tets.ravel(),
                  g_all.reshape(-1, 4, 3).reshape(-1, 3))
        if len(inc):
            np.add.at(scattered, model.tets[inc].ravel(),
                      -g_all[inc].reshape(-1, 4, 3).reshape(-1, 3))
        out[t] = np.einsum("wab,wa->b", blocks, scattered)
    return out


def _candidate_column(basis_full, model, training, eid):
    """Stacked (3T,) reduced gradient of a single element over all poses."""
    rows = basis_full.reshape(-1, 3, 3)[model.tets[eid]].reshape(12, 3)
    return (training.stencil_gradients[:, eid, :] @ rows).ravel()


def train_cubature(model: Model, basis_full: np.ndarray, vertex: int,
                   training: TrainingSet, target_residual: float = 0.01,
                   candidates_per_round: int = 32, max_size: int = 6,
                   rng=None) -> CubatureSet:
    """Greedy Cubature selection with NNLS weight refits for one sub-problem.

    Each round scores a random batch of unselected non-incident elements by
    the correlation of their pose-stacked reduced-gradient column with the
    current residual, adds the best one, and refits all weights. Stops at the
    residual target or ``max_size``; an unreached target keeps the best set
    with ``converged`` False.
    """
    if rng is None:
        rng = np.random.default_rng()
    labels = _labels(model, basis_full, vertex, training)
    norms = np.linalg.norm(labels, axis=1)
    # Near-zero labels (e.g. near-rigid poses on a free body) carry no
    # constraint and would blow up the per-pose normalization.
    usable = norms > 1e-8 * norms.max(initial=0.0)
    if not np.any(usable):
        return CubatureSet(elements=np.zeros(0, dtype=np.int64),
                           weights=np.zeros(0), residual=0.0, converged=True)
    scale = np.where(usable, norms, 1.0)
    b = (labels / scale[:, None])[usable].ravel()
    b_norm = np.linalg.norm(b)

    pool = np.setdiff1d(np.arange(model.num_elements), model.incident[vertex])
    selected = []
    columns = []
    weights = np.zeros(0)
    resid = b.copy()
    rel = 1.0
    tried = set()

    def col_for(eid):
        full = _candidate_column(basis_full, model, training, eid)
        return (full.reshape(-1, 3) / scale[:, None])[usable].ravel()

    for _ in range(6 * max_size):
        if rel <= target_residual:
            break
        if len(selected) >= max_size:
            # Zero-weight samples contribute nothing; free their slots.
            keep = weights > 0.0
            if keep.all():
                break
            selected = [e for e, k in zip(selected, keep) if k]
            columns = [c for c, k in zip(columns, keep) if k]
        remaining = np.setdiff1d(pool, np.array(sorted(tried | set(selected)),
                                                dtype=np.int64))
        if remaining.size == 0:
            break
        k = min(candidates_per_round, remaining.size)
        cands = rng.choice(remaining, size=k, replace=False)
        best = None
        best_score = -np.inf
        best_col = None
        for eid in cands:
            col = col_for(int(eid))
            cn = np.linalg.norm(col)
            if cn <= 0:
                continue
            score = float(col @ resid) / cn
            if score > best_score:
                best, best_score, best_col = int(eid), score, col
        if best is None:
            break
        selected.append(best)
        tried.add(best)
        columns.append(best_col)
        a = np.column_stack(columns)
        weights = nnls(a, b)
        resid = b - a @ weights
        rel = float(np.linalg.norm(resid) / b_norm)

    if len(selected) and np.any(weights <= 0.0):
        keep = weights > 0.0
        selected = [e for e, k in zip(selected, keep) if k]
        weights = weights[keep]
    converged = rel <= target_residual
    if not converged:
        logger.warning("cubature at vertex %d stopped at residual %.3g with %d samples",
                       vertex, rel, len(selected))
    return CubatureSet(elements=np.asarray(selected, dtype=np.int64),
                       weights=weights, residual=rel, converged=converged)


def train_all(model: Model, bases: dict, training: TrainingSet,
              target_residual: float = 0.01, candidates_per_round: int = 32,
              max_size: int = 6, seed: int = 0) -> dict:
    """Cubature sets for every sub-problem; per-vertex seeded, so the result
    does not depend on training order."""
    sets = {}
    for v in sorted(bases):
        rng = np.random.default_rng([seed, v])
        sets[v] = train_cubature(model, bases[v].full, v, training,
                                 target_residual=target_residual,
                                 candidates_per_round=candidates_per_round,
                                 max_size=max_size, rng=rng)
    return sets


def eval_sampled_reduced(model: Model, basis, cubature: CubatureSet,
                         rotations: np.ndarray, x, z, h):
    """Sampled reduced Hessian and gradient (3x3, 3) for one sub-problem.

    The Hessian sums SPD-projected elastic element blocks through the
    co-rotated rows plus the exact precomputed complement inertia
    (reduced_mass, rotation-conjugated); the gradient sums element stencils
    with their quarter-mass inertia shares, so the samples cover inertia
    forces. Empty sample set: the inertia term alone with zero gradient.
    """
    r_i = rotations[basis.vertex]
    htil = r_i @ basis.reduced_mass @ r_i.T / h ** 2
    gtil = np.zeros(3)
    if len(cubature.elements) == 0:
        return htil, gtil
    g_e = stencil_gradients(model, x, z, h, elements=cubature.elements)
    _, _, h_el = energy.snh_batch(
        x[model.tets[cubature.elements]], model.dm_inv[cubature.elements],
        model.volumes[cubature.elements], model.mu[cubature.elements],
        model.lam[cubature.elements], project_spd=True)
    for k, eid in enumerate(cubature.elements):
        verts = model.tets[eid]
        missing = [int(w) for w in verts if w not in basis.vrows]
        if missing:
            raise KeyError(f"basis at vertex {basis.vertex} lacks rows for vertices "
                           f"{missing} of cubature element {int(eid)}")
        rows = np.vstack([rotations[w] @ basis.vrows[int(w)] @ r_i.T for w in verts])
        w_e = cubature.weights[k]
        htil += w_e * rows.T @ h_el[k] @ rows
        gtil += w_e * rows.T @ g_e[k]
    return htil, gtil


def save_cubature(path, sets: dict) -> None:
    payload = {"vertices": np.array(sorted(sets), dtype=np.int64)}
    for v in sorted(sets):
        s = sets[v]
        payload[f"elems_{v}"] = s.elements
        payload[f"weights_{v}"] = s.weights
        payload[f"meta_{v}"] = np.array([s.residual, float(s.converged)])
    np.savez_compressed(path, **payload)


def load_cubature(path) -> dict:
    data = np.load(path, allow_pickle=False)
    sets = {}
    for v in data["vertices"]:
        v = int(v)
        meta = data[f"meta_{v}"]
        sets[v] = CubatureSet(elements=data[f"elems_{v}"],
                              weights=data[f"weights_{v}"],
                              residual=float(meta[0]), converged=bool(meta[1]))
    return sets
