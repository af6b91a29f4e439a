"""Proximity queries and distance derivatives for barrier-based contact.

Supported primitives: vertex against analytic half-space planes, and vertex
against surface triangles of a different body. Distances are unsquared; each
active pair carries analytic first and second derivatives of d with respect
to its stencil positions (vertex first, then the triangle's three vertices).
Closest-feature regions (vertex / edge / interior) are classified first and
the matching smooth branch is differentiated.
"""

from dataclasses import dataclass

import numpy as np

from .energy import BarrierParams, barrier_energy_grad_hess, project_psd


@dataclass
class HalfSpace:
    point: np.ndarray  # (3,)
    normal: np.ndarray  # (3,), unit

    def __post_init__(self):
        self.point = np.asarray(self.point, dtype=np.float64)
        n = np.asarray(self.normal, dtype=np.float64)
        self.normal = n / np.linalg.norm(n)


@dataclass
class ContactPair:
    kind: str  # "plane" | "triangle"
    vertex: int  # global vertex id
    tri: np.ndarray | None = None  # (3,) global vertex ids
    plane: int = -1
    d: float = 0.0
    bary: np.ndarray | None = None  # barycentric coords of the closest point

    @property
    def stencil(self) -> np.ndarray:
        if self.kind == "plane":
            return np.array([self.vertex])
        return np.concatenate(([self.vertex], self.tri))


def _skew(v):
    return np.array([[0.0, -v[2], v[1]],
                     [v[2], 0.0, -v[0]],
                     [-v[1], v[0], 0.0]])


def _point_point(x, y):
    """d, grad, hess of |x - y| w.r.t. (x, y) stacked as 6 DOFs."""
    r = x - y
    d = np.linalg.norm(r)
    u = r / d
    g = np.concatenate((u, -u))
    k = (np.eye(3) - np.outer(u, u)) / d
    h = np.block([[k, -k], [-k, k]])
    return d, g, h


def _point_edge(x, a, b):
    """d, grad, hess of point-to-line distance |w x e|/|e| w.r.t. (x, a, b)."""
    w = x - a
    e = b - a
    m = np.cross(w, e)
    r = np.linalg.norm(m)
    el = np.linalg.norm(e)
    d = r / el
    mh = m / r

    jw = np.zeros((3, 9))
    jw[:, 0:3] = np.eye(3)
    jw[:, 3:6] = -np.eye(3)
    je = np.zeros((3, 9))
    je[:, 3:6] = -np.eye(3)
    je[:, 6:9] = np.eye(3)
    jm = -_skew(e) @ jw + _skew(w) @ je

    gm = mh / el
    ge = -(r / el ** 3) * e
    grad = jm.T @ gm + je.T @ ge

    bmm = (np.eye(3) - np.outer(mh, mh)) / (r * el)
    bme = -np.outer(mh, e) / el ** 3
    bee = r * (3.0 * np.outer(e, e) / el ** 5 - np.eye(3) / el ** 3)
    hess = (jm.T @ bmm @ jm + jm.T @ bme @ je + je.T @ bme.T @ jm
            + je.T @ bee @ je)
    # Curvature of the bilinear map m = w x e.
    gx = _skew(gm)
    hess += jw.T @ (-gx) @ je + je.T @ gx @ jw
    return d, grad, hess


def _point_face(x, a, b, c):
    """d, grad, hess of point-to-plane-of-triangle distance w.r.t. (x, a, b, c)."""
    w = x - a
    u = b - a
    v = c - a
    n = np.cross(u, v)
    ln = np.linalg.norm(n)
    nh = n / ln
    s = w @ nh

    jw = np.zeros((3, 12))
    jw[:, 0:3] = np.eye(3)
    jw[:, 3:6] = -np.eye(3)
    ju = np.zeros((3, 12))
    ju[:, 3:6] = -np.eye(3)
    ju[:, 6:9] = np.eye(3)
    jv = np.zeros((3, 12))
    jv[:, 3:6] = -np.eye(3)
    jv[:, 9:12] = np.eye(3)
    jn = -_skew(v) @ ju + _skew(u) @ jv

    gn = (w - s * nh) / ln
    grad_s = jw.T @ nh + jn.T @ gn

    pn = (np.eye(3) - np.outer(nh, nh)) / ln
    bnn = (-np.outer(w, nh) - np.outer(nh, w) - s * np.eye(3)
           + 3.0 * s * np.outer(nh, nh)) / ln ** 2
    hess_s = jw.T @ pn @ jn + jn.T @ pn @ jw + jn.T @ bnn @ jn
    gx = _skew(gn)
    hess_s += ju.T @ (-gx) @ jv + jv.T @ gx @ ju

    sign = 1.0 if s >= 0.0 else -1.0
    return abs(s), sign * grad_s, sign * hess_s


def _embed(grad_sub, hess_sub, slots):
    """Place sub-stencil derivatives into the 12-DOF (x, a, b, c) frame."""
    grad = np.zeros(12)
    hess = np.zeros((12, 12))
    for bi, si in enumerate(slots):
        grad[3 * si:3 * si + 3] = grad_sub[3 * bi:3 * bi + 3]
        for bj, sj in enumerate(slots):
            hess[3 * si:3 * si + 3, 3 * sj:3 * sj + 3] = \
                hess_sub[3 * bi:3 * bi + 3, 3 * bj:3 * bj + 3]
    return grad, hess


def triangle_distance_derivatives(x, a, b, c, bary):
    """Distance of x to triangle (a, b, c) with 12-DOF grad/hess.

    ``bary`` identifies the closest-feature region: entries exactly zero mean
    the feature excludes that triangle vertex.
    """
    zero = bary == 0.0
    nz = np.flatnonzero(~zero)
    corners = (a, b, c)
    if len(nz) == 1:
        d, g, h = _point_point(x, corners[nz[0]])
        grad, hess = _embed(g, h, (0, 1 + nz[0]))
    elif len(nz) == 2:
        d, g, h = _point_edge(x, corners[nz[0]], corners[nz[1]])
        grad, hess = _embed(g, h, (0, 1 + nz[0], 1 + nz[1]))
    else:
        d, grad, hess = _point_face(x, a, b, c)
    return d, grad, hess


def closest_point_triangles(p: np.ndarray, tri: np.ndarray):
    """Closest points of query points to triangles, all pairs.

    p (n, 3), tri (m, 3, 3). Returns distances (n, m) and barycentric
    coordinates (n, m, 3) with exact zeros on clamped regions.
    """
    a, b, c = tri[:, 0], tri[:, 1], tri[:, 2]
    ab = b - a
    ac = c - a
    ap = p[:, None, :] - a[None, :, :]
    d1 = np.einsum("mk,nmk->nm", ab, ap)
    d2 = np.einsum("mk,nmk->nm", ac, ap)
    bp = p[:, None, :] - b[None, :, :]
    d3 = np.einsum("mk,nmk->nm", ab, bp)
    d4 = np.einsum("mk,nmk->nm", ac, bp)
    cp = p[:, None, :] - c[None, :, :]
    d5 = np.einsum("mk,nmk->nm", ab, cp)
    d6 = np.einsum("mk,nmk->nm", ac, cp)

    vc = d1 * d4 - d3 * d2
    vb = d5 * d2 - d1 * d6
    va = d3 * d6 - d5 * d4

    n, m = d1.shape
    bary = np.zeros((n, m, 3))
    done = np.zeros((n, m), dtype=bool)

    def assign(mask, b0, b1, b2):
        mask = mask & ~done
        bary[mask, 0] = np.broadcast_to(b0, d1.shape)[mask]
        bary[mask, 1] = np.broadcast_to(b1, d1.shape)[mask]
        bary[mask, 2] = np.broadcast_to(b2, d1.shape)[mask]
        done[...] |= mask

    with np.errstate(divide="ignore", invalid="ignore"):
        assign((d1 <= 0) & (d2 <= 0), 1.0, 0.0, 0.0)
        assign((d3 >= 0) & (d4 <= d3), 0.0, 1.0, 0.0)
        assign((d6 >= 0) & (d5 <= d6), 0.0, 0.0, 1.0)
        v = d1 / (d1 - d3)
        assign((vc <= 0) & (d1 >= 0) & (d3 <= 0), 1.0 - v, v, 0.0)
        w = d2 / (d2 - d6)
        assign((vb <= 0) & (d2 >= 0) & (d6 <= 0), 1.0 - w, 0.0, w)
        w = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        assign((va <= 0) & (d4 - d3 >= 0) & (d5 - d6 >= 0), 0.0, 1.0 - w, w)
        denom = va + vb + vc
        assign(np.ones_like(done), va / denom, vb / denom, vc / denom)

    closest = np.einsum("nm,mk->nmk", bary[..., 0], a) \
        + np.einsum("nm,mk->nmk", bary[..., 1], b) \
        + np.einsum("nm,mk->nmk", bary[..., 2], c)
    dist = np.linalg.norm(p[:, None, :] - closest, axis=2)
    return dist, bary


def point_distances(positions, surface_vertices, vertex_object, surface_tris,
                    tri_object, planes, dhat: float):
    """Brute-force active pairs: every distance below ``dhat``.

    Vertex-plane pairs over all surface vertices; vertex-triangle pairs over
    surface primitives of distinct objects only.
    """
    pairs = []
    for pi, plane in enumerate(planes):
        d = (positions[surface_vertices] - plane.point) @ plane.normal
        for k in np.flatnonzero(d < dhat):
            pairs.append(ContactPair(kind="plane", vertex=int(surface_vertices[k]),
                                     plane=pi, d=float(d[k])))
    if surface_tris is not None and len(surface_tris) and len(surface_vertices):
        p = positions[surface_vertices]
        tri = positions[surface_tris]
        dist, bary = closest_point_triangles(p, tri)
        cross = vertex_object[surface_vertices][:, None] != tri_object[None, :]
        hit = (dist < dhat) & cross
        for vi, ti in zip(*np.nonzero(hit)):
            pairs.append(ContactPair(
                kind="triangle", vertex=int(surface_vertices[vi]),
                tri=np.asarray(surface_tris[ti]), d=float(dist[vi, ti]),
                bary=bary[vi, ti].copy()))
    return pairs


def pair_distance_derivatives(positions, pair: ContactPair, planes):
    """(d, grad, hess) of the pair's distance w.r.t. its stencil DOFs."""
    if pair.kind == "plane":
        plane = planes[pair.plane]
        d = float((positions[pair.vertex] - plane.point) @ plane.normal)
        return d, plane.normal.copy(), np.zeros((3, 3))
    x = positions[pair.vertex]
    a, b, c = positions[pair.tri]
    return triangle_distance_derivatives(x, a, b, c, pair.bary)


def pair_energy_grad_hess(positions, pair: ContactPair, planes,
                          barrier: BarrierParams, project_spd: bool = False):
    """Barrier energy of one pair with stencil gradient and Hessian."""
    d, gd, hd = pair_distance_derivatives(positions, pair, planes)
    bval, db, ddb = barrier_energy_grad_hess(d, barrier)
    grad = db * gd
    hess = ddb * np.outer(gd, gd) + db * hd
    if project_spd:
        hess = project_psd(hess)
    return bval, grad, hess


def pair_energy(positions, pair: ContactPair, planes, barrier: BarrierParams):
    if pair.kind == "plane":
        plane = planes[pair.plane]
        d = float((positions[pair.vertex] - plane.point) @ plane.normal)
    else:
        x = positions[pair.vertex]
        tri = positions[pair.tri]
        dist, _ = closest_point_triangles(x[None], tri[None])
        d = float(dist[0, 0])
    return barrier_energy_grad_hess(d, barrier)[0]


def pair_current_distance(positions, pair: ContactPair, planes) -> float:
    if pair.kind == "plane":
        plane = planes[pair.plane]
        return float((positions[pair.vertex] - plane.point) @ plane.normal)
    dist, _ = closest_point_triangles(positions[pair.vertex][None],
                                      positions[pair.tri][None])
    return float(dist[0, 0])
