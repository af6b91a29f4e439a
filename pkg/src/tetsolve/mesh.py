"""Tetrahedral mesh container: TetGen-style IO, topology, lumped masses, coloring.

A ``TetMesh`` is immutable after construction and safe to share across
parallel workers. All geometry is double precision; volumes come from the
signed determinant of the rest shape matrix, so consistently oriented input
is required (``load_mesh`` repairs inverted rest tets by swapping two
indices).
"""

import logging
from dataclasses import dataclass, field

import numpy as np

logger = logging.getLogger(__name__)

# Elements whose rest volume falls below this fraction of the mesh mean are
# rejected as degenerate.
DEGENERATE_VOLUME_RATIO = 1e-12

# Faces of tet (v0,v1,v2,v3), ordered outward for positive orientation.
_TET_FACES = ((1, 2, 3), (0, 3, 2), (0, 1, 3), (0, 2, 1))


class MeshError(Exception):
    """Invalid mesh file contents, topology, or geometry."""


@dataclass(frozen=True)
class SceneNormalization:
    """Similarity transform mapping the scene's rest bounding box into the unit cube."""

    scale: float
    offset: np.ndarray  # 3-vector

    def apply(self, x: np.ndarray) -> np.ndarray:
        return self.scale * x + self.offset


@dataclass
class TetMesh:
    rest_positions: np.ndarray  # (nv, 3)
    tets: np.ndarray  # (ne, 4) int
    surface_tris: np.ndarray  # (ns, 3) int, outward oriented
    rest_volumes: np.ndarray  # (ne,)
    dm_inv: np.ndarray  # (ne, 3, 3) inverse rest shape matrices
    vertex_masses: np.ndarray  # (nv,)
    incident: list  # per-vertex array of incident element ids
    colors: np.ndarray  # (nv,) int
    density: float

    @property
    def num_vertices(self) -> int:
        return self.rest_positions.shape[0]

    @property
    def num_elements(self) -> int:
        return self.tets.shape[0]

    @property
    def num_colors(self) -> int:
        return int(self.colors.max()) + 1 if self.colors.size else 0


def shape_matrix(positions: np.ndarray) -> np.ndarray:
    """3x3 matrix with columns x1-x0, x2-x0, x3-x0 for one tet's (4,3) positions."""
    return np.column_stack((positions[1] - positions[0],
                            positions[2] - positions[0],
                            positions[3] - positions[0]))


def build_mesh(rest_positions, tets, density: float = 1000.0,
               repair_inverted: bool = True) -> TetMesh:
    """Construct a TetMesh from raw arrays, computing volumes, masses, topology.

    Inverted rest elements (negative signed volume) are repaired by swapping
    their last two indices when ``repair_inverted`` is set, otherwise
    rejected. Degenerate elements are always rejected.
    """
    rest_positions = np.ascontiguousarray(rest_positions, dtype=np.float64)
    tets = np.ascontiguousarray(tets, dtype=np.int64).reshape(-1, 4)
    nv = rest_positions.shape[0]
    ne = tets.shape[0]
    if ne and (tets.min() < 0 or tets.max() >= nv):
        bad = int(np.argmax((tets < 0) | (tets >= nv)).item() // 4)
        raise MeshError(f"element {bad} references a vertex outside [0, {nv})")

    dm = _shape_matrices(rest_positions, tets)
    vol = np.linalg.det(dm) / 6.0
    inverted = np.flatnonzero(vol < 0)
    if inverted.size:
        if not repair_inverted:
            raise MeshError(f"{inverted.size} inverted rest elements, first id {inverted[0]}")
        logger.info("repairing %d inverted rest tets by index swap", inverted.size)
        tets = tets.copy()
        tets[inverted, 2], tets[inverted, 3] = tets[inverted, 3].copy(), tets[inverted, 2].copy()
        dm = _shape_matrices(rest_positions, tets)
        vol = np.linalg.det(dm) / 6.0

    if ne:
        mean_vol = float(np.mean(np.abs(vol)))
        degenerate = np.flatnonzero(np.abs(vol) < DEGENERATE_VOLUME_RATIO * mean_vol)
        if degenerate.size:
            raise MeshError(f"degenerate elements (near-zero volume): {degenerate.tolist()}")
        dm_inv = np.linalg.inv(dm)
    else:
        dm_inv = np.zeros((0, 3, 3))

    masses = np.zeros(nv)
    if ne:
        # Quarter-volume lumping: each tet donates rho*V/4 to its vertices.
        np.add.at(masses, tets.ravel(), np.repeat(density * vol / 4.0, 4))

    incident = [np.empty(0, dtype=np.int64) for _ in range(nv)]
    if ne:
        order = np.argsort(tets.ravel(), kind="stable")
        flat_v = tets.ravel()[order]
        flat_e = np.repeat(np.arange(ne), 4)[order]
        bounds = np.searchsorted(flat_v, np.arange(nv + 1))
        incident = [flat_e[bounds[j]:bounds[j + 1]] for j in range(nv)]

    mesh = TetMesh(
        rest_positions=rest_positions,
        tets=tets,
        surface_tris=extract_surface(tets),
        rest_volumes=vol,
        dm_inv=dm_inv,
        vertex_masses=masses,
        incident=incident,
        colors=greedy_color(tets, nv),
        density=float(density),
    )
    return mesh


def _shape_matrices(positions, tets):
    p = positions[tets]  # (ne, 4, 3)
    d = np.stack((p[:, 1] - p[:, 0], p[:, 2] - p[:, 0], p[:, 3] - p[:, 0]), axis=2)
    return d  # columns are edge vectors


def extract_surface(tets: np.ndarray) -> np.ndarray:
    """Boundary triangles: faces belonging to exactly one tet, outward oriented."""
    if tets.shape[0] == 0:
        return np.zeros((0, 3), dtype=np.int64)
    faces = tets[:, _TET_FACES].reshape(-1, 3)  # (4*ne, 3) oriented
    key = np.sort(faces, axis=1)
    _, inverse, counts = np.unique(key, axis=0, return_inverse=True, return_counts=True)
    keep = counts[inverse] == 1
    return faces[keep]


def vertex_adjacency(tets: np.ndarray, num_vertices: int) -> list:
    """Per-vertex sets of vertices sharing at least one tet."""
    adj = [set() for _ in range(num_vertices)]
    for tet in tets:
        for a in tet:
            adj[a].update(tet)
    for j, s in enumerate(adj):
        s.discard(j)
    return adj


def greedy_color(tets: np.ndarray, num_vertices: int) -> np.ndarray:
    """First-fit greedy vertex coloring in ascending vertex id.

    Two vertices sharing a tet never share a color; deterministic given the
    vertex order.
    """
    adj = vertex_adjacency(tets, num_vertices)
    colors = np.full(num_vertices, -1, dtype=np.int64)
    for j in range(num_vertices):
        used = {colors[n] for n in adj[j] if colors[n] >= 0}
        c = 0
        while c in used:
            c += 1
        colors[j] = c
    return colors


def color_groups(colors: np.ndarray) -> list:
    """Vertex id arrays per color, colors ascending."""
    if colors.size == 0:
        return []
    return [np.flatnonzero(colors == c) for c in range(int(colors.max()) + 1)]


def normalize_scene(meshes) -> SceneNormalization:
    """Uniform scale + offset mapping the joint rest bounding box into the unit cube."""
    points = [m.rest_positions for m in meshes if m.num_vertices]
    if not points:
        raise MeshError("normalize_scene needs at least one vertex")
    allp = np.vstack(points)
    lo = allp.min(axis=0)
    hi = allp.max(axis=0)
    extent = float((hi - lo).max())
    if extent <= 0.0:
        raise MeshError("scene bounding box has zero extent")
    scale = 1.0 / extent
    return SceneNormalization(scale=scale, offset=-scale * lo)


def _data_lines(path):
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if line:
                yield lineno, line


def _parse_row(path, lineno, line, count):
    parts = line.split()
    if len(parts) < count:
        raise MeshError(f"{path}:{lineno}: expected {count} fields, got {len(parts)}")
    try:
        return [float(p) for p in parts[:count]]
    except ValueError as exc:
        raise MeshError(f"{path}:{lineno}: {exc}") from None


def load_mesh(node_path, ele_path, density: float = 1000.0) -> TetMesh:
    """Load a TetGen-style plain-text .node/.ele pair.

    The node file starts with the vertex count, then ``id x y z`` rows; the
    ele file starts with the element count, then ``id v0 v1 v2 v3`` rows.
    0- or 1-based ids are auto-detected from the first row.
    """
    positions = _load_node(node_path)
    tets = _load_ele(ele_path, positions.shape[0])
    return build_mesh(positions, tets, density=density)


def _load_node(path):
    rows = _data_lines(path)
    try:
        lineno, header = next(rows)
    except StopIteration:
        raise MeshError(f"{path}: empty node file") from None
    count = int(_parse_row(path, lineno, header, 1)[0])
    data = np.zeros((count, 4))
    for k in range(count):
        try:
            lineno, line = next(rows)
        except StopIteration:
            raise MeshError(f"{path}: expected {count} vertex rows, found {k}") from None
        data[k] = _parse_row(path, lineno, line, 4)
    base = int(data[0, 0]) if count else 0
    if base not in (0, 1):
        raise MeshError(f"{path}: first vertex id {base} is neither 0- nor 1-based")
    ids = data[:, 0].astype(np.int64) - base
    if not np.array_equal(ids, np.arange(count)):
        raise MeshError(f"{path}: vertex ids are not consecutive")
    return data[:, 1:4]


def _load_ele(path, num_vertices):
    rows = _data_lines(path)
    try:
        lineno, header = next(rows)
    except StopIteration:
        raise MeshError(f"{path}: empty ele file") from None
    count = int(_parse_row(path, lineno, header, 1)[0])
    data = np.zeros((count, 5), dtype=np.int64)
    for k in range(count):
        try:
            lineno, line = next(rows)
        except StopIteration:
            raise MeshError(f"{path}: expected {count} element rows, found {k}") from None
        vals = _parse_row(path, lineno, line, 5)
        ivals = [int(v) for v in vals]
        if any(v != f for v, f in zip(ivals, vals)):
            raise MeshError(f"{path}:{lineno}: non-integer element entry")
        data[k] = ivals
    base = int(data[0, 0]) if count else 0
    if base not in (0, 1):
        raise MeshError(f"{path}: first element id {base} is neither 0- nor 1-based")
    tets = data[:, 1:5] - base
    if count and (tets.min() < 0 or tets.max() >= num_vertices):
        bad = int(np.flatnonzero(((tets < 0) | (tets >= num_vertices)).any(axis=1))[0])
        raise MeshError(f"{path}: element {bad} references a vertex outside [0, {num_vertices})")
    return tets


def save_mesh(mesh: TetMesh, node_path, ele_path, positions=None) -> None:
    """Write .node/.ele text (17 significant digits, 0-based ids).

    ``positions`` overrides the rest positions, e.g. to dump a deformed frame
    for restart.
    """
    pos = mesh.rest_positions if positions is None else positions
    with open(node_path, "w") as fh:
        fh.write(f"{pos.shape[0]} 3 0 0\n")
        for j, p in enumerate(pos):
            fh.write(f"{j} {p[0]:.17g} {p[1]:.17g} {p[2]:.17g}\n")
    with open(ele_path, "w") as fh:
        fh.write(f"{mesh.tets.shape[0]} 4 0\n")
        for e, t in enumerate(mesh.tets):
            fh.write(f"{e} {t[0]} {t[1]} {t[2]} {t[3]}\n")


def export_obj(path, positions: np.ndarray, surface_tris: np.ndarray) -> None:
    """Write the surface triangles as a Wavefront OBJ (1-based indices)."""
    with open(path, "w") as fh:
        for p in positions:
            fh.write(f"v {p[0]:.9g} {p[1]:.9g} {p[2]:.9g}\n")
        for t in surface_tris:
            fh.write(f"f {t[0] + 1} {t[1] + 1} {t[2] + 1}\n")
