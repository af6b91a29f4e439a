"""Structured test geometry: axis-aligned boxes split into tetrahedra."""

import numpy as np

from .mesh import TetMesh, build_mesh

# Kuhn subdivision of a unit cell into 6 tets around the main diagonal.
_KUHN_TETS = (
    (0b000, 0b100, 0b110, 0b111),
    (0b000, 0b110, 0b010, 0b111),
    (0b000, 0b010, 0b011, 0b111),
    (0b000, 0b011, 0b001, 0b111),
    (0b000, 0b001, 0b101, 0b111),
    (0b000, 0b101, 0b100, 0b111),
)


def box_grid(divisions, extents, origin=(0.0, 0.0, 0.0), density: float = 1000.0) -> TetMesh:
    """Regular box of ``divisions`` = (nx, ny, nz) cells spanning ``extents``.

    Each cell becomes six tetrahedra (Kuhn split), which keeps orientation
    uniform and the mesh conforming.
    """
    nx, ny, nz = divisions
    ex, ey, ez = extents
    ox, oy, oz = origin
    xs = np.linspace(ox, ox + ex, nx + 1)
    ys = np.linspace(oy, oy + ey, ny + 1)
    zs = np.linspace(oz, oz + ez, nz + 1)
    gx, gy, gz = np.meshgrid(xs, ys, zs, indexing="ij")
    verts = np.column_stack((gx.ravel(), gy.ravel(), gz.ravel()))

    def vid(i, j, k):
        return (i * (ny + 1) + j) * (nz + 1) + k

    tets = []
    for i in range(nx):
        for j in range(ny):
            for k in range(nz):
                corner = [vid(i + (c >> 2 & 1), j + (c >> 1 & 1), k + (c & 1))
                          for c in range(8)]
                for tet in _KUHN_TETS:
                    tets.append([corner[c] for c in tet])
    return build_mesh(verts, np.asarray(tets, dtype=np.int64), density=density)


def single_tet(density: float = 1000.0) -> TetMesh:
    """Reference tetrahedron: origin plus the three axis unit points."""
    verts = np.array([
        [0.0, 0.0, 0.0],
        [1.0, 0.0, 0.0],
        [0.0, 1.0, 0.0],
        [0.0, 0.0, 1.0],
    ])
    tets = np.array([[0, 1, 2, 3]])
    return build_mesh(verts, tets, density=density)
