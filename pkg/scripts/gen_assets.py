#!/usr/bin/env python3
"""Regenerate the mesh assets referenced by the bundled scenes."""

from pathlib import Path

from tetsolve.mesh import save_mesh
from tetsolve.primitives import box_grid

HERE = Path(__file__).resolve().parent.parent / "scenes"


def main():
    HERE.mkdir(exist_ok=True)
    beam = box_grid((8, 3, 3), (0.4, 0.15, 0.15))
    save_mesh(beam, HERE / "beam.node", HERE / "beam.ele")
    cube = box_grid((2, 2, 2), (0.1, 0.1, 0.1))
    save_mesh(cube, HERE / "cube.node", HERE / "cube.ele")
    slab = box_grid((4, 1, 4), (0.3, 0.06, 0.3))
    save_mesh(slab, HERE / "slab.node", HERE / "slab.ele")
    print(f"wrote meshes to {HERE}")


if __name__ == "__main__":
    main()
