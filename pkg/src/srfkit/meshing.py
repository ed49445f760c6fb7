"""Isosurface extraction from sparse fields via marching cubes.

Works directly on the sparse structure: only grid cells adjacent to an
occupied voxel are visited, so memory stays O(occupied) at any resolution.
Vertices are deduplicated through global lattice-edge keys, making the
output watertight wherever the isosurface is closed, with deterministic
vertex numbering (cells visited in lexicographic order).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ._mc_tables import EDGE_TABLE, TRI_TABLE
from .errors import ContractError
from .field import grid_to_world

# Cube corners in table order: v0 at the cell origin, v1..v3 around the
# bottom face (+x, +x+y, +y), v4..v7 the same square at +z.
_CORNERS = np.array(
    [
        (0, 0, 0), (1, 0, 0), (1, 1, 0), (0, 1, 0),
        (0, 0, 1), (1, 0, 1), (1, 1, 1), (0, 1, 1),
    ],
    dtype=np.int64,
)
# Edge e connects corner pair _EDGE_ENDS[e].
_EDGE_ENDS = [
    (0, 1), (1, 2), (2, 3), (3, 0),
    (4, 5), (5, 6), (6, 7), (7, 4),
    (0, 4), (1, 5), (2, 6), (3, 7),
]


@dataclass
class TriMesh:
    vertices: np.ndarray  # (V, 3) world units
    triangles: np.ndarray  # (T, 3) vertex indices

    @property
    def num_vertices(self):
        return self.vertices.shape[0]

    @property
    def num_triangles(self):
        return self.triangles.shape[0]


def _activated_density(srf, activation):
    dens = srf.density.astype(np.float64)
    if activation == "relu":
        return np.maximum(dens, 0.0)
    if activation == "exp":
        return np.exp(dens)
    raise ContractError(f"unknown activation {activation!r}")


def marching_cubes(srf, iso, activation="relu"):
    """Triangulate the `activated density == iso` level set.

    Empty voxels count as zero density, so `iso` must be positive for the
    level set to be bounded. An empty field yields an empty mesh.
    """
    if iso <= 0.0:
        raise ContractError("iso level must be positive (empty space is zero)")
    h = srf.resolution
    coords = srf.coords.astype(np.int64)
    if coords.shape[0] == 0:
        return TriMesh(
            vertices=np.empty((0, 3), dtype=np.float64),
            triangles=np.empty((0, 3), dtype=np.int64),
        )
    values = _activated_density(srf, activation)
    value_of = dict(zip(map(tuple, coords.tolist()), values.tolist()))

    # Candidate cells: every cell having at least one occupied corner.
    cells = (coords[:, None, :] - _CORNERS[None, :, :]).reshape(-1, 3)
    keep = np.all((cells >= 0) & (cells <= h - 2), axis=1)
    cells = np.unique(cells[keep], axis=0)  # unique sorts lexicographically

    vert_index = {}
    vertices = []
    triangles = []
    for cell in cells:
        ci, cj, ck = int(cell[0]), int(cell[1]), int(cell[2])
        corner_vals = np.empty(8)
        for c in range(8):
            key = (ci + int(_CORNERS[c, 0]), cj + int(_CORNERS[c, 1]),
                   ck + int(_CORNERS[c, 2]))
            corner_vals[c] = value_of.get(key, 0.0)
        cube_index = 0
        for c in range(8):
            if corner_vals[c] < iso:
                cube_index |= 1 << c
        if EDGE_TABLE[cube_index] == 0:
            continue
        edge_vertex = {}
        for e in range(12):
            if not EDGE_TABLE[cube_index] & (1 << e):
                continue
            a, b = _EDGE_ENDS[e]
            pa = cell + _CORNERS[a]
            pb = cell + _CORNERS[b]
            # canonical lattice-edge key shared between neighbor cells
            if tuple(pa) <= tuple(pb):
                lo, hi, va, vb = pa, pb, corner_vals[a], corner_vals[b]
            else:
                lo, hi, va, vb = pb, pa, corner_vals[b], corner_vals[a]
            axis = int(np.nonzero(hi - lo)[0][0])
            key = (int(lo[0]), int(lo[1]), int(lo[2]), axis)
            if key not in vert_index:
                denom = vb - va
                t = 0.5 if denom == 0.0 else (iso - va) / denom
                t = min(max(t, 0.0), 1.0)
                pos = lo.astype(np.float64)
                pos[axis] += t
                vert_index[key] = len(vertices)
                vertices.append(pos)
            edge_vertex[e] = vert_index[key]
        row = TRI_TABLE[cube_index]
        for t0 in range(0, len(row) - 2, 3):
            if row[t0] < 0:
                break
            tri = (edge_vertex[row[t0]], edge_vertex[row[t0 + 1]],
                   edge_vertex[row[t0 + 2]])
            if tri[0] == tri[1] or tri[1] == tri[2] or tri[0] == tri[2]:
                continue
            triangles.append(tri)

    if not vertices:
        return TriMesh(
            vertices=np.empty((0, 3), dtype=np.float64),
            triangles=np.empty((0, 3), dtype=np.int64),
        )
    verts_grid = np.asarray(vertices, dtype=np.float64)
    tris = np.asarray(triangles, dtype=np.int64)
    verts_world = grid_to_world(verts_grid, h)
    # drop exactly-degenerate triangles (coincident interpolated vertices)
    if tris.size:
        areas = triangle_areas(verts_world, tris)
        tris = tris[areas > 1e-12]
    return TriMesh(vertices=verts_world, triangles=tris)


def triangle_areas(vertices, triangles):
    a = vertices[triangles[:, 0]]
    b = vertices[triangles[:, 1]]
    c = vertices[triangles[:, 2]]
    return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)


def surface_area(mesh):
    if mesh.num_triangles == 0:
        return 0.0
    return float(triangle_areas(mesh.vertices, mesh.triangles).sum())


def euler_characteristic(mesh):
    """V - E + F with edges counted once regardless of direction."""
    if mesh.num_triangles == 0:
        return 0
    tris = mesh.triangles
    edges = np.concatenate(
        [tris[:, [0, 1]], tris[:, [1, 2]], tris[:, [2, 0]]], axis=0
    )
    edges = np.sort(edges, axis=1)
    n_edges = np.unique(edges, axis=0).shape[0]
    n_verts = np.unique(tris.reshape(-1)).size
    return int(n_verts - n_edges + tris.shape[0])


def save_obj(mesh, path):
    """Wavefront OBJ with v/f records only (1-based indices)."""
    with open(path, "w") as fh:
        for v in mesh.vertices:
            fh.write(f"v {v[0]:.8f} {v[1]:.8f} {v[2]:.8f}\n")
        for t in mesh.triangles:
            fh.write(f"f {t[0] + 1} {t[1] + 1} {t[2] + 1}\n")
