"""Static triangle-mesh machinery for the canonical sphere template.

Icosphere construction, bilateral symmetry pairing across the xy-plane,
uniform graph Laplacian, differentiable face normals, face adjacency, an
equirectangular UV atlas with seam duplication, and OBJ/PLY export.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import sparse
from scipy.spatial import cKDTree

from . import autodiff as ad
from .autodiff import Tensor


class MeshError(ValueError):
    """Raised when a mesh violates construction invariants."""


@dataclass
class TriMesh:
    """Closed triangle mesh with fixed connectivity.

    vertices: (N, 3) float32 positions on the unit sphere, object-centered.
    faces: (F, 3) int vertex indices, counter-clockwise seen from outside.
    uv: (N, 2) per-vertex equirectangular coordinates in [0, 1]^2.
    uv_table / face_uv: seam-duplicated texture coordinates and per-face
    corner indices into them (vertex count stays fixed; only UVs duplicate).
    """

    vertices: np.ndarray
    faces: np.ndarray
    uv: np.ndarray = None
    uv_table: np.ndarray = None
    face_uv: np.ndarray = None

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_faces(self) -> int:
        return len(self.faces)


@dataclass
class SymmetryMap:
    """Involution pairing each vertex with its xy-plane reflection."""

    mirror: np.ndarray        # (N,) partner index; fixed points on the plane
    positive: np.ndarray      # indices with z >= 0 (deformation is predicted here)
    strictly_positive: np.ndarray  # indices with z > 0
    equator: np.ndarray       # indices with |z| < tol (self-paired)


@dataclass
class FaceAdjacency:
    """All unordered pairs of faces sharing an edge."""

    pairs: np.ndarray  # (E, 2) face indices


# regular icosahedron, bilaterally symmetric about the xy-plane
_PHI = (1.0 + math.sqrt(5.0)) / 2.0
_ICO_VERTS = np.array([
    [-1.0, _PHI, 0.0], [1.0, _PHI, 0.0], [-1.0, -_PHI, 0.0], [1.0, -_PHI, 0.0],
    [0.0, -1.0, _PHI], [0.0, 1.0, _PHI], [0.0, -1.0, -_PHI], [0.0, 1.0, -_PHI],
    [_PHI, 0.0, -1.0], [_PHI, 0.0, 1.0], [-_PHI, 0.0, -1.0], [-_PHI, 0.0, 1.0],
], dtype=np.float64)
_ICO_FACES = np.array([
    [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
    [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
    [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
    [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
], dtype=np.int64)


def _normalize_rows(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def icosphere(subdivisions: int) -> TriMesh:
    """Icosahedron with midpoint subdivision projected onto the unit sphere.

    V = 10*4^s + 2, F = 20*4^s.  Shared midpoints are deduplicated so the
    result is a closed 2-manifold.
    """
    if not 0 <= subdivisions <= 6:
        raise ValueError(f"subdivisions must be in [0, 6], got {subdivisions}")
    verts = list(_normalize_rows(_ICO_VERTS))
    faces = _ICO_FACES.copy()
    for _ in range(subdivisions):
        midpoint_cache: dict[tuple[int, int], int] = {}

        def midpoint(i, j):
            key = (i, j) if i < j else (j, i)
            if key not in midpoint_cache:
                m = (verts[i] + verts[j]) / 2.0
                verts.append(m / np.linalg.norm(m))
                midpoint_cache[key] = len(verts) - 1
            return midpoint_cache[key]

        new_faces = np.empty((4 * len(faces), 3), dtype=np.int64)
        for fi, (a, b, c) in enumerate(faces):
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            new_faces[4 * fi:4 * fi + 4] = [
                [a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]
        faces = new_faces
    vertices = np.asarray(verts, dtype=np.float32)
    mesh = TriMesh(vertices=vertices, faces=faces)
    validate_closed(mesh)
    mesh.uv, mesh.uv_table, mesh.face_uv = sphere_uv(mesh)
    return mesh


def validate_closed(mesh: TriMesh):
    """Check the closed 2-manifold invariants (edge sharing, Euler formula)."""
    edges = _edge_face_map(mesh)
    bad = [e for e, fs in edges.items() if len(fs) != 2]
    if bad:
        raise MeshError(f"{len(bad)} edges not shared by exactly 2 faces "
                        f"(first: {bad[0]})")
    v, e, f = mesh.n_vertices, len(edges), mesh.n_faces
    if v - e + f != 2:
        raise MeshError(f"Euler characteristic {v - e + f} != 2 "
                        f"(V={v}, E={e}, F={f})")


def _edge_face_map(mesh: TriMesh) -> dict[tuple[int, int], list[int]]:
    edges: dict[tuple[int, int], list[int]] = {}
    for fi, (a, b, c) in enumerate(mesh.faces):
        for i, j in ((a, b), (b, c), (c, a)):
            key = (i, j) if i < j else (j, i)
            edges.setdefault(key, []).append(fi)
    return edges


def symmetry_pairs(mesh: TriMesh, tol: float = 1e-6) -> SymmetryMap:
    """Pair each vertex with its z-reflection partner.

    The map is a total involution; vertices with |z| < tol map to themselves.
    Raises MeshError if any vertex has no reflection partner within tol.
    """
    verts = mesh.vertices.astype(np.float64)
    reflected = verts * np.array([1.0, 1.0, -1.0])
    tree = cKDTree(verts)
    dist, partner = tree.query(reflected)
    if np.any(dist > tol):
        worst = int(np.argmax(dist))
        raise MeshError(f"vertex {worst} at {verts[worst]} has no mirror "
                        f"partner within {tol} (nearest at {dist[worst]:.3g})")
    mirror = partner.astype(np.int64)
    equator_mask = np.abs(verts[:, 2]) < tol
    mirror[equator_mask] = np.flatnonzero(equator_mask)
    if not np.array_equal(mirror[mirror], np.arange(len(verts))):
        raise MeshError("mirror map is not an involution")
    return SymmetryMap(
        mirror=mirror,
        positive=np.flatnonzero(verts[:, 2] >= 0.0),
        strictly_positive=np.flatnonzero(verts[:, 2] > 0.0),
        equator=np.flatnonzero(equator_mask),
    )


def reflect_z(positions):
    """Reflect positions (array or Tensor) about the xy-plane."""
    flip = np.array([1.0, 1.0, -1.0], dtype=np.float32)
    if isinstance(positions, Tensor):
        return positions * Tensor(flip.astype(positions.dtype))
    return positions * flip


def vertex_neighbors(mesh: TriMesh) -> list[np.ndarray]:
    nbrs: list[set[int]] = [set() for _ in range(mesh.n_vertices)]
    for a, b, c in mesh.faces:
        nbrs[a].update((b, c))
        nbrs[b].update((a, c))
        nbrs[c].update((a, b))
    return [np.array(sorted(s), dtype=np.int64) for s in nbrs]


def uniform_laplacian(mesh: TriMesh) -> sparse.csr_matrix:
    """Graph Laplacian: L[i,i] = 1, L[i,j] = -1/deg(i) for neighbors j."""
    nbrs = vertex_neighbors(mesh)
    rows, cols, vals = [], [], []
    for i, ns in enumerate(nbrs):
        rows.append(i)
        cols.append(i)
        vals.append(1.0)
        for j in ns:
            rows.append(i)
            cols.append(int(j))
            vals.append(-1.0 / len(ns))
    n = mesh.n_vertices
    return sparse.csr_matrix(
        (np.asarray(vals, dtype=np.float32), (rows, cols)), shape=(n, n))


def face_normals(mesh: TriMesh, positions: Tensor) -> Tensor:
    """Unnormalized cross-product face normals, differentiable in positions.

    Degenerate faces yield the zero vector; normalization (with its epsilon)
    is the consumer's responsibility.
    """
    corners = ad.gather(positions, mesh.faces)        # (F, 3, 3)
    v0 = corners[:, 0, :]
    e1 = corners[:, 1, :] - v0
    e2 = corners[:, 2, :] - v0
    nx = e1[:, 1] * e2[:, 2] - e1[:, 2] * e2[:, 1]
    ny = e1[:, 2] * e2[:, 0] - e1[:, 0] * e2[:, 2]
    nz = e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0]
    return ad.stack([nx, ny, nz], axis=1)


def face_adjacency(mesh: TriMesh) -> FaceAdjacency:
    """One (face_i, face_j) pair per shared edge of a closed manifold."""
    edges = _edge_face_map(mesh)
    pairs = []
    for e, fs in sorted(edges.items()):
        if len(fs) != 2:
            raise MeshError(f"edge {e} shared by {len(fs)} faces, expected 2")
        pairs.append(sorted(fs))
    return FaceAdjacency(pairs=np.asarray(pairs, dtype=np.int64))


def sphere_uv(mesh: TriMesh):
    """Equirectangular UV: u from atan2(y, x), v from asin(z).

    Returns per-vertex uv in [0,1]^2 plus a seam-duplicated coordinate table
    and per-face indices into it; faces crossing the u-wraparound get their
    low-u corners shifted by +1 in the table.
    """
    v64 = mesh.vertices.astype(np.float64)
    u = (np.arctan2(v64[:, 1], v64[:, 0]) + math.pi) / (2.0 * math.pi)
    w = (np.arcsin(np.clip(v64[:, 2], -1.0, 1.0)) + math.pi / 2.0) / math.pi
    uv = np.stack([u, w], axis=1).astype(np.float32)
    is_pole = np.abs(v64[:, 2]) > 1.0 - 1e-9   # u is arbitrary at the poles

    table: list[tuple[int, float]] = []
    index: dict[tuple[int, float], int] = {}
    face_uv = np.empty_like(mesh.faces)

    def entry(vi: int, u_val: float) -> int:
        key = (vi, round(u_val, 7))
        if key not in index:
            index[key] = len(table)
            table.append((vi, u_val))
        return index[key]

    for fi, face in enumerate(mesh.faces):
        side = [vi for vi in face if not is_pole[vi]]
        us = {int(vi): float(uv[vi, 0]) for vi in face}
        span = [us[int(vi)] for vi in side] or [0.5]
        if max(span) - min(span) > 0.5:
            for vi in side:
                if us[int(vi)] < 0.5:
                    us[int(vi)] += 1.0
        # pole corners take the mean u of the face's other corners
        mean_u = float(np.mean([us[int(vi)] for vi in side])) if side else 0.5
        for vi in face:
            if is_pole[vi]:
                us[int(vi)] = mean_u
        for c, vi in enumerate(face):
            face_uv[fi, c] = entry(int(vi), us[int(vi)])

    uv_table = np.array([[u_val, uv[vi, 1]] for vi, u_val in table],
                        dtype=np.float32)
    return uv, uv_table, face_uv


def export_obj(mesh: TriMesh, positions, path):
    """Write a Wavefront OBJ with v/vt/f records (1-based indices)."""
    pos = positions.data if isinstance(positions, Tensor) else np.asarray(positions)
    if not np.all(np.isfinite(pos)):
        raise ValueError("refusing to export non-finite vertex positions")
    lines = []
    for p in pos:
        lines.append(f"v {p[0]:.6f} {p[1]:.6f} {p[2]:.6f}")
    if mesh.uv_table is not None:
        for t in mesh.uv_table:
            lines.append(f"vt {t[0]:.6f} {t[1]:.6f}")
        for face, fuv in zip(mesh.faces, mesh.face_uv):
            lines.append("f " + " ".join(
                f"{v + 1}/{t + 1}" for v, t in zip(face, fuv)))
    else:
        for face in mesh.faces:
            lines.append("f " + " ".join(str(v + 1) for v in face))
    try:
        with open(path, "w") as f:
            f.write("\n".join(lines) + "\n")
    except OSError as err:
        raise OSError(f"failed to write OBJ to {path}: {err}") from err


def import_obj(path):
    """Minimal OBJ reader for round-trip checks: returns (v, vt, f, f_vt)."""
    verts, uvs, faces, face_uv = [], [], [], []
    with open(path) as f:
        for line in f:
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "v":
                verts.append([float(x) for x in parts[1:4]])
            elif parts[0] == "vt":
                uvs.append([float(x) for x in parts[1:3]])
            elif parts[0] == "f":
                vi, ti = [], []
                for tok in parts[1:4]:
                    sub = tok.split("/")
                    vi.append(int(sub[0]) - 1)
                    ti.append(int(sub[1]) - 1 if len(sub) > 1 and sub[1] else -1)
                faces.append(vi)
                face_uv.append(ti)
    return (np.asarray(verts, dtype=np.float32),
            np.asarray(uvs, dtype=np.float32),
            np.asarray(faces, dtype=np.int64),
            np.asarray(face_uv, dtype=np.int64))


def export_ply_colors(mesh: TriMesh, positions, colors_u8, path):
    """ASCII PLY with per-vertex uchar RGB (part visualization)."""
    pos = positions.data if isinstance(positions, Tensor) else np.asarray(positions)
    colors_u8 = np.asarray(colors_u8, dtype=np.uint8)
    header = [
        "ply", "format ascii 1.0",
        f"element vertex {mesh.n_vertices}",
        "property float x", "property float y", "property float z",
        "property uchar red", "property uchar green", "property uchar blue",
        f"element face {mesh.n_faces}",
        "property list uchar int vertex_indices",
        "end_header",
    ]
    lines = list(header)
    for p, c in zip(pos, colors_u8):
        lines.append(f"{p[0]:.6f} {p[1]:.6f} {p[2]:.6f} {c[0]} {c[1]} {c[2]}")
    for face in mesh.faces:
        lines.append(f"3 {face[0]} {face[1]} {face[2]}")
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")
