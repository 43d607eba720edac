"""Inside/outside voxelization of closed triangle surfaces by ray parity.

Rays run along +x through voxel-centre columns. A column is tested against
each triangle's yz-projection with orientation predicates evaluated on
canonically ordered edges (lower vertex index first) and ties broken by
symbolic perturbation of the ray, so a ray through a shared edge or vertex is
counted by exactly one of the adjacent triangles.
"""
from __future__ import annotations

import numpy as np

from .errors import GeometryError
from .mesh import LabeledMesh, is_closed_manifold
from .volume import GridSpec, SegmentationVolume


def _surface(mesh, part):
    if isinstance(mesh, LabeledMesh):
        faces = mesh.faces if part is None else mesh.faces[mesh.part_face_mask(part)]
        return mesh.vertices, faces
    vertices, faces = mesh
    return np.asarray(vertices, float), np.asarray(faces, dtype=np.int64)


def _edge_sign(vertices, i, j, py, pz):
    """Sign of orient2d(v_i, v_j, p) in the yz plane with the ray perturbed by (eps, eps^2)."""
    swap = i > j
    a = np.where(swap, j, i)
    b = np.where(swap, i, j)
    ay, az = vertices[a, 1], vertices[a, 2]
    by, bz = vertices[b, 1], vertices[b, 2]
    o = (by - ay) * (pz - az) - (bz - az) * (py - ay)
    tie = np.where(bz != az, np.sign(az - bz), np.sign(by - ay))
    s = np.where(o != 0, np.sign(o), tie)
    return np.where(swap, -s, s), np.where(swap, -o, o)


def inside_mask(mesh, grid: GridSpec, part=None):
    """Boolean grid, True where the voxel centre lies inside the closed surface."""
    vertices, faces = _surface(mesh, part)
    if not len(faces) or not is_closed_manifold(faces):
        raise GeometryError("voxelization needs a closed edge-manifold surface")
    sp = np.asarray(grid.spacing)
    org = np.asarray(grid.origin)
    nx, ny, nz = grid.dims
    tri = vertices[faces]
    # candidate columns from each triangle's yz bounding box
    jlo = np.clip(np.ceil((tri[:, :, 1].min(1) - org[1]) / sp[1] - 0.5), 0, ny).astype(np.int64)
    jhi = np.clip(np.floor((tri[:, :, 1].max(1) - org[1]) / sp[1] - 0.5), -1, ny - 1).astype(np.int64)
    klo = np.clip(np.ceil((tri[:, :, 2].min(1) - org[2]) / sp[2] - 0.5), 0, nz).astype(np.int64)
    khi = np.clip(np.floor((tri[:, :, 2].max(1) - org[2]) / sp[2] - 0.5), -1, nz - 1).astype(np.int64)
    nj = np.maximum(jhi - jlo + 1, 0)
    nk = np.maximum(khi - klo + 1, 0)
    counts = nj * nk
    fid = np.repeat(np.arange(len(faces)), counts)
    if not len(fid):
        return np.zeros(grid.dims, bool)
    local = np.arange(len(fid)) - np.repeat(np.cumsum(counts) - counts, counts)
    j = jlo[fid] + local // nk[fid]
    k = klo[fid] + local % nk[fid]
    py = org[1] + (j + 0.5) * sp[1]
    pz = org[2] + (k + 0.5) * sp[2]

    f = faces[fid]
    s0, o0 = _edge_sign(vertices, f[:, 1], f[:, 2], py, pz)
    s1, o1 = _edge_sign(vertices, f[:, 2], f[:, 0], py, pz)
    s2, o2 = _edge_sign(vertices, f[:, 0], f[:, 1], py, pz)
    hit = (s0 == s1) & (s1 == s2) & (s0 != 0)
    denom = o0 + o1 + o2
    hit &= denom != 0
    x = (o0 * vertices[f[:, 0], 0] + o1 * vertices[f[:, 1], 0] + o2 * vertices[f[:, 2], 0])
    x = x[hit] / denom[hit]
    j, k = j[hit], k[hit]
    # first voxel whose centre lies strictly beyond the crossing
    i0 = np.floor((x - org[0]) / sp[0] - 0.5).astype(np.int64) + 1
    keep = i0 < nx
    i0 = np.clip(i0[keep], 0, nx)
    toggles = np.zeros((nx + 1, ny, nz), dtype=np.int32)
    np.add.at(toggles, (i0, j[keep], k[keep]), 1)
    return (np.cumsum(toggles[:nx], axis=0) % 2).astype(bool)


def voxelize(mesh, grid: GridSpec, part=None, value=1) -> SegmentationVolume:
    """Label voxels whose centres are inside ``mesh`` with ``value`` (others 0).

    ``mesh`` is a LabeledMesh (optionally restricted to ``part``) or a
    ``(vertices, faces)`` pair.
    """
    inside = inside_mask(mesh, grid, part)
    labels = np.where(inside, value, 0).astype(np.int32)
    return SegmentationVolume(labels, grid.spacing, grid.origin)
