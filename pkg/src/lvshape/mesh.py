"""Labeled joint triangle mesh and the discrete surface operators built on it.

Operators take plain ``(vertices, faces)`` arrays so they can run on a whole
mesh or on a compacted submesh; :class:`LabeledMesh` carries the per-vertex
structure, peripheral-region and side labels.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from enum import IntEnum

import numpy as np
from scipy import sparse

from .errors import GeometryError, InputError

COT_CLAMP = 1e-6


class Structure(IntEnum):
    LV = 0
    HIPPOCAMPUS = 1
    SHARED = 2


class Peripheral(IntEnum):
    WHITE_MATTER = 0
    HIPPOCAMPUS = 1
    THALAMUS = 2
    CAUDATE = 3
    OPPOSITE_LV = 4


class Side(IntEnum):
    LEFT = 0
    RIGHT = 1


NO_PERIPHERAL = -1

# regions with their own distance term; hippocampus is covered by the joint submesh
PERI_REGIONS = (
    Peripheral.WHITE_MATTER,
    Peripheral.THALAMUS,
    Peripheral.CAUDATE,
    Peripheral.OPPOSITE_LV,
)


@dataclass(frozen=True)
class SubMesh:
    """Compacted view of part of a mesh.

    ``vertex_ids`` maps local vertex index -> parent index; ``faces`` use local indices.
    """

    vertex_ids: np.ndarray
    faces: np.ndarray

    def vertices_of(self, parent_vertices):
        return parent_vertices[self.vertex_ids]

    @property
    def n_vertices(self):
        return len(self.vertex_ids)


def compact(faces, n_parent):
    """Re-index ``faces`` (parent indices) onto the vertices they use."""
    faces = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
    used = np.unique(faces)
    remap = np.full(n_parent, -1, dtype=np.int64)
    remap[used] = np.arange(len(used))
    return SubMesh(vertex_ids=used, faces=remap[faces])


@dataclass
class LabeledMesh:
    vertices: np.ndarray
    faces: np.ndarray
    structure: np.ndarray
    peripheral: np.ndarray
    side: np.ndarray
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        self.vertices = np.ascontiguousarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.ascontiguousarray(self.faces, dtype=np.int64).reshape(-1, 3)
        self.structure = np.asarray(self.structure, dtype=np.uint8)
        self.peripheral = np.asarray(self.peripheral, dtype=np.int8)
        self.side = np.asarray(self.side, dtype=np.uint8)

    @property
    def n_vertices(self):
        return len(self.vertices)

    def with_vertices(self, vertices):
        """Same topology and labels, new positions."""
        return LabeledMesh(
            np.array(vertices, dtype=np.float64),
            self.faces.copy(),
            self.structure.copy(),
            self.peripheral.copy(),
            self.side.copy(),
        )

    def lv_vertex_mask(self):
        return (self.structure == Structure.LV) | (self.structure == Structure.SHARED)

    def hippocampus_vertex_mask(self):
        return (self.structure == Structure.HIPPOCAMPUS) | (self.structure == Structure.SHARED)

    def part_face_mask(self, part):
        """Faces whose three vertices all belong to ``part`` ('lv' or 'hippocampus')."""
        if part == "lv":
            vmask = self.lv_vertex_mask()
        elif part == "hippocampus":
            vmask = self.hippocampus_vertex_mask()
        else:
            raise InputError(f"unknown part {part!r}")
        return vmask[self.faces].all(axis=1)

    def submesh(self, part) -> SubMesh:
        key = ("sub", part)
        if key not in self._cache:
            self._cache[key] = compact(self.faces[self.part_face_mask(part)], self.n_vertices)
        return self._cache[key]

    def peripheral_submesh(self, cls) -> SubMesh:
        """Submesh induced by faces whose three vertices all carry peripheral class ``cls``."""
        key = ("peri", int(cls))
        if key not in self._cache:
            fmask = (self.peripheral[self.faces] == int(cls)).all(axis=1)
            self._cache[key] = compact(self.faces[fmask], self.n_vertices)
        return self._cache[key]

    def select_side(self, side):
        """Return (mesh restricted to one side, parent vertex indices)."""
        keep = self.side == int(side)
        idx = np.flatnonzero(keep)
        fmask = keep[self.faces].all(axis=1)
        remap = np.full(self.n_vertices, -1, dtype=np.int64)
        remap[idx] = np.arange(len(idx))
        sub = LabeledMesh(
            self.vertices[idx],
            remap[self.faces[fmask]],
            self.structure[idx],
            self.peripheral[idx],
            self.side[idx],
        )
        return sub, idx

    def validate(self):
        """Check every structural invariant; raise InputError/GeometryError on the first violation."""
        n = self.n_vertices
        f = self.faces
        if not (len(self.structure) == len(self.peripheral) == len(self.side) == n):
            raise InputError("label arrays must have one entry per vertex")
        if not np.isfinite(self.vertices).all():
            raise GeometryError("non-finite vertex coordinates")
        if f.size and (f.min() < 0 or f.max() >= n):
            bad = int(np.flatnonzero((f < 0).any(1) | (f >= n).any(1))[0])
            raise InputError(f"face {bad} has a vertex index out of range")
        degenerate = (f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2])
        if degenerate.any():
            raise GeometryError(f"face {int(np.flatnonzero(degenerate)[0])} repeats a vertex")
        if self.structure.max(initial=0) > Structure.SHARED:
            raise InputError("structure label out of range")
        if ((self.peripheral < NO_PERIPHERAL) | (self.peripheral > Peripheral.OPPOSITE_LV)).any():
            raise InputError("peripheral class out of range")
        if self.side.max(initial=0) > Side.RIGHT:
            raise InputError("side label out of range")
        has_peri = self.peripheral != NO_PERIPHERAL
        lv_like = self.structure != Structure.HIPPOCAMPUS
        mismatch = np.flatnonzero(has_peri != lv_like)
        if len(mismatch):
            raise InputError(
                f"vertex {int(mismatch[0])}: peripheral class must be present iff vertex is LV or shared"
            )
        lv_faces = self.part_face_mask("lv")
        hc_faces = self.part_face_mask("hippocampus")
        orphan = np.flatnonzero(~(lv_faces | hc_faces))
        if len(orphan):
            raise InputError(f"face {int(orphan[0])} mixes LV and hippocampus vertices")
        for part, fm in (("lv", lv_faces), ("hippocampus", hc_faces)):
            if fm.any() and not is_closed_manifold(f[fm]):
                raise GeometryError(f"{part} submesh is not a closed edge-manifold surface")
        shared = np.flatnonzero(self.structure == Structure.SHARED)
        if len(shared):
            in_lv = np.zeros(n, bool)
            in_lv[f[lv_faces].ravel()] = True
            in_hc = np.zeros(n, bool)
            in_hc[f[hc_faces].ravel()] = True
            missing = shared[~(in_lv[shared] & in_hc[shared])]
            if len(missing):
                raise InputError(f"shared vertex {int(missing[0])} is not used by both submeshes")
            edges = unique_edges(f[lv_faces])
            is_shared = self.structure == Structure.SHARED
            is_lv = self.structure == Structure.LV
            for a, b in ((0, 1), (1, 0)):
                touch = is_shared[edges[:, a]] & is_lv[edges[:, b]]
                nb = edges[touch, b]
                bad = nb[self.peripheral[nb] != Peripheral.HIPPOCAMPUS]
                if len(bad):
                    raise InputError(
                        f"LV vertex {int(bad[0])} borders a shared vertex but is not hippocampus-class"
                    )
        return self


# ---------------------------------------------------------------- topology


def unique_edges(faces):
    """Sorted unique undirected edges, shape (E, 2)."""
    faces = np.asarray(faces, dtype=np.int64)
    e = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
    e.sort(axis=1)
    return np.unique(e, axis=0)


def _edge_keys(faces):
    # half-edge i of face f lies opposite corner (i+2)%3: (f0,f1), (f1,f2), (f2,f0)
    e = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
    e.sort(axis=1)
    return e


def is_closed_manifold(faces):
    """True iff every undirected edge bounds exactly two faces."""
    e = _edge_keys(np.asarray(faces, dtype=np.int64))
    _, counts = np.unique(e, axis=0, return_counts=True)
    return bool(len(counts)) and bool((counts == 2).all())


def edge_face_pairs(faces):
    """(E_int, 2) face index pairs sharing an edge, over edges with exactly two faces."""
    faces = np.asarray(faces, dtype=np.int64)
    m = len(faces)
    e = _edge_keys(faces)
    fid = np.tile(np.arange(m), 3)
    _, inv, counts = np.unique(e, axis=0, return_inverse=True, return_counts=True)
    inv = inv.ravel()
    order = np.argsort(inv, kind="stable")
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    two = counts == 2
    first = fid[order[starts[two]]]
    second = fid[order[starts[two] + 1]]
    return np.stack([first, second], axis=1)


def euler_characteristic(faces):
    faces = np.asarray(faces, dtype=np.int64)
    v = len(np.unique(faces))
    return v - len(unique_edges(faces)) + len(faces)


def connected_components(faces, n_vertices):
    """Per-vertex component labels over the face graph (unused vertices get their own)."""
    e = unique_edges(faces)
    adj = sparse.coo_matrix(
        (np.ones(len(e)), (e[:, 0], e[:, 1])), shape=(n_vertices, n_vertices)
    )
    _, labels = sparse.csgraph.connected_components(adj, directed=False)
    return labels


# ---------------------------------------------------------------- geometry


def face_cross(vertices, faces):
    """Unnormalized face normals (b-a) x (c-a); length is twice the face area."""
    a = vertices[faces[:, 0]]
    return np.cross(vertices[faces[:, 1]] - a, vertices[faces[:, 2]] - a)


def _scatter3(index, values, n):
    out = np.empty((n, 3))
    for k in range(3):
        out[:, k] = np.bincount(index, weights=values[:, k], minlength=n)
    return out


def vertex_normals(vertices, faces):
    """Unit vertex normals: area-weighted mean of incident face normals."""
    vertices = np.asarray(vertices, dtype=np.float64)
    faces = np.asarray(faces, dtype=np.int64)
    c = face_cross(vertices, faces)
    acc = _scatter3(faces.ravel(), np.repeat(c, 3, axis=0), len(vertices))
    norm = np.linalg.norm(acc, axis=1)
    bad = np.flatnonzero(~(norm > 1e-300))
    if len(bad):
        raise GeometryError(f"vertex {int(bad[0])} has no incident face with nonzero area")
    return acc / norm[:, None]


def face_areas(vertices, faces):
    return 0.5 * np.linalg.norm(face_cross(vertices, faces), axis=1)


def _corner_cotangents(vertices, faces):
    """cot of the angle at each corner, shape (F, 3); column k is the corner at faces[:, k]."""
    p = [vertices[faces[:, k]] for k in range(3)]
    cots = np.empty((len(faces), 3))
    for k in range(3):
        u = p[(k + 1) % 3] - p[k]
        v = p[(k + 2) % 3] - p[k]
        s = np.linalg.norm(np.cross(u, v), axis=1)
        if not (s > 0).all():
            bad = int(np.flatnonzero(~(s > 0))[0])
            raise GeometryError(f"face {bad} is degenerate (zero area)")
        cots[:, k] = np.einsum("ij,ij->i", u, v) / s
    return cots


def cotangent_weights(vertices, faces, clamp=COT_CLAMP):
    """Symmetric sparse matrix of w_ij = cot(alpha_ij) + cot(beta_ij), clamped below."""
    vertices = np.asarray(vertices, dtype=np.float64)
    faces = np.asarray(faces, dtype=np.int64)
    n = len(vertices)
    cots = _corner_cotangents(vertices, faces)
    # corner k is opposite the edge (k+1, k+2)
    i = np.concatenate([faces[:, (k + 1) % 3] for k in range(3)])
    j = np.concatenate([faces[:, (k + 2) % 3] for k in range(3)])
    w = np.concatenate([cots[:, k] for k in range(3)])
    W = sparse.coo_matrix((w, (i, j)), shape=(n, n)).tocsr()
    W = W + W.T
    W.sum_duplicates()
    W.data = np.maximum(W.data, clamp)
    return W


def cotangent_laplacian(vertices, faces, clamp=COT_CLAMP):
    """Normalized cotangent Laplacian: (L x)_i = sum_j w_ij (x_j - x_i) / sum_j w_ij."""
    W = cotangent_weights(vertices, faces, clamp)
    d = np.asarray(W.sum(axis=1)).ravel()
    return (sparse.diags(1.0 / d) @ W - sparse.identity(len(d))).tocsr()


def edge_length_stats(vertices, faces):
    """(mean, population variance) of unique undirected edge lengths."""
    e = unique_edges(faces)
    lengths = np.linalg.norm(vertices[e[:, 0]] - vertices[e[:, 1]], axis=1)
    return float(lengths.mean()), float(lengths.var())


def normal_consistency(vertices, faces):
    """Mean over interior edges of 1 - cos(angle between the two adjacent face normals)."""
    pairs = edge_face_pairs(faces)
    if not len(pairs):
        return 0.0
    c = face_cross(vertices, faces)
    n = c / np.linalg.norm(c, axis=1, keepdims=True)
    return float(np.mean(1.0 - np.einsum("ij,ij->i", n[pairs[:, 0]], n[pairs[:, 1]])))


def signed_volume(vertices, faces):
    a, b, c = (vertices[faces[:, k]] for k in range(3))
    return float(np.einsum("ij,ij->i", a, np.cross(b, c)).sum() / 6.0)
