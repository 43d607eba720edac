"""Alignment accuracy: Dice overlap and surface distances (ASSD, HD95).

Surfaces are either point arrays or meshes. A mesh is sampled densely (every
face split into congruent sub-triangles no longer than ``spacing`` on a side;
one sample per sub-triangle centroid) when it is the source of a directed
distance, and used exactly (point-to-triangle) when it is the destination.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .errors import InputError
from .losses import nearest_triangles
from .mesh import LabeledMesh
from .volume import SegmentationVolume
from .voxelize import voxelize

DEFAULT_SPACING = 0.5


def dice(vol_a: SegmentationVolume, vol_b: SegmentationVolume, code) -> float:
    """2|A & B| / (|A| + |B|) for voxels labelled ``code``; 1.0 when both are empty."""
    if vol_a.dims != vol_b.dims or not np.allclose(vol_a.spacing, vol_b.spacing) \
            or not np.allclose(vol_a.origin, vol_b.origin):
        raise InputError("dice needs volumes on the same grid")
    a = vol_a.labels == code
    b = vol_b.labels == code
    na, nb = int(a.sum()), int(b.sum())
    if na + nb == 0:
        return 1.0
    return 2.0 * int((a & b).sum()) / (na + nb)


def _as_surface(s):
    """Normalize to ('points', P) or ('mesh', V, F)."""
    if isinstance(s, LabeledMesh):
        return ("mesh", s.vertices, s.faces)
    if isinstance(s, tuple) and len(s) == 2:
        V = np.asarray(s[0], float)
        F = np.asarray(s[1], dtype=np.int64).reshape(-1, 3)
        if not len(F):
            raise InputError("surface mesh has no faces")
        return ("mesh", V, F)
    P = np.asarray(s, float).reshape(-1, 3)
    if not len(P):
        raise InputError("surface point set is empty")
    return ("points", P)


def sample_surface(vertices, faces, spacing=DEFAULT_SPACING):
    """Centroids of an n x n subdivision of every face, n = ceil(longest edge / spacing).

    Returns (samples, face index of each sample).
    """
    V = np.asarray(vertices, float)
    F = np.asarray(faces, dtype=np.int64)
    if not len(F):
        raise InputError("surface mesh has no faces")
    tri = V[F]
    edge = np.linalg.norm(tri[:, [1, 2, 0]] - tri, axis=-1).max(axis=1)
    nsub = np.maximum(1, np.ceil(edge / spacing - 1e-9)).astype(np.int64)
    out, owner = [], []
    for n in np.unique(nsub):
        fids = np.flatnonzero(nsub == n)
        # barycentric centroids of the n^2 sub-triangles (upward and downward)
        bary = []
        for i in range(n):
            for j in range(n - i):
                bary.append(((i + 1 / 3) / n, (j + 1 / 3) / n))
                if i + j < n - 1:
                    bary.append(((i + 2 / 3) / n, (j + 2 / 3) / n))
        bary = np.asarray(bary)
        u, v = bary[:, 0], bary[:, 1]
        w = 1 - u - v
        t = tri[fids]
        pts = (w[None, :, None] * t[:, None, 0] + u[None, :, None] * t[:, None, 1]
               + v[None, :, None] * t[:, None, 2])
        out.append(pts.reshape(-1, 3))
        owner.append(np.repeat(fids, len(bary)))
    samples = np.vstack(out)
    owner = np.concatenate(owner)
    order = np.argsort(owner, kind="stable")
    return samples[order], owner[order]


def _source_points(surf, spacing):
    if surf[0] == "points":
        return surf[1]
    return sample_surface(surf[1], surf[2], spacing)[0]


def _distances_to(points, surf):
    if surf[0] == "points":
        d, _ = cKDTree(surf[1]).query(points)
        return d
    _, _, d2 = nearest_triangles(points, surf[1], surf[2])
    return np.sqrt(d2)


def directed_distances(a, b, spacing=DEFAULT_SPACING):
    """Distances from every sample of surface ``a`` to surface ``b``."""
    sa, sb = _as_surface(a), _as_surface(b)
    return _distances_to(_source_points(sa, spacing), sb)


def assd(a, b, spacing=DEFAULT_SPACING) -> float:
    """Mean of the two directed mean surface distances."""
    return 0.5 * (float(directed_distances(a, b, spacing).mean())
                  + float(directed_distances(b, a, spacing).mean()))


def hd95(a, b, spacing=DEFAULT_SPACING) -> float:
    """Max of the two directed 95th percentiles (linear interpolation)."""
    return max(float(np.percentile(directed_distances(a, b, spacing), 95)),
               float(np.percentile(directed_distances(b, a, spacing), 95)))


@dataclass
class AlignmentReport:
    dsc: float
    assd: float
    hd95: float
    region_assd: dict = field(default_factory=dict)

    def to_dict(self):
        return {"dsc": self.dsc, "assd": self.assd, "hd95": self.hd95, "region_assd": dict(self.region_assd)}


def _face_class(peripheral, faces):
    """Peripheral class of each face: the most common among its corners (ties to the lowest)."""
    c = np.sort(peripheral[faces], axis=1)
    return np.where(c[:, 1] == c[:, 2], c[:, 1], c[:, 0])


def alignment_report(fitted: LabeledMesh, reference, volume: SegmentationVolume | None = None,
                     code=None, spacing=DEFAULT_SPACING) -> AlignmentReport:
    """Compare the LV of ``fitted`` with ``reference`` (a LabeledMesh or an LV point array).

    DSC needs ``volume`` and ``code``: the fitted LV is voxelized on the
    volume's grid. Per-region ASSD averages the directed fitted->reference
    distances of samples on faces of each peripheral class with the
    reference->fitted distances of reference samples whose nearest fitted sample
    lies in that class.
    """
    sub = fitted.submesh("lv")
    Vf = fitted.vertices[sub.vertex_ids]
    Ff = sub.faces
    if isinstance(reference, LabeledMesh):
        rs = reference.submesh("lv")
        ref = (reference.vertices[rs.vertex_ids], rs.faces)
    else:
        ref = np.asarray(reference, float)
    fs, owner = sample_surface(Vf, Ff, spacing)
    d_fr = _distances_to(fs, _as_surface(ref))
    rsamp = _source_points(_as_surface(ref), spacing)
    d_rf = _distances_to(rsamp, ("mesh", Vf, Ff))
    a = 0.5 * (d_fr.mean() + d_rf.mean())
    h = max(np.percentile(d_fr, 95), np.percentile(d_rf, 95))

    cls = _face_class(fitted.peripheral[sub.vertex_ids], Ff)[owner]
    _, near = cKDTree(fs).query(rsamp)
    rcls = cls[near]
    regions = {}
    for c in np.unique(cls):
        x, y = d_fr[cls == c], d_rf[rcls == c]
        if len(x) and len(y):
            regions[int(c)] = 0.5 * (float(x.mean()) + float(y.mean()))
    dsc = float("nan")
    if volume is not None and code is not None:
        mine = voxelize((Vf, Ff), volume.grid, value=code)
        dsc = dice(mine, volume, code)
    return AlignmentReport(dsc, float(a), float(h), regions)
