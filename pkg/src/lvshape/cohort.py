"""Synthetic cohorts: smoothly deformed templates rendered to label volumes.

Each subject is the joint template pushed through one smooth displacement
field (a sum of Gaussian bumps at random control points), optionally followed
by a small rigid motion. The field is shared by both hemispheres, so the
nearly touching medial LV walls stay disjoint as long as the field is a
contraction-free map, which ``CohortSpec.validate`` keeps likely by bounding
amplitude / smoothness.

Volumes carry LV and hippocampus codes plus a thin shell of peripheral codes
(white matter, thalamus, caudate) painted from the class of the nearest LV
vertex, so the peripheral classifier has something to find.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree
from scipy.spatial.transform import Rotation

from .errors import ParameterError
from .mesh import LabeledMesh, Peripheral, Side, Structure, vertex_normals
from .plyio import load_labeled_mesh, save_labeled_mesh
from .template import generate_synthetic_joint_template
from .volume import (
    GridSpec,
    LabelCodes,
    SegmentationVolume,
    load_segmentation,
    save_segmentation,
)
from .voxelize import inside_mask


@dataclass(frozen=True)
class CohortSpec:
    n_subjects: int = 10
    amplitude: float = 3.0  # max displacement over template vertices, mm
    smoothness: float = 15.0  # Gaussian kernel width, mm
    n_controls: int = 24
    rotation_deg: float = 0.0  # max rigid rotation angle
    translation: float = 0.0  # max rigid offset per axis, mm
    dropout_region: str = "inferior"
    dropout_fraction: float = 0.0
    dropout_radius: float = 12.0  # inferior region: LV within this distance of the shared ring, mm
    spacing: float = 1.0
    shell: float = 2.0  # peripheral shell thickness, mm
    group_b: int = 0  # the last group_b subjects form group B
    group_effect: float = 0.0  # outward shift of thalamus-class vertices in group B, mm
    seed: int = 0

    def validate(self):
        if int(self.n_subjects) != self.n_subjects or self.n_subjects < 1:
            raise ParameterError("n_subjects must be an integer >= 1")
        if self.amplitude < 0 or self.smoothness <= 0:
            raise ParameterError("amplitude must be >= 0 and smoothness > 0")
        if self.amplitude > 0.5 * self.smoothness:
            raise ParameterError("amplitude above smoothness / 2 risks a folding deformation")
        if not 0.0 <= self.dropout_fraction <= 1.0:
            raise ParameterError("dropout_fraction must lie in [0, 1]")
        if self.dropout_region != "inferior":
            raise ParameterError("only the 'inferior' dropout region is defined")
        if self.dropout_radius <= 0:
            raise ParameterError("dropout_radius must be positive")
        if self.spacing <= 0 or self.shell < 0:
            raise ParameterError("spacing must be > 0 and shell >= 0")
        if self.n_controls < 1 or self.rotation_deg < 0 or self.translation < 0:
            raise ParameterError("n_controls >= 1, rotation and translation >= 0 required")
        if not 0 <= self.group_b <= self.n_subjects:
            raise ParameterError("group_b must lie in [0, n_subjects]")
        return self


@dataclass
class Subject:
    subject_id: str
    volume: SegmentationVolume
    mesh: LabeledMesh  # ground truth, subject space
    group: str = "A"
    meta: dict = field(default_factory=dict)


def smooth_displacement(points, controls, weights, width):
    """Sum of Gaussian bumps: u(x) = sum_c w_c exp(-|x - c|^2 / (2 width^2))."""
    d2 = ((points[:, None, :] - controls[None]) ** 2).sum(-1)
    return np.exp(-d2 / (2 * width ** 2)) @ weights


def deform_template(template: LabeledMesh, spec: CohortSpec, rng):
    """Ground-truth subject mesh and the rigid motion applied after the smooth field."""
    V = template.vertices
    if spec.amplitude > 0:
        controls = V[rng.choice(len(V), spec.n_controls, replace=False)]
        weights = rng.standard_normal((spec.n_controls, 3))
        u = smooth_displacement(V, controls, weights, spec.smoothness)
        u *= spec.amplitude / np.linalg.norm(u, axis=1).max()
    else:
        rng.standard_normal(spec.n_controls * 4)  # keep the stream aligned across amplitudes
        u = np.zeros_like(V)
    axis = rng.standard_normal(3)
    angle = np.deg2rad(spec.rotation_deg) * rng.uniform(-1, 1)
    R = Rotation.from_rotvec(axis / np.linalg.norm(axis) * angle).as_matrix()
    t = spec.translation * rng.uniform(-1, 1, 3)
    X = V + u
    if angle != 0:
        c = V.mean(0)
        X = (X - c) @ R.T + c
    X = X + t
    return template.with_vertices(X), (R, t)


def apply_group_effect(mesh: LabeledMesh, shift):
    """Move thalamus-class LV vertices outward along the vertex normal by ``shift`` mm."""
    if shift == 0:
        return mesh
    X = mesh.vertices.copy()
    sub = mesh.submesh("lv")
    n = vertex_normals(X[sub.vertex_ids], sub.faces)
    sel = mesh.peripheral[sub.vertex_ids] == Peripheral.THALAMUS
    X[sub.vertex_ids[sel]] += shift * n[sel]
    return mesh.with_vertices(X)


def render_volume(mesh: LabeledMesh, spacing=1.0, shell=2.0, codes: LabelCodes = LabelCodes(),
                  grid: GridSpec | None = None) -> SegmentationVolume:
    """Label volume: peripheral shell first, then LV and hippocampus per side on top."""
    if grid is None:
        grid = GridSpec.around(mesh.vertices, spacing, margin=shell + 3 * spacing)
    labels = np.zeros(grid.dims, dtype=np.int32)
    sides = [Side(s) for s in np.unique(mesh.side)]
    lv_masks, hc_masks = {}, {}
    for sd in sides:
        part, _ = mesh.select_side(sd)
        lv_masks[sd] = inside_mask(part, grid, "lv")
        hc_masks[sd] = inside_mask(part, grid, "hippocampus")
    any_lv = np.zeros(grid.dims, bool)
    for m in lv_masks.values():
        any_lv |= m
    if shell > 0 and any_lv.any():
        dist = ndimage.distance_transform_edt(~any_lv, sampling=grid.spacing)
        ring = (dist > 0) & (dist <= shell)
        idx = np.argwhere(ring)
        lv = mesh.lv_vertex_mask()
        lv_ids = np.flatnonzero(lv)
        _, near = cKDTree(mesh.vertices[lv_ids]).query(grid.index_to_mm(idx))
        vid = lv_ids[near]
        cls = mesh.peripheral[vid]
        side = mesh.side[vid]
        code = np.zeros(len(idx), np.int32)
        for c in (Peripheral.WHITE_MATTER, Peripheral.HIPPOCAMPUS, Peripheral.THALAMUS, Peripheral.CAUDATE):
            paint = Peripheral.WHITE_MATTER if c == Peripheral.HIPPOCAMPUS else c
            for sd in sides:
                sel = (cls == c) & (side == sd)
                code[sel] = codes.peripheral_code(paint, sd)
        # opposite-LV class stays background: the other ventricle is the neighbour there
        labels[tuple(idx.T)] = code
    for sd in sides:
        labels[hc_masks[sd]] = codes.hippocampus[sd]
        labels[lv_masks[sd]] = codes.lv[sd]
    return SegmentationVolume(labels, grid.spacing, grid.origin)


def inferior_region_mask(vol: SegmentationVolume, mesh: LabeledMesh, side, radius,
                         codes: LabelCodes = LabelCodes()):
    """LV voxels of ``side`` within ``radius`` mm of the shared LV/hippocampus ring."""
    side = Side(side)
    idx = np.argwhere(vol.labels == codes.lv[side])
    ring = mesh.vertices[(mesh.structure == Structure.SHARED) & (mesh.side == side)]
    out = np.zeros(vol.dims, bool)
    if not len(idx) or not len(ring):
        return out
    d, _ = cKDTree(ring).query(vol.index_to_mm(idx))
    out[tuple(idx[d <= radius].T)] = True
    return out


def apply_dropout(vol: SegmentationVolume, mesh: LabeledMesh, fraction, radius,
                  codes: LabelCodes = LabelCodes()):
    """Erase the inferior-region LV voxels closest to the LV/hippocampus junction.

    Per side, the ``fraction`` of region voxels nearest the shared ring are set
    to background, which truncates the inferior horn the way a segmentation
    that loses the thin temporal horn does.
    """
    if fraction <= 0:
        return vol
    labels = vol.labels.copy()
    for sd in np.unique(mesh.side):
        idx = np.argwhere(inferior_region_mask(vol, mesh, sd, radius, codes))
        if not len(idx):
            continue
        ring = mesh.vertices[(mesh.structure == Structure.SHARED) & (mesh.side == sd)]
        d, _ = cKDTree(ring).query(vol.index_to_mm(idx))
        order = np.lexsort((np.arange(len(d)), d))
        k = int(round(fraction * len(idx)))
        labels[tuple(idx[order[:k]].T)] = 0
    return SegmentationVolume(labels, vol.spacing, vol.origin)


def synth_cohort(spec: CohortSpec, out_dir=None, template: LabeledMesh | None = None,
                 codes: LabelCodes = LabelCodes()):
    """Generate the cohort; optionally write it to ``out_dir``. Returns a list of Subject."""
    spec.validate()
    template = template if template is not None else generate_synthetic_joint_template()
    subjects = []
    for i in range(spec.n_subjects):
        rng = np.random.default_rng([spec.seed, i])
        mesh, (R, t) = deform_template(template, spec, rng)
        group = "B" if i >= spec.n_subjects - spec.group_b else "A"
        if group == "B":
            mesh = apply_group_effect(mesh, spec.group_effect)
        vol = render_volume(mesh, spec.spacing, spec.shell, codes)
        vol = apply_dropout(vol, mesh, spec.dropout_fraction, spec.dropout_radius, codes)
        meta = {"rotation": R.tolist(), "translation": t.tolist()}
        subjects.append(Subject(f"sub-{i:03d}", vol, mesh, group, meta))
    if out_dir is not None:
        write_cohort(subjects, spec, out_dir, template)
    return subjects


def write_cohort(subjects, spec: CohortSpec, out_dir, template: LabeledMesh):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_labeled_mesh(template, out / "template.ply")
    manifest = {"spec": asdict(spec), "seed": spec.seed, "subjects": []}
    for s in subjects:
        d = out / s.subject_id
        d.mkdir(exist_ok=True)
        save_segmentation(s.volume, d / "seg.json")
        save_labeled_mesh(s.mesh, d / "gt_mesh.ply")
        manifest["subjects"].append({"id": s.subject_id, "group": s.group, **s.meta})
    with open(out / "cohort.json", "w") as fh:
        json.dump(manifest, fh, indent=1)


def read_manifest(cohort_dir):
    with open(Path(cohort_dir) / "cohort.json") as fh:
        return json.load(fh)


def load_subject(cohort_dir, subject_id, with_mesh=True):
    d = Path(cohort_dir) / subject_id
    vol = load_segmentation(d / "seg.json")
    mesh = load_labeled_mesh(d / "gt_mesh.ply") if with_mesh else None
    return vol, mesh
