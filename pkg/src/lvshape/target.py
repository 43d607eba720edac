"""Target point clouds from label volumes and their alignment to template space."""
from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from scipy.spatial import cKDTree

from .errors import EmptyTargetError, FormatError, GeometryError, InputError, ParameterError
from .mesh import NO_PERIPHERAL, LabeledMesh, Peripheral, Side, Structure
from .volume import LabelCodes, SegmentationVolume

# higher wins when several peripheral structures touch one LV voxel
PERIPHERAL_PRIORITY = (
    Peripheral.HIPPOCAMPUS,
    Peripheral.OPPOSITE_LV,
    Peripheral.THALAMUS,
    Peripheral.CAUDATE,
    Peripheral.WHITE_MATTER,
)


@dataclass
class LabeledPointCloud:
    points: np.ndarray
    source: np.ndarray  # Structure.LV or Structure.HIPPOCAMPUS
    peripheral: np.ndarray  # -1 for hippocampus points
    side: np.ndarray

    def __post_init__(self):
        self.points = np.ascontiguousarray(self.points, dtype=np.float64).reshape(-1, 3)
        n = len(self.points)
        self.source = np.asarray(self.source, dtype=np.uint8).reshape(n)
        self.peripheral = np.asarray(self.peripheral, dtype=np.int8).reshape(n)
        self.side = np.asarray(self.side, dtype=np.uint8).reshape(n)

    def __len__(self):
        return len(self.points)

    def validate(self):
        if not np.isfinite(self.points).all():
            raise InputError("non-finite point coordinates")
        if not np.isin(self.source, (Structure.LV, Structure.HIPPOCAMPUS)).all():
            raise InputError("point source must be LV or hippocampus")
        is_lv = self.source == Structure.LV
        if ((self.peripheral != NO_PERIPHERAL) != is_lv).any():
            raise InputError("peripheral class must be present iff the point is an LV point")
        return self

    def subset(self, mask):
        return LabeledPointCloud(
            self.points[mask], self.source[mask], self.peripheral[mask], self.side[mask]
        )

    def with_points(self, points):
        return LabeledPointCloud(points, self.source.copy(), self.peripheral.copy(), self.side.copy())

    @staticmethod
    def concat(clouds):
        return LabeledPointCloud(
            np.vstack([c.points for c in clouds]),
            np.concatenate([c.source for c in clouds]),
            np.concatenate([c.peripheral for c in clouds]),
            np.concatenate([c.side for c in clouds]),
        )


def sample_mesh_cloud(mesh: LabeledMesh, spacing=None) -> LabeledPointCloud:
    """Labelled target sampled straight from a mesh's LV and hippocampus surfaces.

    With ``spacing=None`` the samples are the submesh vertices themselves;
    otherwise sub-triangle centroids (see ``metrics.sample_surface``). An LV
    sample takes the peripheral class and side of the nearest LV vertex.
    """
    from .metrics import sample_surface

    parts = []
    for part, src in (("lv", Structure.LV), ("hippocampus", Structure.HIPPOCAMPUS)):
        sub = mesh.submesh(part)
        if not len(sub.faces):
            continue
        V = mesh.vertices[sub.vertex_ids]
        P = V if spacing is None else sample_surface(V, sub.faces, spacing)[0]
        _, near = cKDTree(V).query(P)
        vid = sub.vertex_ids[near]
        peri = mesh.peripheral[vid] if src == Structure.LV else np.full(len(P), NO_PERIPHERAL)
        parts.append(LabeledPointCloud(P, np.full(len(P), src), peri, mesh.side[vid]))
    if not parts:
        raise EmptyTargetError("mesh has no LV or hippocampus faces")
    return LabeledPointCloud.concat(parts)


def save_cloud_csv(cloud: LabeledPointCloud, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x", "y", "z", "source", "peri", "side"])
        for (x, y, z), s, p, sd in zip(
            cloud.points.tolist(), cloud.source.tolist(), cloud.peripheral.tolist(), cloud.side.tolist()
        ):
            w.writerow([repr(x), repr(y), repr(z), s, p, sd])


def load_cloud_csv(path) -> LabeledPointCloud:
    pts, src, peri, side = [], [], [], []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["x", "y", "z", "source", "peri", "side"]:
            raise FormatError("cloud CSV header must be x,y,z,source,peri,side", record=1)
        for line, row in enumerate(reader, start=2):
            try:
                pts.append([float(v) for v in row[:3]])
                src.append(int(row[3]))
                peri.append(int(row[4]))
                side.append(int(row[5]))
            except (ValueError, IndexError):
                raise FormatError("malformed cloud row", record=line) from None
    cloud = LabeledPointCloud(np.array(pts).reshape(-1, 3), src, peri, side)
    try:
        return cloud.validate()
    except InputError as exc:
        raise FormatError(str(exc)) from None


# ---------------------------------------------------------------- extraction


def _code_source(code, codes: LabelCodes):
    for side in (Side.LEFT, Side.RIGHT):
        if code == codes.lv[side]:
            return Structure.LV, side
        if code == codes.hippocampus[side]:
            return Structure.HIPPOCAMPUS, side
    raise InputError(f"label code {code} is neither an LV nor a hippocampus code")


def boundary_mask(mask):
    """Voxels of ``mask`` with at least one 6-neighbour outside it (volume border counts as outside)."""
    padded = np.pad(mask, 1, constant_values=False)
    interior = padded[1:-1, 1:-1, 1:-1].copy()
    for axis in range(3):
        for shift in (-1, 1):
            interior &= np.roll(padded, shift, axis=axis)[1:-1, 1:-1, 1:-1]
    return mask & ~interior


def extract_boundary_points(vol: SegmentationVolume, label_codes, codes: LabelCodes = LabelCodes()):
    """Voxel-centre points (mm) of boundary voxels carrying any of ``label_codes``."""
    label_codes = [int(c) for c in np.atleast_1d(label_codes)]
    if not label_codes:
        raise ParameterError("label_codes must be nonempty")
    mask = np.isin(vol.labels, label_codes)
    idx = np.argwhere(boundary_mask(mask))
    if not len(idx):
        raise EmptyTargetError(f"no voxels carry label codes {label_codes}")
    lab = vol.labels[tuple(idx.T)]
    source = np.empty(len(idx), np.uint8)
    side = np.empty(len(idx), np.uint8)
    for code in np.unique(lab):
        s, sd = _code_source(int(code), codes)
        source[lab == code] = s
        side[lab == code] = sd
    peri = np.where(source == Structure.LV, Peripheral.WHITE_MATTER, NO_PERIPHERAL)
    return LabeledPointCloud(vol.index_to_mm(idx), source, peri, side)


def _point_voxels(cloud, vol):
    idx = np.floor((cloud.points - np.asarray(vol.origin)) / np.asarray(vol.spacing)).astype(np.int64)
    return np.clip(idx, 0, np.asarray(vol.dims) - 1)


def _rank_tables(codes, maxcode):
    tables = np.zeros((2, maxcode + 1), dtype=np.int8)
    for side in (Side.LEFT, Side.RIGHT):
        for rank, cls in enumerate(reversed(PERIPHERAL_PRIORITY), start=1):
            c = codes.peripheral_code(cls, side)
            if c <= maxcode:
                tables[side, c] = rank
    return tables


def _best_rank(labels, idx, side, offsets, tables):
    dims = np.asarray(labels.shape)
    best = np.zeros(len(idx), dtype=np.int8)
    for off in offsets:
        q = idx + off
        ok = ((q >= 0) & (q < dims)).all(axis=1)
        code = np.zeros(len(idx), dtype=np.int64)
        qc = q[ok]
        code[ok] = labels[qc[:, 0], qc[:, 1], qc[:, 2]]
        best = np.maximum(best, tables[side, code])
    return best


BLOCK_2 = np.array([(a, b, c) for a in (0, 1) for b in (0, 1) for c in (0, 1)])
BLOCK_3 = np.array([(a, b, c) for a in (-1, 0, 1) for b in (-1, 0, 1) for c in (-1, 0, 1)])


def classify_peripheral_points(cloud: LabeledPointCloud, vol: SegmentationVolume,
                               codes: LabelCodes = LabelCodes()) -> LabeledPointCloud:
    """Assign each LV point the peripheral class found in its 2x2x2 block (anchored at the
    point's voxel, extending +1 along each axis); fall back to the centred 3x3x3
    neighbourhood, then to white matter."""
    out = cloud.with_points(cloud.points.copy())
    lv = np.flatnonzero(cloud.source == Structure.LV)
    if not len(lv):
        return out
    maxcode = int(max(vol.labels.max(initial=0), 1))
    tables = _rank_tables(codes, maxcode)
    idx = _point_voxels(cloud.subset(lv), vol)
    side = cloud.side[lv].astype(np.int64)
    rank = _best_rank(vol.labels, idx, side, BLOCK_2, tables)
    empty = rank == 0
    if empty.any():
        rank[empty] = _best_rank(vol.labels, idx[empty], side[empty], BLOCK_3, tables)
    ranked = np.array([Peripheral.WHITE_MATTER] + list(reversed(PERIPHERAL_PRIORITY)), dtype=np.int8)
    out.peripheral[lv] = ranked[rank]
    return out


# ---------------------------------------------------------------- alignment


@dataclass
class RigidTransform:
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)

    def apply(self, points):
        return np.asarray(points) @ self.rotation.T + self.translation

    def inverse(self):
        return RigidTransform(self.rotation.T, -self.rotation.T @ self.translation)

    def angle(self):
        c = (np.trace(self.rotation) - 1) / 2
        return float(np.arccos(np.clip(c, -1.0, 1.0)))

    def to_dict(self):
        return {"rotation": self.rotation.tolist(), "translation": self.translation.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(np.array(d["rotation"]), np.array(d["translation"]))


def kabsch(source, target, weights=None):
    """Least-squares rotation R and translation t with R @ source_i + t ~ target_i."""
    source = np.asarray(source, float)
    target = np.asarray(target, float)
    w = np.ones(len(source)) if weights is None else np.asarray(weights, float)
    w = w / w.sum()
    cs = w @ source
    ct = w @ target
    H = (source - cs).T @ ((target - ct) * w[:, None])
    U, _, Vt = np.linalg.svd(H)
    d = np.sign(np.linalg.det(Vt.T @ U.T))
    D = np.diag([1.0, 1.0, d if d != 0 else 1.0])
    R = Vt.T @ D @ U.T
    return R, ct - R @ cs


def _check_spread(points, name):
    points = np.asarray(points, float)
    if len(points) < 3:
        raise GeometryError(f"{name} needs at least 3 points")
    s = np.linalg.svd(points - points.mean(0), compute_uv=False)
    if not s[0] > 0 or s[1] <= 1e-9 * s[0]:
        raise GeometryError(f"{name} points are collinear")


def symmetric_nn_mse(a, b, tree_a=None, tree_b=None):
    tree_a = tree_a or cKDTree(a)
    tree_b = tree_b or cKDTree(b)
    da, _ = tree_b.query(a)
    db, _ = tree_a.query(b)
    return 0.5 * (np.mean(da ** 2) + np.mean(db ** 2))


def icp_rigid(moving, fixed, max_iters=100, tol=1e-8) -> RigidTransform:
    """Point-to-point ICP; the returned transform maps ``moving`` onto ``fixed``.

    Stops once the matched mean-squared distance improves by less than ``tol``.
    Falls back to the identity if the result would not reduce the symmetric
    nearest-neighbour MSE.
    """
    moving = np.asarray(moving, float)
    fixed = np.asarray(fixed, float)
    _check_spread(moving, "moving")
    _check_spread(fixed, "fixed")
    tree = cKDTree(fixed)
    T = RigidTransform()
    prev = np.inf
    for _ in range(max_iters):
        d, idx = tree.query(T.apply(moving))
        mse = float(np.mean(d ** 2))
        if prev - mse < tol:
            break
        prev = mse
        R, t = kabsch(moving, fixed[idx])
        T = RigidTransform(R, t)
    if symmetric_nn_mse(T.apply(moving), fixed, tree_b=tree) > symmetric_nn_mse(moving, fixed, tree_b=tree):
        return RigidTransform()
    return T


@dataclass
class AnisotropicScale:
    factors: np.ndarray = field(default_factory=lambda: np.ones(3))
    center: np.ndarray = field(default_factory=lambda: np.zeros(3))
    bounds_hit: tuple = (False, False, False)

    def __post_init__(self):
        self.factors = np.asarray(self.factors, dtype=np.float64).reshape(3)
        self.center = np.asarray(self.center, dtype=np.float64).reshape(3)
        if ((self.factors < 0.2) | (self.factors > 5.0)).any():
            raise ParameterError("scale factors must lie in [0.2, 5.0]")

    @property
    def warning(self):
        return any(self.bounds_hit)

    def apply(self, points):
        return self.center + (np.asarray(points) - self.center) * self.factors

    def invert(self, points):
        return self.center + (np.asarray(points) - self.center) / self.factors

    def apply_to_mesh(self, mesh: LabeledMesh) -> LabeledMesh:
        return mesh.with_vertices(self.apply(mesh.vertices))

    def to_dict(self):
        return {
            "factors": self.factors.tolist(),
            "center": self.center.tolist(),
            "bounds_hit": list(self.bounds_hit),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(np.array(d["factors"]), np.array(d["center"]), tuple(d.get("bounds_hit", (False,) * 3)))


_GOLDEN = (np.sqrt(5) - 1) / 2


def _golden(f, lo, hi, tol):
    a, b = lo, hi
    c = b - _GOLDEN * (b - a)
    d = a + _GOLDEN * (b - a)
    fc, fd = f(c), f(d)
    while b - a > tol:
        if fc <= fd:
            b, d, fd = d, c, fc
            c = b - _GOLDEN * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + _GOLDEN * (b - a)
            fd = f(d)
    x = 0.5 * (a + b)
    # the bracket never contains its ends; compare against them explicitly
    cands = [(f(x), x), (f(lo), lo), (f(hi), hi)]
    return min(cands)[1]


def fit_anisotropic_scale(template_points, target_points, bounds=(0.5, 2.0), sweeps=2, tol=1e-4):
    """Per-axis scale about the template centroid minimizing symmetric squared Chamfer distance.

    Coordinate descent, one golden-section search per axis per sweep. Axes ending
    on a bound are flagged and a warning is emitted.
    """
    template_points = np.asarray(template_points, float)
    target_points = np.asarray(target_points, float)
    if not len(template_points) or not len(target_points):
        raise EmptyTargetError("scale fitting needs nonempty point sets")
    center = template_points.mean(0)
    rel = template_points - center
    target_tree = cKDTree(target_points)

    def cost(s):
        p = center + rel * s
        d1, _ = target_tree.query(p)
        d2, _ = cKDTree(p).query(target_points)
        return float(np.mean(d1 ** 2) + np.mean(d2 ** 2))

    s = np.ones(3)
    for _ in range(sweeps):
        for axis in range(3):
            def f(v, axis=axis):
                trial = s.copy()
                trial[axis] = v
                return cost(trial)

            s[axis] = _golden(f, bounds[0], bounds[1], tol)
    hit = tuple(bool(abs(v - bounds[0]) < 2 * tol or abs(v - bounds[1]) < 2 * tol) for v in s)
    for axis in range(3):
        if hit[axis]:
            s[axis] = bounds[0] if abs(s[axis] - bounds[0]) < abs(s[axis] - bounds[1]) else bounds[1]
    if any(hit):
        warnings.warn(f"anisotropic scale hit the search bounds: {s.tolist()}", RuntimeWarning)
    return AnisotropicScale(s, center, hit)


class PreparedTarget(NamedTuple):
    cloud: LabeledPointCloud
    transform: RigidTransform
    scale: AnisotropicScale


def prepare_target(vol: SegmentationVolume, side, template: LabeledMesh,
                   codes: LabelCodes = LabelCodes(), icp_iters=100, icp_tol=1e-8) -> PreparedTarget:
    """Extract, classify and align the target of one side.

    ICP runs on the combined LV points of every side present in both the volume
    and the template. The returned cloud is the requested side in the rigidly
    aligned template frame; ``scale`` is meant for the template (about its
    side centroid) before fitting.
    """
    side = Side(side)
    lv_clouds = {}
    for sd in (Side.LEFT, Side.RIGHT):
        if (vol.labels == codes.lv[sd]).any():
            lv_clouds[sd] = extract_boundary_points(vol, [codes.lv[sd]], codes)
    if side not in lv_clouds:
        raise EmptyTargetError(f"volume has no {side.name.lower()} LV voxels")
    hc = extract_boundary_points(vol, [codes.hippocampus[side]], codes)
    lv_side = classify_peripheral_points(lv_clouds[side], vol, codes)

    sides = [sd for sd in lv_clouds if (template.side == sd).any()]
    fixed = template.vertices[template.lv_vertex_mask() & np.isin(template.side, sides)]
    moving = np.vstack([lv_clouds[sd].points for sd in sides])
    T = icp_rigid(moving, fixed, icp_iters, icp_tol)

    cloud = LabeledPointCloud.concat([lv_side, hc])
    cloud = cloud.with_points(T.apply(cloud.points))
    tmpl_pts = template.vertices[template.side == side]
    scale = fit_anisotropic_scale(tmpl_pts, cloud.points)
    return PreparedTarget(cloud, T, scale)


def save_transforms(prepared: PreparedTarget, path, extra=None):
    data = {"rigid": prepared.transform.to_dict(), "scale": prepared.scale.to_dict()}
    if extra:
        data.update(extra)
    with open(path, "w") as fh:
        json.dump(data, fh, indent=1)


def load_transforms(path):
    with open(path) as fh:
        d = json.load(fh)
    return RigidTransform.from_dict(d["rigid"]), AnisotropicScale.from_dict(d["scale"])
