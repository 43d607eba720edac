"""Point distribution model over fitted LV meshes.

Correspondence comes for free: every fitted mesh keeps the template's vertex
order. Rows are flattened LV (and shared-ring) vertex coordinates, optionally
rigidly co-registered by generalized Procrustes (no scaling).
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from .errors import FormatError, InputError, ParameterError
from .mesh import LabeledMesh, Side
from .target import kabsch

MODEL_MAGIC = b"LVSSM\x00\x01\x00"


@dataclass
class ShapeMatrix:
    data: np.ndarray  # (N, 3V) mm
    subject_ids: list
    vertex_ids: np.ndarray  # template indices of the modeled vertices
    procrustes: bool

    def __post_init__(self):
        self.data = np.asarray(self.data, float)
        if self.data.ndim != 2 or self.data.shape[1] != 3 * len(self.vertex_ids):
            raise InputError("shape matrix rows must hold 3 coordinates per modeled vertex")
        if not np.isfinite(self.data).all():
            raise InputError("shape matrix has non-finite entries")

    @property
    def n_subjects(self):
        return self.data.shape[0]

    def shapes(self):
        return self.data.reshape(self.n_subjects, -1, 3)


@dataclass
class ShapeModel:
    mean: np.ndarray  # (3V,)
    modes: np.ndarray  # (k, 3V) orthonormal rows
    eigenvalues: np.ndarray  # (k,) descending, mm^2
    total_variance: float
    vertex_ids: np.ndarray
    procrustes: bool = True

    @property
    def n_modes(self):
        return len(self.eigenvalues)

    def reconstruct(self, coefficients):
        c = np.asarray(coefficients, float)
        return self.mean + c @ self.modes[: c.shape[-1]]

    def project(self, rows, k=None):
        k = self.n_modes if k is None else k
        return (np.asarray(rows, float) - self.mean) @ self.modes[:k].T


def generalized_procrustes(shapes, max_iters=100, tol=1e-10):
    """Rigidly align (N, V, 3) shapes to their evolving mean; returns aligned copies.

    The reference starts as the first shape; the mean is re-centred each pass
    so the result does not drift. Converges when the mean moves less than tol.
    """
    X = np.array(shapes, float)
    mean = X[0] - X[0].mean(0)
    for _ in range(max_iters):
        for i in range(len(X)):
            R, t = kabsch(X[i], mean)
            X[i] = X[i] @ R.T + t
        new = X.mean(0)
        new -= new.mean(0)
        R, _ = kabsch(new, mean)
        new = new @ R.T
        shift = np.abs(new - mean).max()
        mean = new
        if shift < tol:
            break
    return X


def build_shape_matrix(meshes, procrustes=True, subject_ids=None, side=None) -> ShapeMatrix:
    """Rows of LV + shared vertex coordinates (hippocampus excluded), one per mesh.

    ``side`` restricts the model to one hemisphere; both are modeled jointly by default.
    """
    meshes = list(meshes)
    if not meshes:
        raise InputError("no meshes given")
    ids = list(subject_ids) if subject_ids is not None else [f"{i:03d}" for i in range(len(meshes))]
    if len(ids) != len(meshes):
        raise InputError("one subject id per mesh required")
    ref = meshes[0]
    for sid, m in zip(ids, meshes):
        if m.n_vertices != ref.n_vertices or m.faces.shape != ref.faces.shape \
                or not np.array_equal(m.faces, ref.faces) or not np.array_equal(m.structure, ref.structure):
            raise InputError(f"subject {sid}: mesh topology differs from the template")
    keep = ref.lv_vertex_mask()
    if side is not None:
        keep &= ref.side == int(Side(side))
    vids = np.flatnonzero(keep)
    if not len(vids):
        raise InputError("no LV vertices to model")
    shapes = np.stack([m.vertices[vids] for m in meshes])
    if procrustes and len(meshes) > 1:
        shapes = generalized_procrustes(shapes)
    return ShapeMatrix(shapes.reshape(len(meshes), -1), ids, vids, bool(procrustes))


def pca_fit(matrix: ShapeMatrix) -> ShapeModel:
    """PCA by SVD of the centred rows; k = min(N - 1, 3V) modes, sample covariance."""
    X = matrix.data
    n = X.shape[0]
    if n < 2:
        raise InputError("PCA needs at least two shapes")
    mean = X.mean(0)
    Xc = X - mean
    _, s, Vt = np.linalg.svd(Xc, full_matrices=False)
    k = min(n - 1, X.shape[1])
    ev = s[:k] ** 2 / (n - 1)
    total = float((Xc ** 2).sum() / (n - 1))
    return ShapeModel(mean, Vt[:k].copy(), ev, total, matrix.vertex_ids.copy(), matrix.procrustes)


def sample_mode_shape(model: ShapeModel, j, c):
    """mean + c * sigma_j * mode_j (j zero-based)."""
    if not 0 <= j < model.n_modes:
        raise ParameterError(f"mode {j} outside [0, {model.n_modes})")
    return model.mean + c * np.sqrt(model.eigenvalues[j]) * model.modes[j]


def compactness(model: ShapeModel, k):
    """Fraction of total variance captured by the first k modes."""
    if not 0 <= k <= model.n_modes:
        raise ParameterError(f"k must lie in [0, {model.n_modes}]")
    if model.total_variance == 0:
        return 1.0
    return float(min(1.0, model.eigenvalues[:k].sum() / model.total_variance))


def _mean_vertex_distance(a, b):
    """Mean per-vertex Euclidean distance between flattened shapes (broadcasts over rows)."""
    d = (np.asarray(a) - np.asarray(b)).reshape(*np.broadcast_shapes(np.shape(a), np.shape(b))[:-1], -1, 3)
    return np.linalg.norm(d, axis=-1).mean(-1)


def generalization(matrix: ShapeMatrix, k):
    """Leave-one-out reconstruction error (mm) with k modes, averaged over subjects.

    k is capped at the N - 2 modes a leave-one-out model has.
    """
    X = matrix.data
    n = X.shape[0]
    if n < 3:
        raise InputError("generalization needs at least three shapes")
    if k < 0:
        raise ParameterError("k must be >= 0")
    errs = []
    for i in range(n):
        rest = ShapeMatrix(np.delete(X, i, axis=0), [], matrix.vertex_ids, matrix.procrustes)
        m = pca_fit(rest)
        kk = min(k, m.n_modes)
        rec = m.reconstruct(m.project(X[i], kk)) if kk else m.mean
        errs.append(_mean_vertex_distance(rec, X[i]))
    return float(np.mean(errs))


def specificity(model: ShapeModel, matrix: ShapeMatrix, k, n_samples=1000, seed=0):
    """Mean over random model instances of the distance (mm) to the closest training shape.

    Coefficients of the first k modes are drawn from N(0, sigma_j^2).
    """
    if n_samples < 1:
        raise ParameterError("n_samples must be >= 1")
    if not 0 <= k <= model.n_modes:
        raise ParameterError(f"k must lie in [0, {model.n_modes}]")
    rng = np.random.default_rng(seed)
    coef = rng.standard_normal((n_samples, k)) * np.sqrt(model.eigenvalues[:k])
    samples = model.mean + coef @ model.modes[:k] if k else np.tile(model.mean, (n_samples, 1))
    best = np.full(n_samples, np.inf)
    for row in matrix.data:
        best = np.minimum(best, _mean_vertex_distance(samples, row))
    return float(best.mean())


def model_metrics(model: ShapeModel, matrix: ShapeMatrix, k_max, n_samples=1000, seed=0):
    """Rows (k, compactness, generalization_mm, specificity_mm) for k = 1..k_max."""
    k_max = min(k_max, model.n_modes)
    rows = []
    for k in range(1, k_max + 1):
        g = generalization(matrix, k) if matrix.n_subjects >= 3 else float("nan")
        rows.append((k, compactness(model, k), g, specificity(model, matrix, k, n_samples, seed)))
    return rows


def write_metrics_csv(rows, path):
    with open(path, "w") as fh:
        fh.write("k,compactness,generalization_mm,specificity_mm\n")
        for k, c, g, s in rows:
            fh.write(f"{k},{c!r},{g!r},{s!r}\n")


def save_model(model: ShapeModel, path, extra=None):
    """Binary model: magic, uint32 header length, JSON header, then float64 LE arrays
    mean (3V), modes (k x 3V), eigenvalues (k)."""
    header = {
        "n_coords": int(model.mean.size),
        "n_modes": int(model.n_modes),
        "total_variance": float(model.total_variance),
        "procrustes": bool(model.procrustes),
        "vertex_ids": model.vertex_ids.tolist(),
        **(extra or {}),
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MODEL_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for arr in (model.mean, model.modes, model.eigenvalues):
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_model(path) -> ShapeModel:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[: len(MODEL_MAGIC)] != MODEL_MAGIC:
        raise FormatError(f"{path}: not a shape model file")
    off = len(MODEL_MAGIC)
    (hlen,) = struct.unpack_from("<I", raw, off)
    off += 4
    try:
        header = json.loads(raw[off: off + hlen])
    except ValueError as exc:
        raise FormatError(f"{path}: bad model header") from exc
    off += hlen
    n, k = header["n_coords"], header["n_modes"]
    need = 8 * (n + k * n + k)
    if len(raw) - off != need:
        raise FormatError(f"{path}: expected {need} payload bytes, found {len(raw) - off}")
    arr = np.frombuffer(raw, dtype="<f8", offset=off).astype(np.float64)
    mean, modes, ev = arr[:n], arr[n: n + k * n].reshape(k, n), arr[n + k * n:]
    return ShapeModel(mean, modes, ev, header["total_variance"], np.asarray(header["vertex_ids"], np.int64),
                      header["procrustes"])


def shape_to_mesh(template: LabeledMesh, model_or_ids, shape) -> LabeledMesh:
    """The modeled vertices of ``template`` (with their faces) placed at ``shape``."""
    vids = getattr(model_or_ids, "vertex_ids", model_or_ids)
    keep = np.zeros(template.n_vertices, bool)
    keep[vids] = True
    fmask = keep[template.faces].all(axis=1)
    remap = np.full(template.n_vertices, -1, np.int64)
    remap[vids] = np.arange(len(vids))
    return LabeledMesh(np.asarray(shape, float).reshape(-1, 3), remap[template.faces[fmask]],
                       template.structure[vids], template.peripheral[vids], template.side[vids])
