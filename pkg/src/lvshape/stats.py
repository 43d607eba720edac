"""Vertex-wise two-group shape statistics.

The per-vertex feature is the displacement of a subject's vertex from the
pooled mean shape, projected on the pooled mean vertex normal (or its
Euclidean length). Groups are compared with the Wilcoxon rank-sum
(Mann-Whitney) test; Shapiro-Wilk p-values are recorded per group so the
choice of a rank test can be justified from the data.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import stats as sps

from .errors import InputError, ParameterError
from .mesh import LabeledMesh, vertex_normals

EXACT_MAX_N = 12  # exact rank-sum enumeration up to this pooled size


def shapiro_wilk(samples):
    """Shapiro-Wilk W and p-value (Royston's AS R94 approximation, as in scipy)."""
    x = np.asarray(samples, float).ravel()
    if not 3 <= len(x) <= 5000:
        raise InputError(f"Shapiro-Wilk needs 3..5000 samples, got {len(x)}")
    if not np.isfinite(x).all():
        raise InputError("non-finite sample")
    if np.ptp(x) == 0:
        raise InputError("Shapiro-Wilk is undefined for constant samples")
    res = sps.shapiro(x)
    return float(res.statistic), float(res.pvalue)


def _groups(a, b):
    a = np.asarray(a, float).ravel()
    b = np.asarray(b, float).ravel()
    if not len(a) or not len(b):
        raise InputError("rank test needs two nonempty groups")
    if not (np.isfinite(a).all() and np.isfinite(b).all()):
        raise InputError("non-finite sample")
    return a, b


def rank_sum_method(a, b):
    """'exact' when the pooled size is <= 12 and there are no ties, else 'asymptotic'."""
    a, b = _groups(a, b)
    pooled = np.concatenate([a, b])
    if len(pooled) <= EXACT_MAX_N and len(np.unique(pooled)) == len(pooled):
        return "exact"
    return "asymptotic"


def rank_sum_test(a, b, method="auto"):
    """Two-sided Wilcoxon rank-sum p-value.

    ``method='auto'`` uses the exact null distribution for small tie-free
    samples and otherwise the normal approximation with tie-corrected variance
    and a 0.5 continuity correction; 'exact' or 'asymptotic' force one of them.
    """
    a, b = _groups(a, b)
    if method == "auto":
        method = rank_sum_method(a, b)
    elif method not in ("exact", "asymptotic"):
        raise ParameterError("method must be 'auto', 'exact' or 'asymptotic'")
    res = sps.mannwhitneyu(a, b, alternative="two-sided", use_continuity=True, method=method)
    return float(min(1.0, res.pvalue))


def signed_rank_test(a, b):
    """Two-sided Wilcoxon signed-rank p-value for paired samples of equal length.

    Zero differences are dropped; all-zero differences give p = 1.
    """
    a, b = _groups(a, b)
    if len(a) != len(b):
        raise InputError("paired test needs equal-length groups")
    d = a - b
    if not np.any(d):
        return 1.0
    res = sps.wilcoxon(d, zero_method="wilcox", alternative="two-sided")
    return float(min(1.0, res.pvalue))


def benjamini_hochberg(p):
    """BH-adjusted p-values (same order as the input)."""
    p = np.asarray(p, float)
    if not len(p):
        return p.copy()
    return sps.false_discovery_control(p, method="bh")


@dataclass
class VertexStatMap:
    vertex_ids: np.ndarray  # template vertex index of each tested LV vertex
    peripheral: np.ndarray
    median_a: np.ndarray  # per-group feature medians
    median_b: np.ndarray
    shapiro_p_a: np.ndarray  # nan where the test is undefined (n < 3 or constant)
    shapiro_p_b: np.ndarray
    p: np.ndarray  # raw or BH-adjusted, per ``correction``
    flag: np.ndarray
    alpha: float
    feature: str
    test: str
    correction: str

    def __len__(self):
        return len(self.vertex_ids)

    def flagged(self):
        return self.vertex_ids[self.flag]


FEATURES = ("normal", "euclidean")
TESTS = ("rank-sum", "signed-rank")
CORRECTIONS = ("none", "bh")


def _stack(meshes, ref: LabeledMesh, name):
    out = []
    for i, m in enumerate(meshes):
        if m.n_vertices != ref.n_vertices or not np.array_equal(m.faces, ref.faces):
            raise InputError(f"{name} mesh {i} does not share the template topology")
        out.append(m.vertices)
    return np.stack(out)


def vertex_features(meshes_a, meshes_b, feature="normal"):
    """Per-subject, per-LV-vertex scalar features relative to the pooled mean shape.

    Returns (lv vertex ids, features of A (nA, n), features of B (nB, n)).
    """
    if feature not in FEATURES:
        raise ParameterError(f"feature must be one of {FEATURES}")
    if not len(meshes_a) or not len(meshes_b):
        raise InputError("both groups need at least one mesh")
    ref = meshes_a[0]
    A = _stack(meshes_a, ref, "group A")
    B = _stack(meshes_b, ref, "group B")
    sub = ref.submesh("lv")
    ids = sub.vertex_ids
    mean = np.concatenate([A, B]).mean(axis=0)[ids]
    dA, dB = A[:, ids] - mean, B[:, ids] - mean
    if feature == "normal":
        n = vertex_normals(mean, sub.faces)
        return ids, (dA * n).sum(-1), (dB * n).sum(-1)
    return ids, np.linalg.norm(dA, axis=-1), np.linalg.norm(dB, axis=-1)


def _sw_or_nan(x):
    try:
        return shapiro_wilk(x)[1]
    except InputError:
        return np.nan


def vertex_group_test(meshes_a, meshes_b, alpha=0.1, feature="normal", test="rank-sum",
                      correction="none", ids_a=None, ids_b=None) -> VertexStatMap:
    """Test every LV vertex for a group difference; flag p <= alpha.

    When subject IDs are given, each group is sorted by ID first so the result
    does not depend on input order.
    """
    if not 0 <= alpha <= 1:
        raise ParameterError("alpha must lie in [0, 1]")
    if test not in TESTS or correction not in CORRECTIONS:
        raise ParameterError(f"test must be in {TESTS}, correction in {CORRECTIONS}")
    meshes_a, meshes_b = list(meshes_a), list(meshes_b)
    if ids_a is not None:
        meshes_a = [m for _, m in sorted(zip(ids_a, meshes_a), key=lambda t: t[0])]
    if ids_b is not None:
        meshes_b = [m for _, m in sorted(zip(ids_b, meshes_b), key=lambda t: t[0])]
    if ids_a is not None and ids_b is not None and set(ids_a) & set(ids_b):
        raise InputError("groups must be disjoint")
    vids, fa, fb = vertex_features(meshes_a, meshes_b, feature)
    fn = rank_sum_test if test == "rank-sum" else signed_rank_test
    n = len(vids)
    p = np.empty(n)
    swa = np.empty(n)
    swb = np.empty(n)
    for j in range(n):
        p[j] = fn(fa[:, j], fb[:, j])
        swa[j] = _sw_or_nan(fa[:, j])
        swb[j] = _sw_or_nan(fb[:, j])
    if correction == "bh":
        p = benjamini_hochberg(p)
    p = np.clip(p, 0.0, 1.0)
    ref = meshes_a[0]
    return VertexStatMap(
        vids, ref.peripheral[vids].copy(), np.median(fa, axis=0), np.median(fb, axis=0),
        swa, swb, p, p <= alpha, float(alpha), feature, test, correction,
    )


def write_stat_csv(smap: VertexStatMap, path):
    """vertex_id, peri_class, p, flag; floats with full precision for byte-stable reruns."""
    with open(path, "w") as fh:
        fh.write("vertex_id,peri_class,p,flag\n")
        for v, c, p, f in zip(smap.vertex_ids.tolist(), smap.peripheral.tolist(),
                              smap.p.tolist(), smap.flag.tolist()):
            fh.write(f"{v},{c},{p!r},{int(f)}\n")
