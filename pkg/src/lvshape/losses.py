"""Distance and regularization losses with analytic gradients.

Every ``*_grad`` function returns ``(value, gradient)`` with the gradient taken
with respect to the vertex array it was given. Nearest-neighbour and
nearest-triangle assignments are recomputed on every call; the gradient of a
min-distance term is the gradient at the current minimizer.
"""
from __future__ import annotations

import numba
import numpy as np
from scipy.spatial import cKDTree

from .errors import EmptyTargetError, GeometryError
from .mesh import COT_CLAMP, edge_face_pairs, unique_edges

# ---------------------------------------------------------------- point/triangle


def closest_point_barycentric(p, a, b, c):
    """Barycentric weights (..., 3) of the point of triangle abc closest to p (Voronoi-region test)."""
    ab = b - a
    ac = c - a
    ap = p - a
    d1 = np.einsum("...i,...i->...", ab, ap)
    d2 = np.einsum("...i,...i->...", ac, ap)
    bp = p - b
    d3 = np.einsum("...i,...i->...", ab, bp)
    d4 = np.einsum("...i,...i->...", ac, bp)
    cp = p - c
    d5 = np.einsum("...i,...i->...", ab, cp)
    d6 = np.einsum("...i,...i->...", ac, cp)
    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2

    with np.errstate(divide="ignore", invalid="ignore"):
        denom = va + vb + vc
        v = vb / denom
        w = vc / denom
        bary = np.stack([1 - v - w, v, w], axis=-1)
        # regions in reverse precedence so earlier tests overwrite later ones
        t = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        m = (va <= 0) & (d4 - d3 >= 0) & (d5 - d6 >= 0)
        bary = np.where(m[..., None], np.stack([0 * t, 1 - t, t], -1), bary)
        t = d2 / (d2 - d6)
        m = (vb <= 0) & (d2 >= 0) & (d6 <= 0)
        bary = np.where(m[..., None], np.stack([1 - t, 0 * t, t], -1), bary)
        m = (d6 >= 0) & (d5 <= d6)
        bary = np.where(m[..., None], np.array([0.0, 0.0, 1.0]), bary)
        t = d1 / (d1 - d3)
        m = (vc <= 0) & (d1 >= 0) & (d3 <= 0)
        bary = np.where(m[..., None], np.stack([1 - t, t, 0 * t], -1), bary)
        m = (d3 >= 0) & (d4 <= d3)
        bary = np.where(m[..., None], np.array([0.0, 1.0, 0.0]), bary)
        m = (d1 <= 0) & (d2 <= 0)
        bary = np.where(m[..., None], np.array([1.0, 0.0, 0.0]), bary)
    return bary


def _tri_sqdist(p, a, b, c):
    bary = closest_point_barycentric(p, a, b, c)
    q = bary[..., 0:1] * a + bary[..., 1:2] * b + bary[..., 2:3] * c
    diff = p - q
    return np.einsum("...i,...i->...", diff, diff), bary


@numba.njit(cache=True)
def _bary_one(px, py, pz, ax, ay, az, bx, by, bz, cx, cy, cz):
    """Scalar version of closest_point_barycentric (Ericson's region tests)."""
    abx, aby, abz = bx - ax, by - ay, bz - az
    acx, acy, acz = cx - ax, cy - ay, cz - az
    apx, apy, apz = px - ax, py - ay, pz - az
    d1 = abx * apx + aby * apy + abz * apz
    d2 = acx * apx + acy * apy + acz * apz
    if d1 <= 0.0 and d2 <= 0.0:
        return 1.0, 0.0, 0.0
    bpx, bpy, bpz = px - bx, py - by, pz - bz
    d3 = abx * bpx + aby * bpy + abz * bpz
    d4 = acx * bpx + acy * bpy + acz * bpz
    if d3 >= 0.0 and d4 <= d3:
        return 0.0, 1.0, 0.0
    vc = d1 * d4 - d3 * d2
    if vc <= 0.0 and d1 >= 0.0 and d3 <= 0.0:
        t = d1 / (d1 - d3)
        return 1.0 - t, t, 0.0
    cpx, cpy, cpz = px - cx, py - cy, pz - cz
    d5 = abx * cpx + aby * cpy + abz * cpz
    d6 = acx * cpx + acy * cpy + acz * cpz
    if d6 >= 0.0 and d5 <= d6:
        return 0.0, 0.0, 1.0
    vb = d5 * d2 - d1 * d6
    if vb <= 0.0 and d2 >= 0.0 and d6 <= 0.0:
        t = d2 / (d2 - d6)
        return 1.0 - t, 0.0, t
    va = d3 * d6 - d5 * d4
    if va <= 0.0 and (d4 - d3) >= 0.0 and (d5 - d6) >= 0.0:
        t = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        return 0.0, 1.0 - t, t
    denom = 1.0 / (va + vb + vc)
    v = vb * denom
    w = vc * denom
    return 1.0 - v - w, v, w


@numba.njit(cache=True)
def _best_of_candidates(points, tri, cand, out_f, out_b, out_d):
    """For each point pick the closest triangle among ``cand`` rows (ties: lower column)."""
    n, k = cand.shape
    for i in range(n):
        px, py, pz = points[i, 0], points[i, 1], points[i, 2]
        best = np.inf
        for j in range(k):
            f = cand[i, j]
            ax, ay, az = tri[f, 0, 0], tri[f, 0, 1], tri[f, 0, 2]
            bx, by, bz = tri[f, 1, 0], tri[f, 1, 1], tri[f, 1, 2]
            cx, cy, cz = tri[f, 2, 0], tri[f, 2, 1], tri[f, 2, 2]
            u, v, w = _bary_one(px, py, pz, ax, ay, az, bx, by, bz, cx, cy, cz)
            q0 = u * ax + v * bx + w * cx - px
            q1 = u * ay + v * by + w * cy - py
            q2 = u * az + v * bz + w * cz - pz
            d = q0 * q0 + q1 * q1 + q2 * q2
            if d < best:
                best = d
                out_f[i] = f
                out_b[i, 0] = u
                out_b[i, 1] = v
                out_b[i, 2] = w
        out_d[i] = best


def nearest_triangles(points, vertices, faces, k=8):
    """Exact nearest triangle per point: (face index, barycentric weights, squared distance).

    Candidates come from the k nearest face centroids; a point is accepted when
    no face outside the candidate set can be closer (its centroid is at least the
    k-th centroid distance away, so it is at least that minus the largest
    centroid-to-corner radius away). Remaining points escalate to more
    candidates and finally to all faces.
    """
    points = np.ascontiguousarray(points, dtype=np.float64)
    faces = np.asarray(faces, dtype=np.int64)
    n, m = len(points), len(faces)
    tri = np.ascontiguousarray(vertices[faces], dtype=np.float64)
    cent = tri.mean(axis=1)
    radius = np.sqrt(((tri - cent[:, None]) ** 2).sum(-1).max())
    tree = cKDTree(cent)
    best_f = np.empty(n, dtype=np.int64)
    best_b = np.empty((n, 3))
    best_d = np.empty(n)
    todo = np.arange(n)
    kk = k
    while len(todo):
        kk = min(kk, m)
        dc, ic = tree.query(points[todo], kk)
        dc = dc.reshape(len(todo), -1)
        ic = np.ascontiguousarray(ic.reshape(len(todo), -1), dtype=np.int64)
        f = np.empty(len(todo), np.int64)
        b = np.empty((len(todo), 3))
        d = np.empty(len(todo))
        _best_of_candidates(points[todo], tri, ic, f, b, d)
        ok = (kk == m) | (np.sqrt(d) <= dc[:, -1] - radius)
        sel = todo[ok]
        best_f[sel] = f[ok]
        best_b[sel] = b[ok]
        best_d[sel] = d[ok]
        todo = todo[~ok]
        kk *= 4
    return best_f, best_b, best_d


@numba.njit(cache=True)
def _best_of_csr(points, tri, indptr, indices, out_f, out_b, out_d):
    n = len(points)
    for i in range(n):
        px, py, pz = points[i, 0], points[i, 1], points[i, 2]
        best = np.inf
        for j in range(indptr[i], indptr[i + 1]):
            f = indices[j]
            ax, ay, az = tri[f, 0, 0], tri[f, 0, 1], tri[f, 0, 2]
            bx, by, bz = tri[f, 1, 0], tri[f, 1, 1], tri[f, 1, 2]
            cx, cy, cz = tri[f, 2, 0], tri[f, 2, 1], tri[f, 2, 2]
            u, v, w = _bary_one(px, py, pz, ax, ay, az, bx, by, bz, cx, cy, cz)
            q0 = u * ax + v * bx + w * cx - px
            q1 = u * ay + v * by + w * cy - py
            q2 = u * az + v * bz + w * cz - pz
            d = q0 * q0 + q1 * q1 + q2 * q2
            if d < best:
                best = d
                out_f[i] = f
                out_b[i, 0] = u
                out_b[i, 1] = v
                out_b[i, 2] = w
        out_d[i] = best


class NearestTriangleCache:
    """Exact nearest-triangle queries for fixed points against a slowly moving mesh.

    At a refresh, each point keeps every face whose centroid lies within
    ``d0 + r + 2 * skin`` (d0 its current nearest distance, r the largest
    centroid-to-corner radius). While no vertex has moved more than ``skin``
    since the refresh, a face outside that list is at least ``d0 + skin`` away
    and the old nearest face at most ``d0 + skin``, so the list holds the answer.
    """

    def __init__(self, points, faces, skin):
        self.points = np.ascontiguousarray(points, dtype=np.float64)
        self.faces = np.asarray(faces, dtype=np.int64)
        self.skin = float(skin)
        self.X_ref = None
        self.refreshes = 0

    def _refresh(self, X, tri):
        _, _, d2 = nearest_triangles(self.points, X, self.faces)
        cent = tri.mean(axis=1)
        radius = np.sqrt(((tri - cent[:, None]) ** 2).sum(-1).max())
        reach = np.sqrt(d2) + radius + 2 * self.skin
        self.indptr, self.indices = _csr(cKDTree(cent).query_ball_point(self.points, reach))
        self.X_ref = X.copy()
        self.refreshes += 1

    def query(self, X):
        tri = np.ascontiguousarray(X[self.faces])
        if self.X_ref is None or np.sqrt(((X - self.X_ref) ** 2).sum(1).max()) > self.skin:
            self._refresh(X, tri)
        n = len(self.points)
        f = np.empty(n, np.int64)
        b = np.empty((n, 3))
        d = np.empty(n)
        _best_of_csr(self.points, tri, self.indptr, self.indices, f, b, d)
        return f, b, d


@numba.njit(cache=True)
def _nearest_csr(queries, pts, indptr, indices, out_i, out_d):
    for i in range(len(queries)):
        qx, qy, qz = queries[i, 0], queries[i, 1], queries[i, 2]
        best = np.inf
        for j in range(indptr[i], indptr[i + 1]):
            k = indices[j]
            dx = pts[k, 0] - qx
            dy = pts[k, 1] - qy
            dz = pts[k, 2] - qz
            d = dx * dx + dy * dy + dz * dz
            if d < best:
                best = d
                out_i[i] = k
        out_d[i] = best


def _csr(lists):
    counts = np.fromiter((len(c) for c in lists), np.int64, len(lists))
    indptr = np.concatenate([[0], np.cumsum(counts)])
    indices = np.fromiter((f for c in lists for f in sorted(c)), np.int64, int(indptr[-1]))
    return indptr, indices


class NearestPointCache:
    """Exact nearest neighbours between a fixed point set and moving mesh vertices.

    ``direction='to_vertices'`` answers, for each fixed point, its nearest vertex;
    ``'to_points'`` answers, for each vertex, its nearest fixed point. Candidate
    lists are rebuilt once any vertex has moved more than ``skin`` since the last
    rebuild (same argument as NearestTriangleCache, with zero face radius).
    """

    def __init__(self, points, direction, skin, tree=None):
        if direction not in ("to_vertices", "to_points"):
            raise ValueError(direction)
        self.points = np.ascontiguousarray(points, dtype=np.float64)
        self.direction = direction
        self.skin = float(skin)
        self.tree = tree if tree is not None else cKDTree(self.points)
        self.X_ref = None
        self.refreshes = 0

    def _refresh(self, X):
        if self.direction == "to_vertices":
            vt = cKDTree(X)
            d, _ = vt.query(self.points)
            lists = vt.query_ball_point(self.points, d + 2 * self.skin)
        else:
            d, _ = self.tree.query(X)
            lists = self.tree.query_ball_point(X, d + 2 * self.skin)
        self.indptr, self.indices = _csr(lists)
        self.X_ref = X.copy()
        self.refreshes += 1

    def query(self, X):
        """(index, squared distance) of the nearest partner of every query element."""
        X = np.ascontiguousarray(X, dtype=np.float64)
        if self.X_ref is None or np.sqrt(((X - self.X_ref) ** 2).sum(1).max()) > self.skin:
            self._refresh(X)
        if self.direction == "to_vertices":
            queries, pts = self.points, X
        else:
            queries, pts = X, self.points
        idx = np.empty(len(queries), np.int64)
        d2 = np.empty(len(queries))
        _nearest_csr(queries, pts, self.indptr, self.indices, idx, d2)
        return idx, d2


# ---------------------------------------------------------------- distance terms


def _require(points, name):
    if not len(points):
        raise EmptyTargetError(f"{name} is empty")


def chamfer_distance(A, B):
    """Symmetric mean squared nearest-neighbour distance between point sets A and B."""
    A = np.asarray(A, float)
    B = np.asarray(B, float)
    _require(A, "A")
    _require(B, "B")
    dA, _ = cKDTree(B).query(A)
    dB, _ = cKDTree(A).query(B)
    return float(np.mean(dA ** 2) + np.mean(dB ** 2))


def point_to_mesh_loss(points, vertices, faces):
    """Mean squared distance from each point to its nearest triangle."""
    points = np.asarray(points, float)
    _require(points, "point set")
    if not len(faces):
        raise EmptyTargetError("mesh subset has no faces")
    _, _, d2 = nearest_triangles(points, np.asarray(vertices, float), faces)
    return float(d2.mean())


def mesh_to_point_loss(vertices, points):
    """Mean squared distance from each mesh vertex to its nearest point."""
    vertices = np.asarray(vertices, float)
    points = np.asarray(points, float)
    _require(points, "point set")
    _require(vertices, "mesh vertex set")
    d, _ = cKDTree(points).query(vertices)
    return float(np.mean(d ** 2))


def chamfer_mp_grad(X, P, tree_P=None, caches=None):
    """Chamfer (X <-> P) and mesh-to-point (X -> P) values with gradients wrt X.

    ``caches`` is an optional (to_points, to_vertices) pair of NearestPointCache.
    """
    nX, nP = len(X), len(P)
    if caches is None:
        tree_P = tree_P if tree_P is not None else cKDTree(P)
        dX, iX = tree_P.query(X)
        dX2 = dX ** 2
        dP, iP = cKDTree(X).query(P)
        dP2 = dP ** 2
    else:
        iX, dX2 = caches[0].query(X)
        iP, dP2 = caches[1].query(X)
    diff = X - P[iX]
    mp = float(np.mean(dX2))
    g_mp = 2.0 * diff / nX
    back = (X[iP] - P) * (2.0 / nP)
    g_back = np.empty_like(X)
    for k in range(3):
        g_back[:, k] = np.bincount(iP, weights=back[:, k], minlength=nX)
    cf = mp + float(np.mean(dP2))
    return cf, g_mp + g_back, mp, g_mp


def point_to_mesh_grad(P, X, faces, cache: NearestTriangleCache | None = None):
    nP = len(P)
    if cache is None:
        fi, bary, d2 = nearest_triangles(P, X, faces)
    else:
        fi, bary, d2 = cache.query(X)
    f = faces[fi]
    q = np.einsum("nk,nki->ni", bary, X[f])
    r = (q - P) * (2.0 / nP)
    g = np.zeros_like(X)
    for c in range(3):
        contrib = r * bary[:, c : c + 1]
        for k in range(3):
            g[:, k] += np.bincount(f[:, c], weights=contrib[:, k], minlength=len(X))
    return float(d2.mean()), g


def point_to_vertex_grad(P, X, cache: NearestPointCache | None = None):
    """Point-to-mesh fallback when only a vertex subset exists: nearest vertex instead of face."""
    if cache is None:
        d, i = cKDTree(X).query(P)
        d2 = d ** 2
    else:
        i, d2 = cache.query(X)
    r = (X[i] - P) * (2.0 / len(P))
    g = np.empty_like(X)
    for k in range(3):
        g[:, k] = np.bincount(i, weights=r[:, k], minlength=len(X))
    return float(np.mean(d2)), g


# ---------------------------------------------------------------- regularization


def _cross(a, b):
    """Row-wise cross product; cheaper than np.cross for (n, 3) arrays."""
    out = np.empty_like(a)
    out[:, 0] = a[:, 1] * b[:, 2] - a[:, 2] * b[:, 1]
    out[:, 1] = a[:, 2] * b[:, 0] - a[:, 0] * b[:, 2]
    out[:, 2] = a[:, 0] * b[:, 1] - a[:, 1] * b[:, 0]
    return out


def _dot(a, b):
    return (a * b).sum(axis=1)


def _scatter(index, values, n):
    out = np.empty((n, 3))
    for k in range(3):
        out[:, k] = np.bincount(index, weights=values[:, k], minlength=n)
    return out


def _cross_backward(X, faces, g_c):
    """Gradient wrt vertices of sum_f g_c[f] . ((b-a) x (c-a))."""
    a, b, c = (X[faces[:, k]] for k in range(3))
    gb = _cross(c - a, g_c)
    gc = _cross(g_c, b - a)
    ga = -gb - gc
    return _scatter(faces.T.ravel(), np.concatenate([ga, gb, gc]), len(X))


class RegTopology:
    """Fixed connectivity of one closed submesh, reused by every regularization evaluation."""

    def __init__(self, faces, n_vertices):
        self.faces = np.asarray(faces, dtype=np.int64)
        self.n = n_vertices
        self.edges = unique_edges(self.faces)
        self.pairs = edge_face_pairs(self.faces)
        # edge index opposite each corner: corner k faces edge (k+1, k+2)
        key = self.edges[:, 0] * n_vertices + self.edges[:, 1]
        order = np.argsort(key)
        opp = []
        for k in range(3):
            i = self.faces[:, (k + 1) % 3]
            j = self.faces[:, (k + 2) % 3]
            ck = np.minimum(i, j) * n_vertices + np.maximum(i, j)
            opp.append(order[np.searchsorted(key[order], ck)])
        self.corner_edge = np.stack(opp, axis=1)


def vert_term_grad(X, X0):
    d = X - X0
    n = len(X)
    return float(np.einsum("ij,ij->", d, d) / n), 2.0 * d / n


def _face_cross(X, faces):
    a = X[faces[:, 0]]
    return _cross(X[faces[:, 1]] - a, X[faces[:, 2]] - a)


def _check_faces(c):
    s = _dot(c, c)
    bad = np.flatnonzero(~(s > 0))
    if len(bad):
        raise GeometryError(f"face {int(bad[0])} is degenerate (zero area)")
    return np.sqrt(s)


def normal_term_grad(X, topo: RegTopology, N0):
    """Mean squared deviation of unit vertex normals from reference normals ``N0``."""
    faces = topo.faces
    c = _face_cross(X, faces)
    _check_faces(c)
    u = _scatter(faces.ravel(), np.repeat(c, 3, axis=0), len(X))
    un = np.linalg.norm(u, axis=1)
    bad = np.flatnonzero(~(un > 0))
    if len(bad):
        raise GeometryError(f"vertex {int(bad[0])} has a zero-area star")
    n = u / un[:, None]
    d = n - N0
    val = float(np.einsum("ij,ij->", d, d) / len(X))
    g_n = 2.0 * d / len(X)
    g_u = (g_n - n * _dot(n, g_n)[:, None]) / un[:, None]
    g_c = g_u[faces[:, 0]] + g_u[faces[:, 1]] + g_u[faces[:, 2]]
    return val, _cross_backward(X, faces, g_c)


def edge_var_grad(X, topo: RegTopology):
    e = topo.edges
    v = X[e[:, 0]] - X[e[:, 1]]
    l = np.linalg.norm(v, axis=1)
    E = len(l)
    mean = l.mean()
    val = float(np.mean(l ** 2) - mean ** 2)
    gl = 2.0 * (l - mean) / E
    gv = v * (gl / l)[:, None]
    g = _scatter(e[:, 0], gv, len(X)) - _scatter(e[:, 1], gv, len(X))
    return max(val, 0.0), g


def consistency_grad(X, topo: RegTopology):
    """Mean over interior edges of 1 - n_f1 . n_f2 with unit face normals."""
    pairs = topo.pairs
    if not len(pairs):
        return 0.0, np.zeros_like(X)
    c = _face_cross(X, topo.faces)
    s = _check_faces(c)
    n = c / s[:, None]
    P = len(pairs)
    n1 = n[pairs[:, 0]]
    n2 = n[pairs[:, 1]]
    val = float(np.mean(1.0 - _dot(n1, n2)))
    g_n = _scatter(pairs[:, 0], -n2 / P, len(c)) + _scatter(pairs[:, 1], -n1 / P, len(c))
    g_c = (g_n - n * _dot(n, g_n)[:, None]) / s[:, None]
    return val, _cross_backward(X, topo.faces, g_c)


@numba.njit(cache=True)
def _laplacian_kernel(X, faces, edges, corner_edge, clamp, grad):
    """Value of mean |L x|^2 and its gradient (written into ``grad``); see laplacian_term_grad.

    Returns (value, index of a degenerate face or -1).
    """
    n = X.shape[0]
    F = faces.shape[0]
    E = edges.shape[0]
    w_raw = np.zeros(E)
    for f in range(F):
        for k in range(3):
            p0 = faces[f, k]
            p1 = faces[f, (k + 1) % 3]
            p2 = faces[f, (k + 2) % 3]
            ux, uy, uz = X[p1, 0] - X[p0, 0], X[p1, 1] - X[p0, 1], X[p1, 2] - X[p0, 2]
            vx, vy, vz = X[p2, 0] - X[p0, 0], X[p2, 1] - X[p0, 1], X[p2, 2] - X[p0, 2]
            wx, wy, wz = uy * vz - uz * vy, uz * vx - ux * vz, ux * vy - uy * vx
            sn = np.sqrt(wx * wx + wy * wy + wz * wz)
            if not sn > 0.0:
                return 0.0, f
            w_raw[corner_edge[f, k]] += (ux * vx + uy * vy + uz * vz) / sn
    w = np.empty(E)
    Wsum = np.zeros(n)
    acc = np.zeros((n, 3))
    for e in range(E):
        w[e] = w_raw[e] if w_raw[e] > clamp else clamp
        i, j = edges[e, 0], edges[e, 1]
        Wsum[i] += w[e]
        Wsum[j] += w[e]
        for c in range(3):
            acc[i, c] += w[e] * X[j, c]
            acc[j, c] += w[e] * X[i, c]
    Lx = np.empty((n, 3))
    val = 0.0
    for i in range(n):
        for c in range(3):
            Lx[i, c] = acc[i, c] / Wsum[i] - X[i, c]
            val += Lx[i, c] * Lx[i, c]
    val /= n
    # G = 2 L / n; direct part A^T G with A = D^-1 W - I
    Gs = np.empty((n, 3))
    for i in range(n):
        for c in range(3):
            g = 2.0 * Lx[i, c] / n
            Gs[i, c] = g / Wsum[i]
            grad[i, c] -= g
    dw = np.zeros(E)
    for e in range(E):
        i, j = edges[e, 0], edges[e, 1]
        t = 0.0
        for c in range(3):
            grad[j, c] += Gs[i, c] * w[e]
            grad[i, c] += Gs[j, c] * w[e]
            dx = X[j, c] - X[i, c]
            t += Gs[i, c] * (dx - Lx[i, c]) + Gs[j, c] * (-dx - Lx[j, c])
        dw[e] = t if w_raw[e] > clamp else 0.0
    # weight dependence through each corner cotangent
    for f in range(F):
        for k in range(3):
            g = dw[corner_edge[f, k]]
            if g == 0.0:
                continue
            p0 = faces[f, k]
            p1 = faces[f, (k + 1) % 3]
            p2 = faces[f, (k + 2) % 3]
            ux, uy, uz = X[p1, 0] - X[p0, 0], X[p1, 1] - X[p0, 1], X[p1, 2] - X[p0, 2]
            vx, vy, vz = X[p2, 0] - X[p0, 0], X[p2, 1] - X[p0, 1], X[p2, 2] - X[p0, 2]
            wx, wy, wz = uy * vz - uz * vy, uz * vx - ux * vz, ux * vy - uy * vx
            sn = np.sqrt(wx * wx + wy * wy + wz * wz)
            d = ux * vx + uy * vy + uz * vz
            kx, ky, kz = wx / sn, wy / sn, wz / sn
            s2 = sn * sn
            # d cot / du = (v s - d (v x k)) / s^2 ; d cot / dv = (u s - d (k x u)) / s^2
            ax = (vx * sn - d * (vy * kz - vz * ky)) / s2 * g
            ay = (vy * sn - d * (vz * kx - vx * kz)) / s2 * g
            az = (vz * sn - d * (vx * ky - vy * kx)) / s2 * g
            bx = (ux * sn - d * (ky * uz - kz * uy)) / s2 * g
            by = (uy * sn - d * (kz * ux - kx * uz)) / s2 * g
            bz = (uz * sn - d * (kx * uy - ky * ux)) / s2 * g
            grad[p1, 0] += ax
            grad[p1, 1] += ay
            grad[p1, 2] += az
            grad[p2, 0] += bx
            grad[p2, 1] += by
            grad[p2, 2] += bz
            grad[p0, 0] -= ax + bx
            grad[p0, 1] -= ay + by
            grad[p0, 2] -= az + bz
    return val, -1


def laplacian_term_grad(X, topo: RegTopology, clamp=COT_CLAMP):
    """Mean squared norm of the normalized cotangent Laplacian of X.

    The gradient includes the dependence of the cotangent weights on X; clamped
    weights contribute no weight derivative.
    """
    X = np.ascontiguousarray(X, dtype=np.float64)
    grad = np.zeros_like(X)
    val, bad = _laplacian_kernel(X, topo.faces, topo.edges, topo.corner_edge, float(clamp), grad)
    if bad >= 0:
        raise GeometryError(f"face {bad} is degenerate (zero area)")
    return val, grad
