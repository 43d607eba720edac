"""Small closed test surfaces: icosphere and axis-aligned box."""
from __future__ import annotations

import numpy as np


def icosphere(level=2, radius=1.0, center=(0.0, 0.0, 0.0)):
    """Subdivided icosahedron projected to a sphere; returns (vertices, faces), outward oriented."""
    t = (1 + 5 ** 0.5) / 2
    v = [
        (-1, t, 0), (1, t, 0), (-1, -t, 0), (1, -t, 0),
        (0, -1, t), (0, 1, t), (0, -1, -t), (0, 1, -t),
        (t, 0, -1), (t, 0, 1), (-t, 0, -1), (-t, 0, 1),
    ]
    f = [
        (0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
        (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
        (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
        (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1),
    ]
    verts = [np.array(p, float) / np.linalg.norm(p) for p in v]
    faces = f
    for _ in range(level):
        cache = {}

        def mid(a, b):
            key = (min(a, b), max(a, b))
            if key not in cache:
                m = verts[a] + verts[b]
                verts.append(m / np.linalg.norm(m))
                cache[key] = len(verts) - 1
            return cache[key]

        nf = []
        for a, b, c in faces:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            nf += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = nf
    return np.asarray(verts) * radius + np.asarray(center, float), np.asarray(faces, dtype=np.int64)


def box(lo=(0.0, 0.0, 0.0), hi=(1.0, 1.0, 1.0), n=1):
    """Axis-aligned box with each face split into an n x n grid of quads (2 triangles each)."""
    lo = np.asarray(lo, float)
    hi = np.asarray(hi, float)
    g = np.linspace(0.0, 1.0, n + 1)
    index = {}
    verts, faces = [], []

    def vid(p):
        key = tuple(np.round(p, 12))
        if key not in index:
            index[key] = len(verts)
            verts.append(lo + p * (hi - lo))
        return index[key]

    for axis in range(3):
        for side in (0.0, 1.0):
            u_ax, v_ax = [a for a in range(3) if a != axis]
            grid = np.empty((n + 1, n + 1), dtype=np.int64)
            for a, u in enumerate(g):
                for b, w in enumerate(g):
                    p = np.zeros(3)
                    p[axis], p[u_ax], p[v_ax] = side, u, w
                    grid[a, b] = vid(p)
            for a in range(n):
                for b in range(n):
                    q = (grid[a, b], grid[a + 1, b], grid[a + 1, b + 1], grid[a, b + 1])
                    t1, t2 = (q[0], q[1], q[2]), (q[0], q[2], q[3])
                    normal = np.zeros(3)
                    normal[axis] = 1.0 if side else -1.0
                    pv = np.asarray(verts)
                    c = np.cross(pv[t1[1]] - pv[t1[0]], pv[t1[2]] - pv[t1[0]])
                    if np.dot(c, normal) < 0:
                        t1, t2 = t1[::-1], t2[::-1]
                    faces += [t1, t2]
    return np.asarray(verts), np.asarray(faces, dtype=np.int64)
