"""Procedural LV + hippocampus joint template.

Each side is a C-curved swept tube (LV) whose inferior tip ring is shared with
a second swept tube (hippocampus). Both tubes are closed: the LV with a shallow
cap dented back into the LV behind the shared ring, the hippocampus with one
dented into the hippocampus, so the two submeshes are separate closed surfaces
that meet along the shared ring. The right side is the mirror image of the left.

Coordinates are RAS-like millimetres: +x right, +y anterior, +z superior.
"""
from __future__ import annotations

from collections import defaultdict, deque
from dataclasses import dataclass

import numpy as np
from scipy.interpolate import CubicSpline, PchipInterpolator

from .errors import ParameterError
from .fit import DeformationState, FitConfig, FitObjective, adamw_step
from .losses import nearest_triangles
from .mesh import (
    NO_PERIPHERAL,
    LabeledMesh,
    Peripheral,
    Side,
    Structure,
    signed_volume,
)

# left hemisphere; frontal horn tip first, inferior (temporal) horn tip last
LV_CENTERLINE = (
    (-4.0, 28.0, 6.0),
    (-3.3, 16.0, 13.0),
    (-3.3, 2.0, 16.0),
    (-4.8, -12.0, 15.0),
    (-13.0, -24.0, 8.0),
    (-20.0, -24.0, -4.0),
    (-25.0, -14.0, -13.0),
    (-27.0, -2.0, -17.0),
)
LV_RADIUS = (3.5, 4.5, 4.5, 4.3, 4.8, 4.2, 3.8)
# continues from the LV tip
HC_CENTERLINE = (
    (-27.5, 8.0, -20.5),
    (-26.0, 17.0, -22.0),
    (-23.0, 24.0, -22.0),
)
HC_RADIUS = (3.8, 4.8, 4.5, 3.2)


@dataclass(frozen=True)
class TemplateSpec:
    edge_length: float = 2.0
    lv_centerline: tuple = LV_CENTERLINE
    hippocampus_centerline: tuple = HC_CENTERLINE
    lv_radius: tuple = LV_RADIUS
    hippocampus_radius: tuple = HC_RADIUS
    shared_ring_count: int = 12
    seed: int = 7
    phase_jitter: float = 0.15
    cap_depth: float = 0.6
    hippocampus_contact: float = 2.0  # LV vertices this close to the hippocampus surface
    # medial LV wall (septum): x of the left wall, softness of the flattening, class band width
    septum_x: float = -0.05
    septum_softness: float = 0.3
    septum_band: float = 0.75
    # short descent on the fitting regularizers so the template sits near their equilibrium
    relax_steps: int = 500
    relax_step: float = 0.01  # mm per step
    sides: tuple = (Side.LEFT, Side.RIGHT)

    def validate(self):
        if not self.edge_length > 0:
            raise ParameterError("edge_length must be positive")
        if self.shared_ring_count < 3:
            raise ParameterError("shared_ring_count must be at least 3")
        if len(self.lv_centerline) < 2 or len(self.hippocampus_centerline) < 1:
            raise ParameterError("centerlines need at least 2 (LV) and 1 (hippocampus) points")
        if min(self.lv_radius) <= 0 or min(self.hippocampus_radius) <= 0:
            raise ParameterError("radius profiles must be positive")
        if not 0 <= self.phase_jitter < 0.5:
            raise ParameterError("phase_jitter must be in [0, 0.5)")
        if not self.hippocampus_contact > 0:
            raise ParameterError("hippocampus_contact must be positive")
        if self.septum_x > 0 or self.septum_softness <= 0 or self.septum_band <= 0:
            raise ParameterError("septum_x must be <= 0; softness and band positive")
        if self.relax_steps < 0 or not self.relax_step > 0:
            raise ParameterError("relax_steps must be >= 0 and relax_step positive")
        if not self.sides or len(set(self.sides)) != len(self.sides):
            raise ParameterError("sides must be a nonempty set")
        return self


class _Curve:
    """Arclength-parameterized cubic spline through control points."""

    def __init__(self, points, start_tangent=None):
        pts = np.asarray(points, dtype=float)
        chord = np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(pts, axis=0), axis=1))])
        if start_tangent is None:
            bc = "natural"
        else:
            bc = ((1, np.asarray(start_tangent, float)), (2, np.zeros(3)))
        self._spline = CubicSpline(chord, pts, bc_type=bc)
        u = np.linspace(0.0, chord[-1], 4001)
        seg = np.linalg.norm(np.diff(self._spline(u), axis=0), axis=1)
        self._s = np.concatenate([[0.0], np.cumsum(seg)])
        self._u = u
        self.length = float(self._s[-1])

    def at(self, s):
        u = np.interp(s, self._s, self._u)
        d = self._spline(u, 1)
        return self._spline(u), d / np.linalg.norm(d, axis=-1, keepdims=True)


def _profile(values):
    values = np.asarray(values, float)
    if len(values) == 1:
        return lambda t: np.full_like(np.asarray(t, float), values[0])
    return PchipInterpolator(np.linspace(0.0, 1.0, len(values)), values)


def _perpendicular(t):
    a = np.array([0.0, 0.0, 1.0]) if abs(t[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
    u = np.cross(t, a)
    return u / np.linalg.norm(u)


class _Builder:
    def __init__(self, h, rng, jitter):
        self.h = h
        self.rng = rng
        self.jitter = jitter
        self.points = []
        self.structure = []
        self.arclength = []  # normalized LV arclength for LV vertices, else nan
        self.direction = []
        self.faces = []

    def add_ring(self, center, u, v, radius, count, phase, structure, t):
        ang = phase + 2 * np.pi * np.arange(count) / count
        d = np.cos(ang)[:, None] * u + np.sin(ang)[:, None] * v
        start = len(self.points)
        self.points.extend(center + radius * d)
        self.direction.extend(d)
        self.structure.extend([structure] * count)
        self.arclength.extend([t] * count)
        return np.arange(start, start + count), ang

    def add_point(self, p, d, structure, t):
        self.points.append(np.asarray(p, float))
        self.direction.append(np.asarray(d, float))
        self.structure.append(structure)
        self.arclength.append(t)
        return len(self.points) - 1

    def count_for(self, radius):
        return max(3, int(round(2 * np.pi * radius / self.h)))

    def phase_step(self, prev_phase, count):
        return prev_phase + np.pi / count + self.jitter * (self.rng.random() - 0.5) * 2 * np.pi / count

    def zip(self, ring_a, ring_b):
        a_idx, a_ang = ring_a
        b_idx, b_ang = ring_b
        oa = np.argsort(np.mod(a_ang, 2 * np.pi))
        ob = np.argsort(np.mod(b_ang, 2 * np.pi))
        a_idx, ta = a_idx[oa], np.mod(a_ang[oa], 2 * np.pi)
        b_idx, tb = b_idx[ob], np.mod(b_ang[ob], 2 * np.pi)
        shift = int(np.argmin(np.abs(np.angle(np.exp(1j * (tb - ta[0]))))))
        b_idx, tb = np.roll(b_idx, -shift), np.roll(tb, -shift)
        ta = np.unwrap(ta)
        tb = np.unwrap(tb)
        tb = tb - 2 * np.pi * np.round((tb[0] - ta[0]) / (2 * np.pi))
        na, nb = len(a_idx), len(b_idx)

        def ang(t, i, n):
            return t[i % n] + 2 * np.pi * (i // n)

        i = j = 0
        while i < na or j < nb:
            if j == nb or (i < na and ang(ta, i + 1, na) <= ang(tb, j + 1, nb)):
                self.faces.append((a_idx[i % na], b_idx[j % nb], a_idx[(i + 1) % na]))
                i += 1
            else:
                self.faces.append((a_idx[i % na], b_idx[j % nb], b_idx[(j + 1) % nb]))
                j += 1

    def fan(self, ring, pole):
        idx, ang = ring
        idx = idx[np.argsort(np.mod(ang, 2 * np.pi))]
        for i in range(len(idx)):
            self.faces.append((pole, idx[i], idx[(i + 1) % len(idx)]))


def _sweep(b, curve, radius_fn, structure, frame_u, phase, t_of, first_ring=None):
    """Rings along ``curve``; returns (rings, frames) in sweep order."""
    h = b.h
    ds = h * np.sqrt(3) / 2
    k = max(2, int(round(curve.length / ds)))
    s = np.linspace(0.0, curve.length, k + 1)
    centers, tangents = curve.at(s)
    u = frame_u
    rings, frames = [], []
    for i in range(k + 1):
        t = tangents[i]
        u = u - np.dot(u, t) * t
        u = u / np.linalg.norm(u)
        v = np.cross(t, u)
        if i == 0 and first_ring is not None:
            ring = first_ring
        else:
            rho = float(radius_fn(s[i] / curve.length))
            n = b.count_for(rho)
            phase = b.phase_step(phase, n)
            ring = b.add_ring(centers[i], u, v, rho, n, phase, structure, t_of(s[i] / curve.length))
        rings.append(ring)
        frames.append((centers[i], t, u, v, float(radius_fn(s[i] / curve.length))))
    for r0, r1 in zip(rings[:-1], rings[1:]):
        b.zip(r0, r1)
    return rings, frames, phase


def _hemisphere_cap(b, ring, frame, outward, structure, t, phase):
    center, _, u, v, rho = frame
    ds = b.h * np.sqrt(3) / 2
    steps = max(1, int(round(0.5 * np.pi * rho / ds)))
    prev = ring
    for j in range(1, steps):
        phi = 0.5 * np.pi * j / steps
        r = rho * np.cos(phi)
        n = b.count_for(r)
        phase = b.phase_step(phase, n)
        cur = b.add_ring(center + outward * rho * np.sin(phi), u, v, r, n, phase, structure, t)
        b.zip(prev, cur)
        prev = cur
    pole = b.add_point(center + outward * rho, outward, structure, t)
    b.fan(prev, pole)


def _dented_cap(b, ring, frame, inward, depth, structure, t, phase):
    center, _, u, v, rho = frame
    ds = b.h * np.sqrt(3) / 2
    steps = max(1, int(round(rho / ds)))
    prev = ring
    for j in range(1, steps):
        r = rho * (1 - j / steps)
        n = b.count_for(r)
        phase = b.phase_step(phase, n)
        cur = b.add_ring(center + inward * depth * j / steps, u, v, r, n, phase, structure, t)
        b.zip(prev, cur)
        prev = cur
    pole = b.add_point(center + inward * depth, -inward, structure, t)
    b.fan(prev, pole)


def _orient_outward(faces, vertices):
    """Make a closed face set consistently oriented with positive signed volume."""
    faces = np.array(faces, dtype=np.int64)
    owners = defaultdict(list)
    for f, tri in enumerate(faces):
        for k in range(3):
            a, b_ = tri[k], tri[(k + 1) % 3]
            owners[(min(a, b_), max(a, b_))].append((f, a < b_))
    flip = np.zeros(len(faces), bool)
    seen = np.zeros(len(faces), bool)
    for root in range(len(faces)):
        if seen[root]:
            continue
        seen[root] = True
        queue = deque([root])
        while queue:
            f = queue.popleft()
            tri = faces[f]
            for k in range(3):
                a, b_ = tri[k], tri[(k + 1) % 3]
                fwd = (a < b_) != flip[f]
                for g, g_fwd in owners[(min(a, b_), max(a, b_))]:
                    if g == f or seen[g]:
                        continue
                    seen[g] = True
                    # neighbours must traverse the shared edge in opposite directions
                    flip[g] = g_fwd == fwd
                    queue.append(g)
    faces[flip] = faces[flip][:, ::-1]
    if signed_volume(vertices, faces) < 0:
        faces = faces[:, ::-1]
    return faces


def _flatten_septum(x, wall, softness):
    """Smoothly clamp x to at most ``wall`` (softplus), flattening the medial LV wall."""
    return wall - softness * np.logaddexp(0.0, (wall - x) / softness)


def _relax(V, F, S, steps, step):
    """Run ``steps`` Adam steps on the default regularization loss alone (no target).

    A freshly swept mesh is far from equilibrium under the edge-variance and
    Laplacian terms, so a fit to a target sampled from it would first spend its
    budget smoothing. Relaxing here makes a self-fit nearly stationary.
    """
    if steps == 0:
        return V
    mesh = LabeledMesh(V, F, S, np.full(len(V), NO_PERIPHERAL), np.zeros(len(V)))
    cfg = FitConfig()
    state = DeformationState.from_template(mesh, 1.0, 1.0)
    obj = FitObjective(state, None, cfg, distance=False)
    for _ in range(steps):
        _, g = obj.evaluate(state.positions)
        adamw_step(state, g, cfg, lr=step)
    return state.to_mm()


def _classify_lv(t, d, touches_hippocampus, on_septum):
    up = np.array([0.0, 0.0, 1.0])
    if touches_hippocampus:
        return Peripheral.HIPPOCAMPUS
    if t < 0.5 and on_septum:
        return Peripheral.OPPOSITE_LV
    if np.dot(d, up) > 0.35:
        return Peripheral.WHITE_MATTER
    if t < 0.28:
        return Peripheral.CAUDATE
    if t < 0.55:
        return Peripheral.THALAMUS
    return Peripheral.WHITE_MATTER


def _build_left(spec, rng):
    h = spec.edge_length
    b = _Builder(h, rng, spec.phase_jitter)
    join_radius = spec.shared_ring_count * h / (2 * np.pi)

    lv_curve = _Curve(spec.lv_centerline)
    lv_r = list(spec.lv_radius)
    lv_r[-1] = join_radius
    lv_profile = _profile(lv_r)
    _, t0 = lv_curve.at(0.0)
    u0 = _perpendicular(t0)
    lv_rings, lv_frames, phase = _sweep(
        b, lv_curve, lv_profile, Structure.LV, u0, 0.0, lambda t: t
    )
    # the last LV ring becomes the shared ring; force its vertex count
    shared_center, shared_t, su, sv, _ = lv_frames[-1]
    last_idx, _ = lv_rings[-1]
    n_last = len(last_idx)
    if n_last != spec.shared_ring_count:
        raise ParameterError("shared ring count does not match the LV end radius")
    for i in last_idx:
        b.structure[i] = Structure.SHARED
        b.arclength[i] = 1.0
    shared_ring = lv_rings[-1]

    _hemisphere_cap(b, lv_rings[0], lv_frames[0], -lv_frames[0][1], Structure.LV, 0.0, phase)
    _dented_cap(b, shared_ring, lv_frames[-1], -shared_t, spec.cap_depth, Structure.LV, 1.0, phase)

    hc_points = np.vstack([shared_center, np.asarray(spec.hippocampus_centerline, float)])
    hc_curve = _Curve(hc_points, start_tangent=shared_t)
    hc_r = list(spec.hippocampus_radius)
    hc_r[0] = join_radius
    hc_profile = _profile(hc_r)
    nan_t = lambda t: np.nan  # noqa: E731
    hc_rings, hc_frames, phase = _sweep(
        b, hc_curve, hc_profile, Structure.HIPPOCAMPUS, su, phase, nan_t, first_ring=shared_ring
    )
    _dented_cap(
        b, shared_ring, hc_frames[0], shared_t, spec.cap_depth, Structure.HIPPOCAMPUS, np.nan, phase
    )
    _hemisphere_cap(
        b, hc_rings[-1], hc_frames[-1], hc_frames[-1][1], Structure.HIPPOCAMPUS, np.nan, phase
    )

    V = np.asarray(b.points).copy()
    V[:, 0] = _flatten_septum(V[:, 0], spec.septum_x, spec.septum_softness)
    F = np.asarray(b.faces, dtype=np.int64)
    S = np.asarray(b.structure, dtype=np.uint8)
    lv_v = S != Structure.HIPPOCAMPUS
    hc_v = S != Structure.LV
    lv_f = lv_v[F].all(1)
    hc_f = hc_v[F].all(1)
    F_out = np.empty_like(F)
    F_out[lv_f] = _orient_outward(F[lv_f], V)
    F_out[hc_f] = _orient_outward(F[hc_f], V)
    V = _relax(V, F_out, S, spec.relax_steps, spec.relax_step)
    V[:, 0] = _flatten_septum(V[:, 0], spec.septum_x, spec.septum_softness)

    septum = V[:, 0] > spec.septum_x - spec.septum_band
    _, _, d2 = nearest_triangles(V, V, F_out[hc_f])
    touch = np.sqrt(d2) <= spec.hippocampus_contact
    P = np.full(len(V), NO_PERIPHERAL, dtype=np.int8)
    for i in np.flatnonzero(lv_v):
        P[i] = _classify_lv(b.arclength[i], b.direction[i], touch[i], septum[i])
    P[S == Structure.SHARED] = Peripheral.HIPPOCAMPUS
    return V, F_out, S, P


def generate_synthetic_joint_template(spec: TemplateSpec | None = None) -> LabeledMesh:
    """Deterministic joint LV-hippocampus template for the sides listed in ``spec``."""
    spec = (spec or TemplateSpec()).validate()
    rng = np.random.default_rng(spec.seed)
    V, F, S, P = _build_left(spec, rng)
    verts, faces, struct, peri, side = [], [], [], [], []
    offset = 0
    for sd in spec.sides:
        sd = Side(sd)
        if sd == Side.LEFT:
            verts.append(V)
            faces.append(F + offset)
        else:
            verts.append(V * np.array([-1.0, 1.0, 1.0]))
            faces.append(F[:, ::-1] + offset)
        struct.append(S)
        peri.append(P)
        side.append(np.full(len(V), sd, dtype=np.uint8))
        offset += len(V)
    mesh = LabeledMesh(
        np.vstack(verts),
        np.vstack(faces),
        np.concatenate(struct),
        np.concatenate(peri),
        np.concatenate(side),
    )
    return mesh.validate()
