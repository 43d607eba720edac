"""Template deformation: the weighted loss, AdamW with a halving schedule, and the fit loop.

Vertices are optimized directly (one displacement per vertex). Two length
scales are involved. Losses are measured with coordinates centred on the
template centroid and divided by ``loss_unit`` (1 mm by default), which fixes
the balance between the scale-free normal terms and the squared-length terms.
The AdamW step is expressed in units of ``step_scale`` (the template radius
unless given), so a learning rate of 5e-4 moves a vertex by at most 5e-4 of the
template radius per iteration whatever the loss unit.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np
from scipy.spatial import cKDTree

from . import losses as L
from .errors import EmptyTargetError, NumericalError, ParameterError
from .mesh import PERI_REGIONS, LabeledMesh, Structure, SubMesh, vertex_normals
from .target import LabeledPointCloud

PERI_NAMES = {int(p): p.name.lower() for p in PERI_REGIONS}
REG_TERMS = ("vert", "norm", "edge", "cons", "lap")
# coordinates past this overflow squared distances; a diverged fit, not geometry
MAX_COORD = 1e100


@dataclass(frozen=True)
class FitConfig:
    lambda_cf: float = 2.0
    lambda_pm: float = 1.4
    lambda_mp: float = 0.6
    lambda_vert: float = 1.0
    lambda_norm: float = 1.0
    lambda_edge: float = 1000.0
    lambda_cons: float = 100.0
    lambda_lap: float = 300.0
    initial_lr: float = 5e-4
    total_iters: int = 5000
    halve_every: int = 1000
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    peri_enabled: bool = True
    joint_enabled: bool = True
    loss_unit: float = 1.0  # mm per loss-frame unit
    step_scale: float | None = None  # mm per unit of learning rate; None = template radius

    def validate(self):
        for f in fields(self):
            if f.name.startswith("lambda_") and not getattr(self, f.name) >= 0:
                raise ParameterError(f"{f.name} must be >= 0")
        if not self.initial_lr > 0:
            raise ParameterError("initial_lr must be > 0")
        if int(self.total_iters) != self.total_iters or self.total_iters <= 0:
            raise ParameterError("total_iters must be a positive integer")
        if int(self.halve_every) != self.halve_every or self.halve_every <= 0:
            raise ParameterError("halve_every must be a positive integer")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1 and self.eps > 0 and self.weight_decay >= 0):
            raise ParameterError("AdamW needs beta in [0, 1), eps > 0, weight_decay >= 0")
        if not self.loss_unit > 0:
            raise ParameterError("loss_unit must be positive")
        if self.step_scale is not None and not self.step_scale > 0:
            raise ParameterError("step_scale must be positive")
        return self

    @property
    def distance_weights(self):
        return {"cf": self.lambda_cf, "pm": self.lambda_pm, "mp": self.lambda_mp}

    @property
    def reg_weights(self):
        return {t: getattr(self, f"lambda_{t}") for t in REG_TERMS}

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, data):
        names = {f.name for f in fields(cls)}
        unknown = set(data) - names
        if unknown:
            raise ParameterError(f"unknown FitConfig fields: {sorted(unknown)}")
        return cls(**data).validate()

    @classmethod
    def from_json(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


# ---------------------------------------------------------------- loss bookkeeping


@dataclass
class LossBreakdown:
    """Raw term values and their weights; names look like ``dist.lv.cf`` or ``reg.hippocampus.lap``."""

    terms: dict = field(default_factory=dict)
    weights: dict = field(default_factory=dict)

    def add(self, name, value, weight):
        self.terms[name] = float(value)
        self.weights[name] = float(weight)

    def weighted(self, prefix=""):
        return math.fsum(self.weights[k] * v for k, v in self.terms.items() if k.startswith(prefix))

    @property
    def total(self):
        return self.weighted()

    @property
    def dist_lv(self):
        return self.weighted("dist.lv.")

    @property
    def dist_hippocampus(self):
        return self.weighted("dist.hippocampus.")

    @property
    def dist_peri(self):
        return {name: self.weighted(f"dist.{name}.") for name in PERI_NAMES.values()}

    @property
    def distance(self):
        return self.weighted("dist.")

    @property
    def regularization(self):
        return self.weighted("reg.")

    def merged(self, other):
        return LossBreakdown({**self.terms, **other.terms}, {**self.weights, **other.weights})


@dataclass
class DeformationState:
    positions: np.ndarray  # loss frame
    template: LabeledMesh  # reference positions (mm), topology and labels
    center: np.ndarray
    scale: float  # mm per loss-frame unit
    step: float = 1.0  # loss-frame units per unit of learning rate
    m: np.ndarray = None
    v: np.ndarray = None
    iteration: int = 0

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64)
        if self.m is None:
            self.m = np.zeros_like(self.positions)
        if self.v is None:
            self.v = np.zeros_like(self.positions)

    @classmethod
    def from_template(cls, template: LabeledMesh, loss_unit=1.0, step_scale=None):
        center = template.vertices.mean(0)
        if step_scale is None:
            step_scale = float(np.linalg.norm(template.vertices - center, axis=1).max())
        X = (template.vertices - center) / loss_unit
        return cls(X, template, center, float(loss_unit), float(step_scale) / loss_unit)

    @property
    def reference(self):
        return (self.template.vertices - self.center) / self.scale

    def normalize(self, points_mm):
        return (np.asarray(points_mm, float) - self.center) / self.scale

    def to_mm(self, positions=None):
        X = self.positions if positions is None else positions
        return X * self.scale + self.center

    def mesh(self) -> LabeledMesh:
        return self.template.with_vertices(self.to_mm())


# ---------------------------------------------------------------- objective


class _DistTerm:
    def __init__(self, name, sub: SubMesh, points, skin):
        self.name = name
        self.ids = sub.vertex_ids
        self.faces = sub.faces
        self.points = points
        self.tree = cKDTree(points)
        self.cache = L.NearestTriangleCache(points, sub.faces, skin) if len(sub.faces) else None
        self.nn = (
            L.NearestPointCache(points, "to_points", skin, self.tree),
            L.NearestPointCache(points, "to_vertices", skin),
        )


class _RegPart:
    def __init__(self, name, sub: SubMesh, reference):
        self.name = name
        self.ids = sub.vertex_ids
        self.topo = L.RegTopology(sub.faces, len(sub.vertex_ids))
        self.X0 = reference[self.ids]
        self.N0 = vertex_normals(self.X0, sub.faces)


class FitObjective:
    """Total loss and gradient for one template/target pair; the search structures over the
    target are built once."""

    def __init__(self, state: DeformationState, target: LabeledPointCloud, config: FitConfig,
                 distance=True, regularization=True):
        self.config = config.validate()
        mesh = state.template
        self.n = mesh.n_vertices
        self.dist_terms = []
        self.reg_parts = []
        pts = state.normalize(target.points) if target is not None else None
        # candidate-list skin for the nearest-triangle caches: a fraction of the mean edge
        edges = mesh.vertices[mesh.faces[:, [1, 2, 0]]] - mesh.vertices[mesh.faces]
        skin = 0.25 * float(np.linalg.norm(edges, axis=-1).mean()) / state.scale
        if distance:
            lv_pts = pts[target.source == Structure.LV]
            if not len(lv_pts):
                raise EmptyTargetError("target has no LV points")
            self.dist_terms.append(_DistTerm("lv", mesh.submesh("lv"), lv_pts, skin))
            if config.joint_enabled:
                hc_pts = pts[target.source == Structure.HIPPOCAMPUS]
                if not len(hc_pts):
                    raise EmptyTargetError("target has no hippocampus points")
                self.dist_terms.append(_DistTerm("hippocampus", mesh.submesh("hippocampus"), hc_pts, skin))
            if config.peri_enabled:
                for p in PERI_REGIONS:
                    sel = (target.source == Structure.LV) & (target.peripheral == p)
                    sub = mesh.peripheral_submesh(p)
                    if not len(sub.faces):
                        # no face is fully of class p: fall back to the bare vertex subset
                        sub = SubMesh(np.flatnonzero(mesh.peripheral == p), np.zeros((0, 3), np.int64))
                    if not sel.any() or not len(sub.vertex_ids):
                        continue
                    self.dist_terms.append(_DistTerm(PERI_NAMES[int(p)], sub, pts[sel], skin))
        if regularization:
            ref = state.reference
            self.reg_parts.append(_RegPart("lv", mesh.submesh("lv"), ref))
            if config.joint_enabled:
                self.reg_parts.append(_RegPart("hippocampus", mesh.submesh("hippocampus"), ref))
        self.frozen = None
        if not config.joint_enabled:
            self.frozen = mesh.structure == Structure.HIPPOCAMPUS

    def evaluate(self, X, need_grad=True):
        cfg = self.config
        bad = np.flatnonzero(~(np.abs(X) < MAX_COORD).all(axis=1))
        if len(bad):
            raise NumericalError("non-finite or diverged vertex position", index=int(bad[0]))
        bd = LossBreakdown()
        grad = np.zeros((self.n, 3))
        dw = cfg.distance_weights
        for term in self.dist_terms:
            Xs = X[term.ids]
            cf, g_cf, mp, g_mp = L.chamfer_mp_grad(Xs, term.points, caches=term.nn)
            if len(term.faces):
                pm, g_pm = L.point_to_mesh_grad(term.points, Xs, term.faces, term.cache)
            else:
                pm, g_pm = L.point_to_vertex_grad(term.points, Xs, term.nn[1])
            for key, val in (("cf", cf), ("pm", pm), ("mp", mp)):
                bd.add(f"dist.{term.name}.{key}", val, dw[key])
            if need_grad:
                grad[term.ids] += dw["cf"] * g_cf + dw["pm"] * g_pm + dw["mp"] * g_mp
        rw = cfg.reg_weights
        for part in self.reg_parts:
            Xs = X[part.ids]
            vals = {
                "vert": L.vert_term_grad(Xs, part.X0),
                "norm": L.normal_term_grad(Xs, part.topo, part.N0),
                "edge": L.edge_var_grad(Xs, part.topo),
                "cons": L.consistency_grad(Xs, part.topo),
                "lap": L.laplacian_term_grad(Xs, part.topo),
            }
            g = np.zeros_like(Xs)
            for key, (val, gk) in vals.items():
                bd.add(f"reg.{part.name}.{key}", val, rw[key])
                if need_grad and rw[key]:
                    g += rw[key] * gk
            if need_grad:
                grad[part.ids] += g
        if self.frozen is not None:
            grad[self.frozen] = 0.0
        if not math.isfinite(bd.total):
            raise NumericalError("loss is not finite")
        if need_grad:
            bad = np.flatnonzero(~np.isfinite(grad).all(axis=1))
            if len(bad):
                raise NumericalError("non-finite gradient", index=int(bad[0]))
        return bd, grad


def distance_loss(state: DeformationState, target: LabeledPointCloud, config: FitConfig) -> LossBreakdown:
    obj = FitObjective(state, target, config, regularization=False)
    return obj.evaluate(state.positions, need_grad=False)[0]


def regularization_loss(state: DeformationState, config: FitConfig) -> LossBreakdown:
    obj = FitObjective(state, None, config, distance=False)
    return obj.evaluate(state.positions, need_grad=False)[0]


def loss_gradient(state: DeformationState, target: LabeledPointCloud, config: FitConfig):
    """Gradient (n, 3) of the total loss with respect to the loss-frame vertex positions."""
    return FitObjective(state, target, config).evaluate(state.positions)[1]


# ---------------------------------------------------------------- optimizer


def lr_schedule(iteration, config: FitConfig):
    if int(iteration) != iteration or not 0 <= iteration < config.total_iters:
        raise ParameterError(f"iteration {iteration} outside [0, {config.total_iters})")
    return config.initial_lr * 0.5 ** (int(iteration) // config.halve_every)


def adamw_step(state: DeformationState, gradient, config: FitConfig, lr=None):
    """One decoupled-weight-decay Adam update of ``state`` in place; returns the state."""
    g = np.asarray(gradient, float)
    if g.shape != state.positions.shape:
        raise ParameterError("gradient shape does not match positions")
    if lr is None:
        lr = lr_schedule(state.iteration, config)
    b1, b2 = config.beta1, config.beta2
    state.iteration += 1
    t = state.iteration
    state.m = b1 * state.m + (1 - b1) * g
    state.v = b2 * state.v + (1 - b2) * g * g
    m_hat = state.m / (1 - b1 ** t)
    v_hat = state.v / (1 - b2 ** t)
    if config.weight_decay:
        state.positions = state.positions * (1 - lr * config.weight_decay)
    state.positions = state.positions - lr * state.step * m_hat / (np.sqrt(v_hat) + config.eps)
    return state


# ---------------------------------------------------------------- fit loop


@dataclass
class FitTrace:
    names: list
    values: np.ndarray  # (iters, len(names)) raw term values
    weights: np.ndarray
    lr: np.ndarray
    total: np.ndarray

    def column(self, name):
        return self.values[:, self.names.index(name)]

    def breakdown(self, i) -> LossBreakdown:
        return LossBreakdown(dict(zip(self.names, self.values[i].tolist())),
                             dict(zip(self.names, self.weights.tolist())))


@dataclass
class FitResult:
    mesh: LabeledMesh  # same frame as the template passed in
    trace: FitTrace
    final: LossBreakdown
    state: DeformationState
    config: FitConfig

    def summary(self):
        return {
            "iterations": int(self.state.iteration),
            "loss_unit_mm": self.state.scale,
            "step_scale_mm": self.state.step * self.state.scale,
            "initial_total": float(self.trace.total[0]),
            "final_total": self.final.total,
            "final_terms": self.final.terms,
            "config": self.config.to_dict(),
        }


def fit_subject(template: LabeledMesh, target: LabeledPointCloud, config: FitConfig = FitConfig(),
                callback=None) -> FitResult:
    """Deform ``template`` toward ``target`` (already in template space) for ``config.total_iters``
    AdamW steps, recording the loss breakdown at every iteration."""
    config = config.validate()
    target.validate()
    state = DeformationState.from_template(template, config.loss_unit, config.step_scale)
    obj = FitObjective(state, target, config)
    T = config.total_iters
    names = weights = values = None
    lrs = np.empty(T)
    totals = np.empty(T)
    for it in range(T):
        lr = lr_schedule(it, config)
        try:
            bd, g = obj.evaluate(state.positions)
        except NumericalError as exc:
            exc.trace = None if values is None else values[:it]
            raise
        if names is None:
            names = list(bd.terms)
            weights = np.array([bd.weights[k] for k in names])
            values = np.empty((T, len(names)))
        values[it] = [bd.terms[k] for k in names]
        lrs[it] = lr
        totals[it] = bd.total
        adamw_step(state, g, config, lr)
        if callback is not None:
            callback(it, bd)
    final, _ = obj.evaluate(state.positions, need_grad=False)
    trace = FitTrace(names, values, weights, lrs, totals)
    return FitResult(state.mesh(), trace, final, state, config)
