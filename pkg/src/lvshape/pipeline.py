"""Cohort pipeline: prep -> fit -> eval per subject and side, then SSM and an optional group test.

Subjects are independent, so they can run in worker processes; results are
merged in subject order and every CSV is written with ``repr`` floats, which
makes reruns byte-identical. A subject that fails is recorded and skipped.
"""
from __future__ import annotations

import json
import logging
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import ssm as S
from .cohort import read_manifest
from .errors import InputError, LVShapeError, NumericalError, ParameterError
from .fit import FitConfig, FitResult, fit_subject
from .mesh import LabeledMesh, Peripheral, Side
from .metrics import alignment_report
from .plyio import load_labeled_mesh, save_labeled_mesh, save_scalar_ply
from .stats import vertex_group_test, write_stat_csv
from .target import PreparedTarget, prepare_target, save_cloud_csv, save_transforms
from .volume import LabelCodes, load_segmentation

log = logging.getLogger(__name__)

SIDE_NAMES = {"left": Side.LEFT, "right": Side.RIGHT}
REGION_COLUMNS = [f"assd_{Peripheral(c).name.lower()}" for c in range(5)]
METRIC_COLUMNS = ["subject_id", "group", "side", "status", "dsc", "assd", "hd95", *REGION_COLUMNS,
                  "final_loss", "reference"]

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERICAL, EXIT_PARTIAL = 0, 1, 2, 3, 4


@dataclass(frozen=True)
class RunConfig:
    sides: tuple = ("left", "right")
    ssm_k: int = 3
    ssm_samples: int = 1000
    procrustes: bool = True
    group_test: bool = True
    alpha: float = 0.1
    feature: str = "normal"
    correction: str = "none"
    workers: int = 1
    seed: int = 0

    def validate(self):
        if not self.sides or any(s not in SIDE_NAMES for s in self.sides):
            raise ParameterError("sides must be a nonempty subset of ('left', 'right')")
        if self.ssm_k < 1 or self.ssm_samples < 1 or self.workers < 1:
            raise ParameterError("ssm_k, ssm_samples and workers must be >= 1")
        if not 0 <= self.alpha <= 1:
            raise ParameterError("alpha must lie in [0, 1]")
        return self


def load_config(path=None, **overrides):
    """(FitConfig, RunConfig) from a JSON file: FitConfig fields at top level, pipeline
    options under ``"pipeline"``. Omitted fields keep their defaults."""
    data = {}
    if path is not None:
        try:
            with open(path) as fh:
                data = json.load(fh)
        except ValueError as exc:
            raise ParameterError(f"{path}: invalid JSON ({exc})") from exc
        if not isinstance(data, dict):
            raise ParameterError(f"{path}: config must be a JSON object")
    data = dict(data)
    run = dict(data.pop("pipeline", {}))
    run.update({k: v for k, v in overrides.items() if v is not None})
    names = {f.name for f in fields(RunConfig)}
    if set(run) - names:
        raise ParameterError(f"unknown pipeline fields: {sorted(set(run) - names)}")
    if "sides" in run:
        run["sides"] = tuple(run["sides"])
    return FitConfig.from_dict(data), RunConfig(**run).validate()


def write_trace_csv(result: FitResult, path):
    tr = result.trace
    with open(path, "w") as fh:
        fh.write(",".join(["iter", *tr.names, "total", "lr"]) + "\n")
        for i in range(len(tr.total)):
            vals = [repr(float(v)) for v in tr.values[i]]
            fh.write(",".join([str(i), *vals, repr(float(tr.total[i])), repr(float(tr.lr[i]))]) + "\n")


def write_json(obj, path):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True)
        fh.write("\n")


def fit_prepared(template: LabeledMesh, prepared: PreparedTarget, side, config: FitConfig):
    """Fit one side; returns (FitResult in template space, fitted side mesh in subject space)."""
    side_mesh, _ = template.select_side(side)
    scaled = prepared.scale.apply_to_mesh(side_mesh)
    result = fit_subject(scaled, prepared.cloud, config)
    back = prepared.transform.inverse().apply(result.mesh.vertices)
    return result, result.mesh.with_vertices(back)


def _report_row(subject_id, group, side_name, fitted, vol, gt, codes, final):
    side = SIDE_NAMES[side_name]
    if gt is not None:
        ref, reference = gt.select_side(side)[0], "gt_mesh"
    else:
        from .target import extract_boundary_points

        ref = extract_boundary_points(vol, [codes.lv[side]], codes).points
        reference = "segmentation"
    rep = alignment_report(fitted, ref, vol, codes.lv[side])
    row = {"subject_id": subject_id, "group": group, "side": side_name, "status": "ok",
           "dsc": rep.dsc, "assd": rep.assd, "hd95": rep.hd95, "final_loss": final, "reference": reference}
    for c in range(5):
        row[REGION_COLUMNS[c]] = rep.region_assd.get(c, float("nan"))
    return row


def process_subject(cohort_dir, subject, template: LabeledMesh, fit_cfg: FitConfig, run_cfg: RunConfig,
                    out_dir, codes: LabelCodes = LabelCodes()):
    """Prep, fit and evaluate every configured side of one subject; writes its output folder.

    Returns (metric rows, fitted joint mesh in subject space).
    """
    sid = subject["id"]
    group = subject.get("group", "A")
    sdir = Path(cohort_dir) / sid
    vol = load_segmentation(sdir / "seg.json")
    gt = load_labeled_mesh(sdir / "gt_mesh.ply") if (sdir / "gt_mesh.ply").exists() else None
    out = Path(out_dir) / "subjects" / sid
    joint = template.vertices.copy()
    rows = []
    for name in run_cfg.sides:
        side = SIDE_NAMES[name]
        prepared = prepare_target(vol, side, template, codes)
        result, fitted = fit_prepared(template, prepared, side, fit_cfg)
        d = out / name
        d.mkdir(parents=True, exist_ok=True)
        save_cloud_csv(prepared.cloud, d / "cloud.csv")
        save_transforms(prepared, d / "transforms.json")
        save_labeled_mesh(fitted, d / "fitted.ply")
        write_trace_csv(result, d / "trace.csv")
        write_json({**result.summary(), "seed": run_cfg.seed}, d / "summary.json")
        _, ids = template.select_side(side)
        joint[ids] = fitted.vertices
        rows.append(_report_row(sid, group, name, fitted, vol, gt, codes, result.final.total))
    mesh = template.with_vertices(joint)
    save_labeled_mesh(mesh, out / "fitted_joint.ply")
    return rows, mesh


def _worker(args):
    cohort_dir, subject, template, fit_cfg, run_cfg, out_dir = args
    try:
        rows, mesh = process_subject(cohort_dir, subject, template, fit_cfg, run_cfg, out_dir)
        return subject["id"], rows, mesh, None
    except (LVShapeError, OSError, ValueError, ArithmeticError) as exc:
        kind = "numerical" if isinstance(exc, (NumericalError, ArithmeticError)) else "data"
        return subject["id"], None, None, {"subject_id": subject["id"], "kind": kind,
                                           "error": f"{type(exc).__name__}: {exc}",
                                           "detail": traceback.format_exc(limit=3)}


@dataclass
class RunReport:
    rows: list
    failures: list
    meshes: dict = field(default_factory=dict)
    exit_code: int = EXIT_OK


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_metrics_csv(rows, path):
    with open(path, "w") as fh:
        fh.write(",".join(METRIC_COLUMNS) + "\n")
        for r in rows:
            fh.write(",".join(_fmt(r.get(c, "")) for c in METRIC_COLUMNS) + "\n")


def run_ssm(meshes: dict, template: LabeledMesh, run_cfg: RunConfig, out_dir, side=None):
    """Fit the shape model, write it with mode shapes (j = 1..3, c = -3, 0, 3) and curve metrics."""
    ids = sorted(meshes)
    matrix = S.build_shape_matrix([meshes[i] for i in ids], run_cfg.procrustes, ids, side)
    model = S.pca_fit(matrix)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    S.save_model(model, out / "model.bin", {"seed": run_cfg.seed, "subject_ids": ids})
    for j in range(min(3, model.n_modes)):
        for c in (-3, 0, 3):
            shape = S.sample_mode_shape(model, j, c)
            tag = f"{c:+d}" if c else "0"
            save_labeled_mesh(S.shape_to_mesh(template, model, shape), out / f"mode{j + 1}_{tag}.ply")
    rows = S.model_metrics(model, matrix, run_cfg.ssm_k, run_cfg.ssm_samples, run_cfg.seed)
    S.write_metrics_csv(rows, out / "metrics.csv")
    return model, rows


def run_group_test(group_a: dict, group_b: dict, run_cfg: RunConfig, out_dir, test="rank-sum"):
    ids_a, ids_b = sorted(group_a), sorted(group_b)
    smap = vertex_group_test([group_a[i] for i in ids_a], [group_b[i] for i in ids_b], run_cfg.alpha,
                             run_cfg.feature, test, run_cfg.correction, ids_a, ids_b)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_stat_csv(smap, out / "pvalues.csv")
    ref = group_a[ids_a[0]]
    mean = np.mean([m.vertices for m in [*group_a.values(), *group_b.values()]], axis=0)
    sub = ref.submesh("lv")
    save_scalar_ply(out / "pvalues.ply", mean[sub.vertex_ids], sub.faces,
                    {"p": smap.p, "flag": smap.flag.astype(float)})
    return smap


def pipeline_run(cohort_dir, out_dir, fit_cfg: FitConfig = FitConfig(), run_cfg: RunConfig = RunConfig(),
                 template: LabeledMesh | None = None) -> RunReport:
    """Run the whole cohort. Failed subjects are recorded in failures.json and the
    report's exit code becomes 4; the rest of the cohort still completes."""
    fit_cfg = fit_cfg.validate()
    run_cfg = run_cfg.validate()
    cohort_dir = Path(cohort_dir)
    manifest = read_manifest(cohort_dir)
    if template is None:
        template = load_labeled_mesh(cohort_dir / "template.ply")
    template.validate()
    subjects = sorted(manifest["subjects"], key=lambda s: s["id"])
    if not subjects:
        raise InputError("cohort has no subjects")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    jobs = [(str(cohort_dir), s, template, fit_cfg, run_cfg, str(out)) for s in subjects]
    if run_cfg.workers > 1:
        with ProcessPoolExecutor(run_cfg.workers) as ex:
            results = list(ex.map(_worker, jobs))
    else:
        results = [_worker(j) for j in jobs]

    rows, failures, meshes = [], [], {}
    groups = {s["id"]: s.get("group", "A") for s in subjects}
    for sid, r, mesh, err in results:
        if err is not None:
            log.warning("subject %s failed: %s", sid, err["error"])
            failures.append(err)
            rows.append({"subject_id": sid, "group": groups[sid], "status": "failed"})
            continue
        rows.extend(r)
        meshes[sid] = mesh
    write_metrics_csv(rows, out / "metrics.csv")
    write_json({"failures": failures}, out / "failures.json")

    notes = []
    if len(meshes) >= 2:
        run_ssm(meshes, template, run_cfg, out / "ssm")
    else:
        notes.append("ssm skipped: fewer than two fitted subjects")
    a = {i: m for i, m in meshes.items() if groups[i] == "A"}
    b = {i: m for i, m in meshes.items() if groups[i] == "B"}
    if run_cfg.group_test and a and b:
        run_group_test(a, b, run_cfg, out / "group_test")
    elif run_cfg.group_test:
        notes.append("group test skipped: needs fitted subjects in groups A and B")
    write_json({"seed": run_cfg.seed, "fit_config": fit_cfg.to_dict(), "run_config": asdict(run_cfg),
                "n_subjects": len(subjects), "n_ok": len(meshes), "n_failed": len(failures),
                "notes": notes}, out / "run.json")
    code = EXIT_PARTIAL if failures else EXIT_OK
    return RunReport(rows, failures, meshes, code)
