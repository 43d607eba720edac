"""Command-line entry point (``lvshape``).

Every subcommand loads and checks all of its inputs before it creates any
output. Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical
failure, 4 partial batch failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .errors import LVShapeError, NumericalError, ParameterError
from .pipeline import (
    EXIT_DATA,
    EXIT_NUMERICAL,
    EXIT_OK,
    EXIT_USAGE,
    SIDE_NAMES,
    load_config,
    pipeline_run,
    run_group_test,
    run_ssm,
    write_json,
    write_trace_csv,
)

log = logging.getLogger("lvshape")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _global_flags(p, suppress):
    d = argparse.SUPPRESS if suppress else None
    p.add_argument("--seed", type=int, default=d if suppress else 0, help="root random seed")
    p.add_argument("--workers", type=int, default=d if suppress else 1, help="worker processes")
    p.add_argument("--config", default=d, help="JSON config (FitConfig fields, optional 'pipeline')")
    p.add_argument("--verbose", action="store_true", default=d if suppress else False)


def build_parser():
    ap = _Parser(prog="lvshape", description=__doc__.splitlines()[0])
    _global_flags(ap, suppress=False)
    common = _Parser(add_help=False)
    _global_flags(common, suppress=True)
    sub = ap.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("synth-template", parents=[common], help="write the synthetic joint template")
    p.add_argument("--out", required=True, help="output PLY")
    p.add_argument("--edge-length", type=float, default=2.0)
    p.add_argument("--sides", choices=["both", "left", "right"], default="both")

    p = sub.add_parser("synth-cohort", parents=[common], help="write a synthetic cohort")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=10)
    p.add_argument("--amplitude", type=float, default=3.0)
    p.add_argument("--smoothness", type=float, default=15.0)
    p.add_argument("--rotation", type=float, default=0.0, help="max rigid rotation, degrees")
    p.add_argument("--translation", type=float, default=0.0, help="max rigid offset, mm")
    p.add_argument("--dropout", type=float, default=0.0, help="inferior-region dropout fraction")
    p.add_argument("--spacing", type=float, default=1.0)
    p.add_argument("--group-b", type=int, default=0)
    p.add_argument("--group-effect", type=float, default=0.0)
    p.add_argument("--template", help="template PLY (default: the synthetic template)")

    p = sub.add_parser("prep", parents=[common], help="extract and align a target point cloud")
    p.add_argument("--seg", required=True)
    p.add_argument("--side", required=True, choices=list(SIDE_NAMES))
    p.add_argument("--template", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("fit", parents=[common], help="fit the template to a prepared target")
    p.add_argument("--template", required=True, help="template PLY in target space (prep writes one)")
    p.add_argument("--target", required=True, help="cloud CSV from prep")
    p.add_argument("--transforms", help="transforms JSON from prep: also write the subject-space mesh")
    p.add_argument("--out", required=True)

    p = sub.add_parser("eval", parents=[common], help="alignment metrics of a fitted mesh")
    p.add_argument("--fitted", required=True, help="fitted mesh in subject space")
    p.add_argument("--target-seg", required=True)
    p.add_argument("--reference-mesh", help="ground-truth mesh for ASSD/HD95 instead of the segmentation")
    p.add_argument("--out", required=True, help="report JSON")

    p = sub.add_parser("ssm", parents=[common], help="shape model from fitted meshes")
    p.add_argument("--shapes", required=True, help="directory of fitted PLYs (searched recursively)")
    p.add_argument("--k", type=int, default=3)
    p.add_argument("--samples", type=int, default=1000)
    p.add_argument("--side", choices=list(SIDE_NAMES))
    p.add_argument("--no-procrustes", action="store_true")
    p.add_argument("--out", required=True)

    p = sub.add_parser("group-test", parents=[common], help="vertex-wise two-group test")
    p.add_argument("--groupA", required=True)
    p.add_argument("--groupB", required=True)
    p.add_argument("--alpha", type=float, default=0.1)
    p.add_argument("--feature", choices=["normal", "euclidean"], default="normal")
    p.add_argument("--correction", choices=["none", "bh"], default="none")
    p.add_argument("--test", choices=["rank-sum", "signed-rank"], default="rank-sum")
    p.add_argument("--out", required=True)

    p = sub.add_parser("run", parents=[common], help="full pipeline over a cohort")
    p.add_argument("--cohort", required=True)
    p.add_argument("--out", required=True)
    return ap


# ---------------------------------------------------------------- helpers


def _mesh_files(d):
    d = Path(d)
    if not d.is_dir():
        raise FileNotFoundError(f"{d} is not a directory")
    files = sorted(d.rglob("*.ply"))
    if not files:
        raise FileNotFoundError(f"no PLY files under {d}")
    return files


def _subject_id(root, path):
    rel = path.relative_to(root)
    return rel.parts[0] if len(rel.parts) > 1 else path.stem


def _load_meshes(d):
    """{subject id: mesh}; the id is the top-level folder (or file stem), else the relative path."""
    from .plyio import load_labeled_mesh

    root = Path(d)
    files = _mesh_files(root)
    ids = [_subject_id(root, f) for f in files]
    if len(set(ids)) != len(ids):
        ids = [str(f.relative_to(root)) for f in files]
    return {i: load_labeled_mesh(f) for i, f in zip(ids, files)}


# ---------------------------------------------------------------- commands


def cmd_synth_template(a):
    from .mesh import Side
    from .plyio import save_labeled_mesh
    from .template import TemplateSpec, generate_synthetic_joint_template

    sides = {"both": (Side.LEFT, Side.RIGHT), "left": (Side.LEFT,), "right": (Side.RIGHT,)}[a.sides]
    mesh = generate_synthetic_joint_template(TemplateSpec(edge_length=a.edge_length, sides=sides))
    Path(a.out).parent.mkdir(parents=True, exist_ok=True)
    save_labeled_mesh(mesh, a.out)
    log.info("template: %d vertices, %d faces", mesh.n_vertices, len(mesh.faces))
    return EXIT_OK


def cmd_synth_cohort(a):
    from .cohort import CohortSpec, synth_cohort
    from .plyio import load_labeled_mesh

    spec = CohortSpec(n_subjects=a.n, amplitude=a.amplitude, smoothness=a.smoothness,
                      rotation_deg=a.rotation, translation=a.translation, dropout_fraction=a.dropout,
                      spacing=a.spacing, group_b=a.group_b, group_effect=a.group_effect,
                      seed=a.seed).validate()
    template = load_labeled_mesh(a.template).validate() if a.template else None
    synth_cohort(spec, a.out, template)
    return EXIT_OK


def cmd_prep(a):
    from .plyio import load_labeled_mesh, save_labeled_mesh
    from .target import prepare_target, save_cloud_csv, save_transforms
    from .volume import load_segmentation

    vol = load_segmentation(a.seg)
    template = load_labeled_mesh(a.template).validate()
    side = SIDE_NAMES[a.side]
    prepared = prepare_target(vol, side, template)
    side_mesh, _ = template.select_side(side)
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    save_cloud_csv(prepared.cloud, out / "cloud.csv")
    save_transforms(prepared, out / "transforms.json", {"side": a.side, "seed": a.seed})
    save_labeled_mesh(prepared.scale.apply_to_mesh(side_mesh), out / "template_scaled.ply")
    if prepared.scale.warning:
        log.warning("%s", prepared.scale.warning)
    return EXIT_OK


def cmd_fit(a):
    from .fit import fit_subject
    from .plyio import load_labeled_mesh, save_labeled_mesh
    from .target import load_cloud_csv, load_transforms

    fit_cfg, _ = load_config(a.config)
    template = load_labeled_mesh(a.template).validate()
    target = load_cloud_csv(a.target).validate()
    transforms = load_transforms(a.transforms) if a.transforms else None
    cb = None
    if a.verbose:
        def cb(it, bd):
            if it % 500 == 0:
                log.info("iter %d total %.6g", it, bd.total)
    result = fit_subject(template, target, fit_cfg, callback=cb)
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    save_labeled_mesh(result.mesh, out / "fitted.ply")
    write_trace_csv(result, out / "trace.csv")
    write_json({**result.summary(), "seed": a.seed}, out / "summary.json")
    if transforms is not None:
        rigid = transforms[0]
        back = result.mesh.with_vertices(rigid.inverse().apply(result.mesh.vertices))
        save_labeled_mesh(back, out / "fitted_subject.ply")
    return EXIT_OK


def cmd_eval(a):
    from .metrics import alignment_report
    from .plyio import load_labeled_mesh
    from .target import extract_boundary_points
    from .volume import LabelCodes, load_segmentation

    fitted = load_labeled_mesh(a.fitted).validate()
    vol = load_segmentation(a.target_seg)
    ref_mesh = load_labeled_mesh(a.reference_mesh).validate() if a.reference_mesh else None
    codes = LabelCodes()
    report = {}
    for name, side in SIDE_NAMES.items():
        if not (fitted.side == side).any():
            continue
        part, _ = fitted.select_side(side)
        if ref_mesh is not None:
            ref = ref_mesh.select_side(side)[0]
        else:
            ref = extract_boundary_points(vol, [codes.lv[side]], codes).points
        report[name] = alignment_report(part, ref, vol, codes.lv[side]).to_dict()
    report["reference"] = "mesh" if ref_mesh is not None else "segmentation"
    Path(a.out).parent.mkdir(parents=True, exist_ok=True)
    write_json(report, a.out)
    return EXIT_OK


def cmd_ssm(a):
    _, run_cfg = load_config(a.config, ssm_k=a.k, ssm_samples=a.samples, seed=a.seed,
                             procrustes=not a.no_procrustes)
    meshes = _load_meshes(a.shapes)
    if len(meshes) < 2:
        raise ParameterError("a shape model needs at least two meshes")
    template = meshes[sorted(meshes)[0]]
    run_ssm(meshes, template, run_cfg, a.out, SIDE_NAMES.get(a.side))
    return EXIT_OK


def cmd_group_test(a):
    _, run_cfg = load_config(a.config, alpha=a.alpha, feature=a.feature, correction=a.correction)
    ga, gb = _load_meshes(a.groupA), _load_meshes(a.groupB)
    if set(ga) & set(gb):
        ga = {f"A/{k}": v for k, v in ga.items()}
        gb = {f"B/{k}": v for k, v in gb.items()}
    run_group_test(ga, gb, run_cfg, a.out, a.test)
    return EXIT_OK


def cmd_run(a):
    fit_cfg, run_cfg = load_config(a.config, workers=a.workers, seed=a.seed)
    report = pipeline_run(a.cohort, a.out, fit_cfg, run_cfg)
    ok = sum(r.get("status") == "ok" for r in report.rows)
    log.info("run finished: %d side fits ok, %d subjects failed", ok, len(report.failures))
    return report.exit_code


COMMANDS = {
    "synth-template": cmd_synth_template,
    "synth-cohort": cmd_synth_cohort,
    "prep": cmd_prep,
    "fit": cmd_fit,
    "eval": cmd_eval,
    "ssm": cmd_ssm,
    "group-test": cmd_group_test,
    "run": cmd_run,
}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.workers < 1:
        print("lvshape: --workers must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    try:
        return COMMANDS[args.command](args)
    except ParameterError as exc:
        print(f"lvshape {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NumericalError, ArithmeticError) as exc:
        print(f"lvshape {args.command}: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (LVShapeError, OSError, ValueError, KeyError, json.JSONDecodeError) as exc:
        print(f"lvshape {args.command}: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
