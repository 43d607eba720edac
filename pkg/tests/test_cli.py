import json
import subprocess
import sys

import numpy as np
import pytest

from lvshape.cli import main
from lvshape.plyio import load_labeled_mesh
from lvshape.ssm import load_model

SHORT = {"total_iters": 50, "pipeline": {"ssm_samples": 50}}


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    (d / "short.json").write_text(json.dumps(SHORT))
    assert main(["synth-cohort", "--out", str(d / "coh"), "--n", "4", "--group-b", "2",
                 "--group-effect", "1.0", "--seed", "2"]) == 0
    return d


@pytest.fixture(scope="module")
def run1(work):
    code = main(["run", "--cohort", str(work / "coh"), "--out", str(work / "r1"),
                 "--config", str(work / "short.json"), "--seed", "2"])
    assert code == 0
    return work / "r1"


def test_console_script_help():
    out = subprocess.run([sys.executable, "-m", "lvshape.cli", "--help"], capture_output=True, text=True)
    assert out.returncode == 0
    for cmd in ("synth-template", "synth-cohort", "prep", "fit", "eval", "ssm", "group-test", "run"):
        assert cmd in out.stdout


def test_synth_template(tmp_path):
    assert main(["synth-template", "--out", str(tmp_path / "t.ply"), "--sides", "left"]) == 0
    mesh = load_labeled_mesh(tmp_path / "t.ply").validate()
    assert (mesh.side == 0).all() and mesh.n_vertices > 500


def test_prep_fit_eval_chain(work, tmp_path):
    coh = work / "coh"
    assert main(["prep", "--seg", str(coh / "sub-000/seg.json"), "--side", "left",
                 "--template", str(coh / "template.ply"), "--out", str(tmp_path / "prep")]) == 0
    for f in ("cloud.csv", "transforms.json", "template_scaled.ply"):
        assert (tmp_path / "prep" / f).exists()
    assert main(["fit", "--template", str(tmp_path / "prep/template_scaled.ply"),
                 "--target", str(tmp_path / "prep/cloud.csv"),
                 "--transforms", str(tmp_path / "prep/transforms.json"),
                 "--config", str(work / "short.json"), "--out", str(tmp_path / "fit")]) == 0
    summary = json.loads((tmp_path / "fit/summary.json").read_text())
    assert summary["seed"] == 0
    trace = (tmp_path / "fit/trace.csv").read_text().splitlines()
    assert len(trace) == 1 + 50 and trace[0].startswith("iter,")
    assert main(["eval", "--fitted", str(tmp_path / "fit/fitted_subject.ply"),
                 "--target-seg", str(coh / "sub-000/seg.json"),
                 "--reference-mesh", str(coh / "sub-000/gt_mesh.ply"),
                 "--out", str(tmp_path / "eval.json")]) == 0
    rep = json.loads((tmp_path / "eval.json").read_text())
    assert set(rep) == {"left", "reference"} and rep["left"]["assd"] < 2.0


def test_run_outputs(run1):
    for f in ("metrics.csv", "failures.json", "run.json", "ssm/model.bin", "ssm/metrics.csv",
              "ssm/mode1_+3.ply", "group_test/pvalues.csv", "group_test/pvalues.ply",
              "subjects/sub-000/left/fitted.ply", "subjects/sub-003/fitted_joint.ply"):
        assert (run1 / f).exists(), f
    lines = (run1 / "metrics.csv").read_text().splitlines()
    assert len(lines) == 1 + 4 * 2 and all(",ok," in ln for ln in lines[1:])
    assert json.loads((run1 / "run.json").read_text())["seed"] == 2
    assert load_model(run1 / "ssm/model.bin").n_modes == 3


def test_run_is_byte_deterministic(work, run1):
    out = work / "r2"
    assert main(["run", "--cohort", str(work / "coh"), "--out", str(out), "--config",
                 str(work / "short.json"), "--seed", "2", "--workers", "2"]) == 0
    for f in ("metrics.csv", "group_test/pvalues.csv", "ssm/metrics.csv", "ssm/model.bin"):
        assert (run1 / f).read_bytes() == (out / f).read_bytes(), f


def test_ssm_and_group_test_commands(work, run1, tmp_path):
    subj = run1 / "subjects"
    ga, gb = tmp_path / "A", tmp_path / "B"
    for g, ids in ((ga, ("sub-000", "sub-001")), (gb, ("sub-002", "sub-003"))):
        for i in ids:
            for dst in (g / i, tmp_path / "all" / i):
                dst.mkdir(parents=True)
                (dst / "fitted_joint.ply").write_bytes((subj / i / "fitted_joint.ply").read_bytes())
    assert main(["ssm", "--shapes", str(tmp_path / "all"), "--k", "2", "--samples", "20",
                 "--out", str(tmp_path / "ssm")]) == 0
    assert len((tmp_path / "ssm/metrics.csv").read_text().splitlines()) == 3
    assert load_model(tmp_path / "ssm/model.bin").n_modes == 3
    assert main(["group-test", "--groupA", str(ga), "--groupB", str(gb), "--correction", "bh",
                 "--out", str(tmp_path / "gt")]) == 0
    rows = (tmp_path / "gt/pvalues.csv").read_text().splitlines()
    assert rows[0] == "vertex_id,peri_class,p,flag" and len(rows) > 100
    # side meshes mixed with joint meshes are rejected before anything is written
    assert main(["ssm", "--shapes", str(subj), "--out", str(tmp_path / "bad")]) == 2
    assert not (tmp_path / "bad").exists()


def test_fail_soft_partial(work, tmp_path):
    import shutil
    coh = tmp_path / "coh"
    shutil.copytree(work / "coh", coh)
    raw = coh / "sub-001" / "seg.raw"
    raw.write_bytes(raw.read_bytes()[:100])
    code = main(["run", "--cohort", str(coh), "--out", str(tmp_path / "r"),
                 "--config", str(work / "short.json")])
    assert code == 4
    fails = json.loads((tmp_path / "r/failures.json").read_text())["failures"]
    assert [f["subject_id"] for f in fails] == ["sub-001"] and fails[0]["kind"] == "data"
    metrics = (tmp_path / "r/metrics.csv").read_text()
    assert "sub-001,A,,failed" in metrics and metrics.count(",ok,") == 6
    assert (tmp_path / "r/ssm/model.bin").exists()


@pytest.mark.parametrize("argv", [
    [], ["frobnicate"], ["fit", "--out", "x"], ["ssm", "--shapes", "x", "--out", "y", "--k", "many"],
    ["--workers", "0", "synth-template", "--out", "t.ply"],
])
def test_usage_errors(argv, tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    assert main(argv) == 1
    assert not any(tmp_path.iterdir())


def test_bad_parameters_exit_1_before_writing(work, tmp_path):
    (tmp_path / "bad.json").write_text(json.dumps({"initial_lr": -1}))
    assert main(["run", "--cohort", str(work / "coh"), "--out", str(tmp_path / "o"),
                 "--config", str(tmp_path / "bad.json")]) == 1
    assert main(["synth-cohort", "--out", str(tmp_path / "c"), "--amplitude", "-2"]) == 1
    (tmp_path / "unk.json").write_text(json.dumps({"pipeline": {"colour": 3}}))
    assert main(["run", "--cohort", str(work / "coh"), "--out", str(tmp_path / "o"),
                 "--config", str(tmp_path / "unk.json")]) == 1
    assert not (tmp_path / "o").exists() and not (tmp_path / "c").exists()


def test_data_errors_exit_2_before_writing(work, tmp_path):
    coh = work / "coh"
    assert main(["prep", "--seg", str(tmp_path / "missing.json"), "--side", "left",
                 "--template", str(coh / "template.ply"), "--out", str(tmp_path / "p")]) == 2
    (tmp_path / "cloud.csv").write_text("x,y,z,label\n1,2,oops,0\n")
    assert main(["fit", "--template", str(coh / "template.ply"), "--target", str(tmp_path / "cloud.csv"),
                 "--out", str(tmp_path / "f")]) == 2
    assert main(["run", "--cohort", str(tmp_path), "--out", str(tmp_path / "r")]) == 2
    assert not any((tmp_path / n).exists() for n in ("p", "f", "r"))


def test_numerical_failure_exit_3(work, tmp_path):
    coh = work / "coh"
    assert main(["prep", "--seg", str(coh / "sub-000/seg.json"), "--side", "left",
                 "--template", str(coh / "template.ply"), "--out", str(tmp_path / "prep")]) == 0
    (tmp_path / "big.json").write_text(json.dumps({"initial_lr": 1e306, "total_iters": 5}))
    assert main(["fit", "--template", str(tmp_path / "prep/template_scaled.ply"),
                 "--target", str(tmp_path / "prep/cloud.csv"), "--config", str(tmp_path / "big.json"),
                 "--out", str(tmp_path / "fit")]) == 3
    assert not (tmp_path / "fit").exists()


def test_fitted_joint_meshes_valid(run1):
    m = load_labeled_mesh(run1 / "subjects/sub-002/fitted_joint.ply").validate()
    assert np.isfinite(m.vertices).all()
