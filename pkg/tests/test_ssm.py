import numpy as np
import pytest

from conftest import random_rotation
from lvshape.cohort import CohortSpec, deform_template
from lvshape.errors import FormatError, InputError, ParameterError
from lvshape.ssm import (
    ShapeMatrix, build_shape_matrix, compactness, generalization, load_model, model_metrics, pca_fit,
    sample_mode_shape, save_model, shape_to_mesh, specificity, write_metrics_csv,
)


def _rank1(template, coef, seed=0):
    """Meshes template + c_i * d for one fixed LV displacement field d."""
    rng = np.random.default_rng(seed)
    d = np.zeros_like(template.vertices)
    lv = template.lv_vertex_mask()
    d[lv] = rng.standard_normal((lv.sum(), 3))
    return [template.with_vertices(template.vertices + c * d) for c in coef], d[lv].ravel()


@pytest.fixture(scope="module")
def cohort12(template):
    spec = CohortSpec(amplitude=3.0, rotation_deg=5.0, translation=2.0)
    return [deform_template(template, spec, np.random.default_rng([11, i]))[0] for i in range(12)]


@pytest.fixture(scope="module")
def model12(cohort12):
    M = build_shape_matrix(cohort12)
    return M, pca_fit(M)


# ---------------------------------------------------------------- shape matrix


def test_identical_meshes_give_identical_rows(template):
    M = build_shape_matrix([template] * 3)
    assert np.abs(M.data - M.data[0]).max() < 1e-9
    assert len(M.vertex_ids) == template.lv_vertex_mask().sum()


def test_procrustes_removes_rigid_motion(template, rng):
    R, t = random_rotation(rng), rng.uniform(-10, 10, 3)
    moved = template.with_vertices(template.vertices @ R.T + t)
    M = build_shape_matrix([template, moved])
    assert np.abs(M.data[0] - M.data[1]).max() < 1e-6
    raw = build_shape_matrix([template, moved], procrustes=False)
    assert np.abs(raw.data[0] - raw.data[1]).max() > 1.0


def test_topology_mismatch(template):
    left = template.select_side(0)[0]
    with pytest.raises(InputError):
        build_shape_matrix([template, left])
    with pytest.raises(InputError):
        build_shape_matrix([])
    with pytest.raises(InputError):
        build_shape_matrix([template], subject_ids=["a", "b"])


def test_side_restriction(template):
    M = build_shape_matrix([template] * 2, side=0)
    assert (template.side[M.vertex_ids] == 0).all()


# ---------------------------------------------------------------- PCA


def test_rank_one_data(template):
    meshes, d = _rank1(template, [-1.0, -0.3, 0.2, 0.5, 1.1])
    model = pca_fit(build_shape_matrix(meshes, procrustes=False))
    ev = model.eigenvalues
    assert ev[0] > 0 and (ev[1:] < 1e-9 * ev[0]).all()
    cos = abs(model.modes[0] @ d) / np.linalg.norm(d)
    assert cos > 1 - 1e-9
    assert abs(compactness(model, 1) - 1.0) < 1e-9


def test_reconstruction_and_orthonormality(model12):
    M, model = model12
    G = model.modes @ model.modes.T
    assert np.abs(G - np.eye(model.n_modes)).max() < 1e-9
    rec = model.reconstruct(model.project(M.data))
    assert np.abs(rec - M.data).max() < 1e-8
    assert model.n_modes == M.n_subjects - 1
    assert (np.diff(model.eigenvalues) <= 1e-12).all()


def test_pca_needs_two(template):
    with pytest.raises(InputError):
        pca_fit(build_shape_matrix([template]))
    with pytest.raises(InputError):
        ShapeMatrix(np.zeros((2, 4)), [], np.arange(2), False)


def test_mode_shapes(model12):
    _, model = model12
    assert np.array_equal(sample_mode_shape(model, 0, 0.0), model.mean)
    plus, minus = sample_mode_shape(model, 1, 3.0), sample_mode_shape(model, 1, -3.0)
    assert np.abs((plus - model.mean) + (minus - model.mean)).max() < 1e-9
    assert abs(np.linalg.norm(plus - model.mean) - 3 * np.sqrt(model.eigenvalues[1])) < 1e-9
    with pytest.raises(ParameterError):
        sample_mode_shape(model, model.n_modes, 1.0)


# ---------------------------------------------------------------- metrics


def test_compactness_monotone(model12):
    _, model = model12
    c = [compactness(model, k) for k in range(model.n_modes + 1)]
    assert c[0] == 0 and (np.diff(c) >= 0).all() and abs(c[-1] - 1.0) < 1e-9
    with pytest.raises(ParameterError):
        compactness(model, model.n_modes + 1)


def test_generalization(template, model12):
    M, _ = model12
    g = [generalization(M, k) for k in range(0, 11)]
    assert (np.diff(g) <= 1e-9).all(), g
    # k = 0 is the distance of each held-out shape to the mean of the rest
    X = M.data
    want = np.mean([np.linalg.norm((np.delete(X, i, 0).mean(0) - X[i]).reshape(-1, 3), axis=1).mean()
                    for i in range(len(X))])
    assert abs(g[0] - want) < 1e-12
    assert generalization(build_shape_matrix([template] * 4), 2) < 1e-9
    with pytest.raises(InputError):
        generalization(build_shape_matrix([template] * 2), 1)


def test_specificity(template, model12):
    M, model = model12
    one = build_shape_matrix([template] * 2)
    assert specificity(pca_fit(one), one, 0, n_samples=10) < 1e-12
    assert specificity(model, M, 3, 200, seed=5) == specificity(model, M, 3, 200, seed=5)
    assert specificity(model, M, 3, 200, seed=5) != specificity(model, M, 3, 200, seed=6)
    with pytest.raises(ParameterError):
        specificity(model, M, 2, n_samples=0)


def test_specificity_rank_one_oracle(template):
    coef = np.array([-1.0, -0.3, 0.2, 0.5, 1.1])
    meshes, d = _rank1(template, coef)
    M = build_shape_matrix(meshes, procrustes=False)
    model = pca_fit(M)
    got = specificity(model, M, 1, n_samples=300, seed=2)
    # samples lie on the line mean + s * d; distance to shape i is |s - c_i| * mean |d_v|
    z = np.random.default_rng(2).standard_normal((300, 1))[:, 0]
    s = z * np.sqrt(model.eigenvalues[0]) / np.linalg.norm(d)
    sign = np.sign(model.modes[0] @ d)
    s = coef.mean() + sign * s
    dv = np.linalg.norm(d.reshape(-1, 3), axis=1).mean()
    want = np.mean(np.min(np.abs(s[:, None] - coef[None]), axis=1)) * dv
    assert abs(got - want) < 1e-9 * max(1.0, want)


def test_model_metrics_csv(model12, tmp_path):
    M, model = model12
    rows = model_metrics(model, M, 3, n_samples=50)
    assert [r[0] for r in rows] == [1, 2, 3]
    write_metrics_csv(rows, tmp_path / "m.csv")
    lines = (tmp_path / "m.csv").read_text().splitlines()
    assert lines[0] == "k,compactness,generalization_mm,specificity_mm" and len(lines) == 4


# ---------------------------------------------------------------- io


def test_model_round_trip(model12, template, tmp_path):
    _, model = model12
    save_model(model, tmp_path / "m.bin", extra={"seed": 3})
    back = load_model(tmp_path / "m.bin")
    for name in ("mean", "modes", "eigenvalues", "vertex_ids"):
        assert np.array_equal(getattr(back, name), getattr(model, name))
    assert back.total_variance == model.total_variance and back.procrustes == model.procrustes
    mesh = shape_to_mesh(template, back, back.mean)
    assert mesh.n_vertices == len(model.vertex_ids) and mesh.faces.max() < mesh.n_vertices


def test_model_bad_files(model12, tmp_path):
    _, model = model12
    (tmp_path / "x.bin").write_bytes(b"NOTAMODEL" + bytes(40))
    with pytest.raises(FormatError):
        load_model(tmp_path / "x.bin")
    save_model(model, tmp_path / "m.bin")
    raw = (tmp_path / "m.bin").read_bytes()
    (tmp_path / "t.bin").write_bytes(raw[:-8])
    with pytest.raises(FormatError):
        load_model(tmp_path / "t.bin")
