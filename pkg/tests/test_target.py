import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from lvshape.cohort import render_volume
from lvshape.errors import EmptyTargetError, FormatError, GeometryError, ParameterError
from lvshape.mesh import NO_PERIPHERAL, Peripheral, Side, Structure
from lvshape.metrics import assd
from lvshape.target import (
    LabeledPointCloud, classify_peripheral_points, extract_boundary_points, fit_anisotropic_scale,
    icp_rigid, load_cloud_csv, load_transforms, prepare_target, save_cloud_csv, save_transforms,
    symmetric_nn_mse,
)
from lvshape.volume import (
    LabelCodes, SegmentationVolume, downsample_segmentation, load_segmentation, save_segmentation,
)

CODES = LabelCodes()
LV_L = CODES.lv[0]


# ---------------------------------------------------------------- volume IO


def test_volume_round_trip(tmp_path, rng):
    labels = rng.choice([0, 4, 17, 43, 53], size=(5, 6, 7))
    vol = SegmentationVolume(labels, (0.5, 1.0, 2.0), (1.0, -2.0, 3.0))
    save_segmentation(vol, tmp_path / "seg.json")
    back = load_segmentation(tmp_path / "seg.json")
    assert np.array_equal(back.labels, vol.labels)
    assert back.spacing == vol.spacing and back.origin == vol.origin


def test_volume_uniform_2x2x2(tmp_path):
    save_segmentation(SegmentationVolume(np.full((2, 2, 2), 4)), tmp_path / "s.json")
    back = load_segmentation(tmp_path / "s.json")
    assert back.dims == (2, 2, 2) and (back.labels == 4).sum() == 8


def test_volume_payload_mismatch(tmp_path):
    save_segmentation(SegmentationVolume(np.full((2, 2, 2), 4)), tmp_path / "s.json")
    (tmp_path / "s.raw").write_bytes(b"\x04" * 7)
    with pytest.raises(FormatError):
        load_segmentation(tmp_path / "s.json")


def test_label_codes_override():
    c = LabelCodes.from_json({"left_lv": 7})
    assert c.lv == (7, 43)
    with pytest.raises(ParameterError):
        LabelCodes.from_json({"left_ventricle": 7})


# ---------------------------------------------------------------- boundary extraction


def test_single_voxel():
    lab = np.zeros((3, 3, 3), int)
    lab[1, 1, 1] = LV_L
    cloud = extract_boundary_points(SegmentationVolume(lab, (1, 1, 1), (0, 0, 0)), [LV_L])
    assert len(cloud) == 1 and np.allclose(cloud.points, [[1.5, 1.5, 1.5]])


@pytest.mark.parametrize("n,expected", [(3, 26), (10, 488)])
def test_solid_block(n, expected):
    lab = np.zeros((n + 2,) * 3, int)
    lab[1:-1, 1:-1, 1:-1] = LV_L
    assert len(extract_boundary_points(SegmentationVolume(lab), [LV_L])) == expected


def test_no_matching_voxels():
    with pytest.raises(EmptyTargetError):
        extract_boundary_points(SegmentationVolume(np.zeros((3, 3, 3), int)), [LV_L])


def _brute_boundary_count(mask):
    n = 0
    I, J, K = mask.shape
    for i in range(I):
        for j in range(J):
            for k in range(K):
                if not mask[i, j, k]:
                    continue
                for d in ((1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)):
                    a, b, c = i + d[0], j + d[1], k + d[2]
                    if not (0 <= a < I and 0 <= b < J and 0 <= c < K) or not mask[a, b, c]:
                        n += 1
                        break
    return n


@settings(max_examples=30, deadline=None)
@given(arrays(np.bool_, st.tuples(st.integers(1, 12), st.integers(1, 12), st.integers(1, 12))))
def test_boundary_count_matches_brute_force(mask):
    if not mask.any():
        return
    lab = np.where(mask, LV_L, 0)
    assert len(extract_boundary_points(SegmentationVolume(lab), [LV_L])) == _brute_boundary_count(mask)


def test_boundary_count_brute_force_32():
    rng = np.random.default_rng(3)
    mask = rng.random((32, 32, 32)) < 0.6
    lab = np.where(mask, LV_L, 0)
    assert len(extract_boundary_points(SegmentationVolume(lab), [LV_L])) == _brute_boundary_count(mask)


# ---------------------------------------------------------------- peripheral classification

PRIORITY = [Peripheral.HIPPOCAMPUS, Peripheral.OPPOSITE_LV, Peripheral.THALAMUS,
            Peripheral.CAUDATE, Peripheral.WHITE_MATTER]


def _code_class(code, side):
    table = {
        CODES.hippocampus[side]: Peripheral.HIPPOCAMPUS,
        CODES.lv[1 - side]: Peripheral.OPPOSITE_LV,
        CODES.thalamus[side]: Peripheral.THALAMUS,
        CODES.caudate[side]: Peripheral.CAUDATE,
        CODES.white_matter[side]: Peripheral.WHITE_MATTER,
    }
    return table.get(int(code))


def _brute_classify(lab, ijk, side):
    for offsets in ([(a, b, c) for a in (0, 1) for b in (0, 1) for c in (0, 1)],
                    [(a, b, c) for a in (-1, 0, 1) for b in (-1, 0, 1) for c in (-1, 0, 1)]):
        found = set()
        for o in offsets:
            q = tuple(int(x + y) for x, y in zip(ijk, o))
            if all(0 <= q[a] < lab.shape[a] for a in range(3)):
                cls = _code_class(lab[q], side)
                if cls is not None:
                    found.add(cls)
        for cls in PRIORITY:
            if cls in found:
                return cls
    return Peripheral.WHITE_MATTER


def _classify_volume(lab):
    vol = SegmentationVolume(lab)
    cloud = extract_boundary_points(vol, [CODES.lv[0], CODES.lv[1]])
    return vol, classify_peripheral_points(cloud, vol)


def test_lv_next_to_hippocampus_only():
    lab = np.zeros((5, 5, 5), int)
    lab[2, 2, 2] = LV_L
    lab[3, 2, 2] = CODES.hippocampus[0]
    _, cloud = _classify_volume(lab)
    assert cloud.peripheral[0] == Peripheral.HIPPOCAMPUS


def test_priority_thalamus_over_white_matter():
    lab = np.zeros((4, 4, 4), int)
    lab[1, 1, 1] = LV_L
    lab[2, 1, 1] = CODES.white_matter[0]
    lab[1, 2, 2] = CODES.thalamus[0]
    _, cloud = _classify_volume(lab)
    assert cloud.peripheral[0] == Peripheral.THALAMUS


def test_classify_matches_brute_force():
    rng = np.random.default_rng(11)
    pool = [0, *CODES.lv, *CODES.hippocampus, *CODES.thalamus, *CODES.caudate, *CODES.white_matter]
    lab = rng.choice(pool, size=(16, 16, 16), p=[0.2] + [0.08] * 10)
    vol, cloud = _classify_volume(lab)
    ijk = np.floor(cloud.points - 0.0).astype(int)
    for i in range(len(cloud)):
        assert cloud.peripheral[i] == _brute_classify(lab, ijk[i], int(cloud.side[i]))
    # never hippocampus without a hippocampus code in the 3x3x3 neighbourhood
    for i in np.flatnonzero(cloud.peripheral == Peripheral.HIPPOCAMPUS):
        a, b, c = ijk[i]
        nb = lab[max(a - 1, 0):a + 2, max(b - 1, 0):b + 2, max(c - 1, 0):c + 2]
        assert (nb == CODES.hippocampus[cloud.side[i]]).any()


def test_cloud_csv_round_trip(tmp_path, rng):
    n = 40
    src = rng.choice([Structure.LV, Structure.HIPPOCAMPUS], n).astype(np.uint8)
    peri = np.where(src == Structure.LV, rng.integers(0, 5, n), NO_PERIPHERAL)
    cloud = LabeledPointCloud(rng.standard_normal((n, 3)) * 30, src, peri, rng.integers(0, 2, n))
    save_cloud_csv(cloud, tmp_path / "c.csv")
    back = load_cloud_csv(tmp_path / "c.csv")
    assert np.array_equal(back.points, cloud.points)
    assert np.array_equal(back.peripheral, cloud.peripheral)
    assert np.array_equal(back.source, cloud.source) and np.array_equal(back.side, cloud.side)


# ---------------------------------------------------------------- ICP / scale


def _rot_z(deg):
    a = np.deg2rad(deg)
    return np.array([[np.cos(a), -np.sin(a), 0], [np.sin(a), np.cos(a), 0], [0, 0, 1]])


def test_icp_identity(left):
    T = icp_rigid(left.vertices, left.vertices)
    assert np.abs(T.rotation - np.eye(3)).max() < 1e-9 and np.abs(T.translation).max() < 1e-9


def test_icp_recovers_inverse(template):
    # combined left+right LV, as in target preparation; one C-shaped horn alone can trap ICP
    P = template.vertices[template.lv_vertex_mask()]
    R = _rot_z(10.0)
    t = np.array([3.0, -2.0, 1.0])
    moved = P @ R.T + t
    T = icp_rigid(moved, P)
    back = T.apply(moved)
    assert np.abs(back - P).max() < 1e-4
    assert abs(T.angle() - np.deg2rad(10.0)) < 1e-4


def test_icp_degenerate():
    with pytest.raises(GeometryError):
        icp_rigid(np.array([[0, 0, 0], [1, 0, 0]], float), np.eye(3))


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_icp_properties(left, seed):
    rng = np.random.default_rng(seed)
    P = left.vertices[rng.choice(left.n_vertices, 300, replace=False)]
    Q = left.vertices[rng.choice(left.n_vertices, 300, replace=False)] @ _rot_z(rng.uniform(-20, 20)).T
    Q = Q + rng.uniform(-5, 5, 3)
    T = icp_rigid(Q, P)
    R = T.rotation
    assert np.abs(R.T @ R - np.eye(3)).max() < 1e-9 and abs(np.linalg.det(R) - 1) < 1e-9
    assert symmetric_nn_mse(T.apply(Q), P) <= symmetric_nn_mse(Q, P)


def test_scale_identity(left):
    s = fit_anisotropic_scale(left.vertices, left.vertices)
    assert np.abs(s.factors - 1).max() < 1e-3 and not s.warning


def test_scale_recovery(left):
    c = left.vertices.mean(0)
    target = c + (left.vertices - c) * np.array([1.3, 0.8, 1.1])
    s = fit_anisotropic_scale(left.vertices, target)
    assert np.abs(s.factors - [1.3, 0.8, 1.1]).max() < 2e-2


def test_scale_bounds_hit(left):
    c = left.vertices.mean(0)
    target = c + (left.vertices - c) * np.array([3.0, 1.0, 1.0])
    with warnings.catch_warnings(record=True):
        warnings.simplefilter("always")
        s = fit_anisotropic_scale(left.vertices, target)
    assert s.factors[0] == 2.0 and s.bounds_hit[0] and s.warning


# ---------------------------------------------------------------- prepare / downsample


@pytest.fixture(scope="module")
def template_volume(template):
    return render_volume(template, 1.0, 2.0)


def test_prepare_self_consistent(template, template_volume, tmp_path):
    prep = prepare_target(template_volume, Side.LEFT, template)
    lv = prep.cloud.points[prep.cloud.source == Structure.LV]
    scaled = prep.scale.apply_to_mesh(template.select_side(Side.LEFT)[0])
    sub = scaled.submesh("lv")
    assert assd(lv, (scaled.vertices[sub.vertex_ids], sub.faces)) < 1.0
    assert set(np.unique(prep.cloud.side)) == {Side.LEFT}
    save_transforms(prep, tmp_path / "t.json")
    T, S = load_transforms(tmp_path / "t.json")
    assert np.array_equal(T.rotation, prep.transform.rotation)
    assert np.array_equal(S.factors, prep.scale.factors)


def test_prepare_deterministic(template, template_volume):
    a = prepare_target(template_volume, Side.RIGHT, template)
    b = prepare_target(template_volume, Side.RIGHT, template)
    assert np.array_equal(a.cloud.points, b.cloud.points)
    assert np.array_equal(a.cloud.peripheral, b.cloud.peripheral)
    assert np.array_equal(a.transform.rotation, b.transform.rotation)
    assert np.array_equal(a.scale.factors, b.scale.factors)


def test_prepare_without_hippocampus(template, template_volume):
    lab = template_volume.labels.copy()
    lab[np.isin(lab, CODES.hippocampus)] = 0
    with pytest.raises(EmptyTargetError):
        prepare_target(SegmentationVolume(lab, template_volume.spacing, template_volume.origin),
                       Side.LEFT, template)


def test_downsample_uniform():
    vol = SegmentationVolume(np.full((6, 6, 6), 17))
    for f in (2, 3):
        out = downsample_segmentation(vol, f)
        assert (out.labels == 17).all() and out.spacing == (float(f),) * 3


def test_downsample_thin_sheet_vanishes():
    lab = np.zeros((8, 8, 8), int)
    lab[:, :, 3] = LV_L
    out = downsample_segmentation(SegmentationVolume(lab), 2)
    assert not (out.labels == LV_L).any()


def test_downsample_bad_factor():
    with pytest.raises(ParameterError):
        downsample_segmentation(SegmentationVolume(np.zeros((4, 4, 4), int)), 1)


def test_downsample_reduces_boundary_points(template_volume):
    full = len(extract_boundary_points(template_volume, list(CODES.lv)))
    coarse = len(extract_boundary_points(downsample_segmentation(template_volume, 2), list(CODES.lv)))
    assert coarse < full
