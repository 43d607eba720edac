import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_rotation
from lvshape.errors import InputError
from lvshape.metrics import alignment_report, assd, dice, directed_distances, hd95, sample_surface
from lvshape.mesh import Side
from lvshape.volume import SegmentationVolume
from oracles import brute_assd, brute_dice, brute_hd95, point_triangle_sq


def _vol(labels):
    return SegmentationVolume(np.asarray(labels))


# ---------------------------------------------------------------- dice


def test_dice_examples():
    a = np.zeros((6, 6, 6), int)
    a[:2, :2, :2] = 4
    assert dice(_vol(a), _vol(a), 4) == 1.0
    b = np.zeros_like(a)
    b[4:, 4:, 4:] = 4
    assert dice(_vol(a), _vol(b), 4) == 0.0
    c = np.zeros_like(a)
    c[1:3, :2, :2] = 4  # shifted by one voxel: overlap 4 of 8
    assert dice(_vol(a), _vol(c), 4) == 0.5
    assert dice(_vol(np.zeros_like(a)), _vol(np.zeros_like(a)), 4) == 1.0


def test_dice_grid_mismatch():
    with pytest.raises(InputError):
        dice(_vol(np.zeros((2, 2, 2))), _vol(np.zeros((2, 2, 3))), 1)
    with pytest.raises(InputError):
        dice(_vol(np.zeros((2, 2, 2))), SegmentationVolume(np.zeros((2, 2, 2)), (2, 2, 2)), 1)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_dice_brute_force_and_symmetry(seed):
    rng = np.random.default_rng(seed)
    a = rng.choice([0, 4, 17], size=(5, 6, 6))
    b = rng.choice([0, 4, 17], size=(5, 6, 6))
    d = dice(_vol(a), _vol(b), 4)
    assert abs(d - brute_dice(a, b, 4)) < 1e-12
    assert d == dice(_vol(b), _vol(a), 4)
    # relabelling other codes leaves the score unchanged
    assert d == dice(_vol(np.where(a == 17, 99, a)), _vol(b), 4)


# ---------------------------------------------------------------- surface distances


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.integers(1, 200), st.integers(1, 200))
def test_point_metrics_brute_force(seed, na, nb):
    rng = np.random.default_rng(seed)
    A, B = rng.standard_normal((na, 3)), rng.standard_normal((nb, 3)) + 0.3
    assert abs(assd(A, B) - brute_assd(A, B)) < 1e-9
    assert abs(hd95(A, B) - brute_hd95(A, B)) < 1e-9
    assert assd(A, B) == assd(B, A) and hd95(A, B) == hd95(B, A)


def test_surface_vs_itself(left):
    surf = (left.vertices, left.faces)
    assert assd(surf, surf) < 1e-12 and hd95(surf, surf) < 1e-12


def test_parallel_planes():
    n = 40
    g = np.linspace(0, 100, n + 1)
    X, Y = np.meshgrid(g, g, indexing="ij")
    V0 = np.c_[X.ravel(), Y.ravel(), np.zeros(X.size)]
    idx = np.arange(X.size).reshape(n + 1, n + 1)
    F = np.concatenate([
        np.c_[idx[:-1, :-1].ravel(), idx[1:, :-1].ravel(), idx[1:, 1:].ravel()],
        np.c_[idx[:-1, :-1].ravel(), idx[1:, 1:].ravel(), idx[:-1, 1:].ravel()],
    ])
    d = 1.5
    got = assd((V0, F), (V0 + [0, 0, d], F))
    assert abs(got - d) / d < 0.02


def test_hd95_trims_outlier(rng):
    B = rng.uniform(0, 50, (5000, 3))
    A = np.vstack([B, [[60.0, 60.0, 60.0]]])
    assert hd95(A, B) < 1.0
    assert directed_distances(A, B).max() > 10.0


def test_empty_surfaces():
    with pytest.raises(InputError):
        assd(np.zeros((0, 3)), np.zeros((3, 3)))
    with pytest.raises(InputError):
        hd95(np.zeros((3, 3)), (np.zeros((3, 3)), np.zeros((0, 3), int)))


def test_sample_surface_spacing(left):
    S, owner = sample_surface(left.vertices, left.faces, spacing=0.5)
    assert len(S) > 4 * len(left.faces) and owner.min() == 0 and owner.max() == len(left.faces) - 1
    # every sample lies on its owner face
    tri = left.vertices[left.faces[owner]]
    d = [point_triangle_sq(p, *t) for p, t in zip(S[::97], tri[::97])]
    assert max(d) < 1e-20


def test_mesh_metrics_brute_force(rng):
    from lvshape.primitives import icosphere
    Va, Fa = icosphere(1, radius=3.0)
    Vb, Fb = icosphere(1, radius=3.5, center=(0.2, 0, 0))
    Sa = sample_surface(Va, Fa, 0.5)[0]
    Sb = sample_surface(Vb, Fb, 0.5)[0]
    ab = np.sqrt([min(point_triangle_sq(p, *Vb[f]) for f in Fb) for p in Sa])
    ba = np.sqrt([min(point_triangle_sq(p, *Va[f]) for f in Fa) for p in Sb])
    assert abs(assd((Va, Fa), (Vb, Fb)) - 0.5 * (ab.mean() + ba.mean())) < 1e-9
    want = max(np.percentile(ab, 95), np.percentile(ba, 95))
    assert abs(hd95((Va, Fa), (Vb, Fb)) - want) < 1e-9


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_rigid_invariance_and_order(left, seed):
    rng = np.random.default_rng(seed)
    A = left.vertices[rng.choice(left.n_vertices, 150, replace=False)]
    B = left.vertices[rng.choice(left.n_vertices, 150, replace=False)] + rng.normal(0, 0.5, (150, 3))
    R, t = random_rotation(rng), rng.uniform(-20, 20, 3)
    a0, h0 = assd(A, B), hd95(A, B)
    assert abs(assd(A @ R.T + t, B @ R.T + t) - a0) < 1e-9
    assert abs(hd95(A @ R.T + t, B @ R.T + t) - h0) < 1e-9
    hmax = max(directed_distances(A, B).max(), directed_distances(B, A).max())
    assert 0 <= a0 <= h0 <= hmax


def test_alignment_report_self(template):
    from lvshape.cohort import render_volume
    from lvshape.volume import LabelCodes
    left = template.select_side(Side.LEFT)[0]
    vol = render_volume(left, 1.0, 2.0)
    rep = alignment_report(left, left, vol, LabelCodes().lv[0])
    assert rep.assd < 1e-12 and rep.hd95 < 1e-12 and rep.dsc == 1.0
    assert set(rep.region_assd) == {0, 1, 2, 3, 4}
    shifted = left.with_vertices(left.vertices + [0.0, 0.0, 0.7])
    rep2 = alignment_report(shifted, left, vol, LabelCodes().lv[0])
    assert 0 < rep2.assd <= rep2.hd95 and 0 < rep2.dsc < 1
