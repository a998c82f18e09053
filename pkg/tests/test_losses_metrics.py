import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pixmesh import autodiff as ad
from pixmesh.autodiff import ShapeError, Tensor
from pixmesh.gradcheck import grad_check
from pixmesh.losses import (NormalLossStats, combined_loss, loss_edge, loss_joint, loss_normal, loss_vertex,
                            weighted_total)
from pixmesh.mesh import JointRegressor, TemplateMesh, rotation_matrix
from pixmesh.metrics import DegenerateConfigurationError, mpjpe, pa_mpjpe, procrustes_align
from pixmesh.templates import capped_tube

from oracles import (loss_edge_loop, loss_joint_loop, loss_normal_loop, loss_vertex_loop, mpjpe_loop,
                     similarity_residual)


@pytest.fixture(scope="module")
def tube():
    return capped_tube()


def perturbed(t, seed, scale=0.05):
    return t.vertices + scale * np.random.default_rng(seed).normal(size=t.vertices.shape)


def random_rotation(rng):
    return rotation_matrix(rng.normal(size=3), rng.uniform(-np.pi, np.pi))


# --- losses: examples ---------------------------------------------------------------

def test_identical_meshes_give_zero(tube):
    v = tube.vertices
    rep = combined_loss(Tensor(v), v, tube.joint_regressor, tube)
    assert (rep.l_vertex, rep.l_joint, rep.l_edge) == (0.0, 0.0, 0.0)
    # each edge lies in its own face, so the normal term vanishes up to rounding
    assert rep.l_normal <= 1e-12 and rep.l_total <= 1e-13


def test_vertex_single_offset():
    T = np.zeros((4, 3))
    M = T.copy()
    M[2, 0] = 1.0
    assert loss_vertex(Tensor(M), T).item() == 1.0


def test_joint_translation_counts_each_joint(tube):
    M = tube.vertices + [0.0, 1.0, 0.0]
    val = loss_joint(Tensor(M), tube.vertices, tube.joint_regressor).item()
    assert val == pytest.approx(tube.joint_regressor.num_joints, abs=1e-12)


def test_edge_uniform_scale(tube):
    e = tube.edges
    total = np.linalg.norm(tube.vertices[e[:, 0]] - tube.vertices[e[:, 1]], axis=1).sum()
    assert loss_edge(Tensor(2 * tube.vertices), tube.vertices, tube).item() == pytest.approx(total, rel=1e-14)


def test_normal_folded_edge_contributes_one():
    # flat target triangle in z = 0; lift vertex 2 straight up so edge (2, 0) becomes parallel to z
    T = np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
    M = np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
    val = loss_normal(Tensor(M), T, [[0, 1, 2]]).item()
    # edges: (0,1) in-plane -> 0, (1,2) -> 1/sqrt(2), (2,0) -> 1
    assert val == pytest.approx(1.0 + 1.0 / np.sqrt(2), abs=1e-15)


def test_normal_skips_degenerate_faces_and_zero_edges():
    T = np.array([[0.0, 0, 0], [1, 0, 0], [2, 0, 0], [0, 1, 0]])
    M = T.copy()
    M[3] = M[0]  # collapse an edge of the valid face
    stats = NormalLossStats()
    val = loss_normal(Tensor(M), T, [[0, 1, 2], [0, 1, 3]], stats).item()
    assert stats.skipped_faces == 1 and stats.skipped_edges == 1
    assert val == pytest.approx(loss_normal_loop(M.tolist(), T.tolist(), [[0, 1, 3]]), abs=1e-15)


def test_component_weighting():
    assert weighted_total(4.0, 2.0, 10.0, 20.0) == 9.0
    a, b, c, d = (Tensor(x) for x in (4.0, 2.0, 10.0, 20.0))
    assert weighted_total(a, b, c, d).item() == 9.0


def test_shape_mismatch_rejected(tube):
    with pytest.raises(ShapeError):
        loss_vertex(Tensor(np.zeros((3, 3))), np.zeros((4, 3)))
    with pytest.raises(ShapeError):
        loss_edge(Tensor(np.zeros((50, 2))), np.zeros((50, 2)), tube)


# --- losses: oracles and properties -------------------------------------------------

@pytest.mark.parametrize("seed", range(10))
def test_losses_match_loop_oracles(seed, tube):
    M, T = perturbed(tube, seed), perturbed(tube, seed + 100)
    W = tube.joint_regressor.W
    Ml, Tl, faces = M.tolist(), T.tolist(), tube.faces.tolist()
    assert loss_vertex(Tensor(M), T).item() == pytest.approx(loss_vertex_loop(Ml, Tl), abs=1e-12)
    assert loss_joint(Tensor(M), T, tube.joint_regressor).item() == pytest.approx(
        loss_joint_loop(Ml, Tl, W.tolist()), abs=1e-12)
    assert loss_edge(Tensor(M), T, tube).item() == pytest.approx(loss_edge_loop(Ml, Tl, faces), abs=1e-12)
    assert loss_normal(Tensor(M), T, tube).item() == pytest.approx(loss_normal_loop(Ml, Tl, faces), abs=1e-10)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.1, 10.0))
def test_translation_and_scale_invariance(seed, s):
    t = capped_tube()
    rng = np.random.default_rng(seed)
    M, T = perturbed(t, seed), perturbed(t, seed + 1)
    shift = rng.normal(size=3)
    e0, n0 = loss_edge(Tensor(M), T, t).item(), loss_normal(Tensor(M), T, t).item()
    assert loss_edge(Tensor(M + shift), T, t).item() == pytest.approx(e0, rel=1e-9, abs=1e-12)
    assert loss_normal(Tensor(M + shift), T, t).item() == pytest.approx(n0, rel=1e-9, abs=1e-12)
    assert loss_normal(Tensor(s * M), T, t).item() == pytest.approx(n0, rel=1e-9, abs=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_generic_perturbation_is_strictly_positive(seed):
    t = capped_tube()
    M = perturbed(t, seed, 1e-3)
    rep = combined_loss(Tensor(M), t.vertices, t.joint_regressor, t)
    assert min(rep.l_vertex, rep.l_joint, rep.l_edge, rep.l_normal) > 0


def test_report_row_and_total(tube):
    M, T = perturbed(tube, 1), perturbed(tube, 2)
    rep = combined_loss(Tensor(M), T, tube.joint_regressor, tube)
    assert rep.l_total == rep.total.item()
    assert rep.l_total == pytest.approx(rep.l_vertex + rep.l_joint + 0.1 * rep.l_normal + 0.1 * rep.l_edge,
                                        rel=1e-15)
    assert list(rep.row()) == ["l_vertex", "l_joint", "l_edge", "l_normal", "l_total"]


@pytest.mark.parametrize("name", ["vertex", "joint", "edge", "normal", "total"])
def test_loss_gradients(name, tube):
    M, T = perturbed(tube, 3), perturbed(tube, 4)
    W = tube.joint_regressor
    fn = {
        "vertex": lambda m: loss_vertex(m, T),
        "joint": lambda m: loss_joint(m, T, W),
        "edge": lambda m: loss_edge(m, T, tube),
        "normal": lambda m: loss_normal(m, T, tube),
        "total": lambda m: combined_loss(m, T, W, tube).total,
    }[name]
    rep = grad_check(fn, [ad.parameter(M)], tol=1e-4)
    assert rep.passed, rep


# --- metrics --------------------------------------------------------------------------

def test_mpjpe_examples():
    rng = np.random.default_rng(0)
    J = rng.normal(size=(12, 3))
    assert mpjpe(J, J) == 0.0
    assert mpjpe(J + [1.0, -2.0, 3.0], J) == pytest.approx(0.0, abs=1e-15)
    with pytest.raises(ValueError):
        mpjpe(J, J[:5])


@pytest.mark.parametrize("seed", range(10))
def test_mpjpe_matches_loop_oracle(seed):
    rng = np.random.default_rng(seed)
    J, T = rng.normal(size=(12, 3)), rng.normal(size=(12, 3))
    root = seed % 12
    assert mpjpe(J, T, root) == pytest.approx(mpjpe_loop(J.tolist(), T.tolist(), root), abs=1e-12)


def test_mpjpe_joint_mask():
    rng = np.random.default_rng(1)
    J, T = rng.normal(size=(6, 3)), rng.normal(size=(6, 3))
    mask = np.array([True, True, False, True, False, True])
    Jr, Tr = J - J[0], T - T[0]
    expect = np.mean(np.linalg.norm((Jr - Tr)[mask], axis=1))
    assert mpjpe(J, T, 0, mask) == pytest.approx(expect, abs=1e-15)


def test_procrustes_identity():
    J = np.random.default_rng(2).normal(size=(8, 3))
    T = procrustes_align(J, J)
    assert T.scale == pytest.approx(1.0, abs=1e-9)
    np.testing.assert_allclose(T.rotation, np.eye(3), atol=1e-9)
    np.testing.assert_allclose(T.translation, 0.0, atol=1e-9)


@pytest.mark.parametrize("seed", range(5))
def test_procrustes_recovers_exact_model(seed):
    rng = np.random.default_rng(seed)
    J = rng.normal(size=(10, 3))
    R0, t0 = random_rotation(rng), rng.normal(size=3)
    T = procrustes_align(J, 2 * J @ R0.T + t0)
    assert T.scale == pytest.approx(2.0, abs=1e-9)
    np.testing.assert_allclose(T.rotation, R0, atol=1e-9)
    np.testing.assert_allclose(T.translation, t0, atol=1e-9)
    assert np.linalg.det(T.rotation) == pytest.approx(1.0, abs=1e-12)
    assert pa_mpjpe(J, 2 * J @ R0.T + t0) <= 1e-9


def test_reflected_target_still_gets_a_proper_rotation():
    rng = np.random.default_rng(3)
    J = rng.normal(size=(9, 3))
    T = procrustes_align(J, J * [1.0, 1.0, -1.0])
    assert np.linalg.det(T.rotation) == pytest.approx(1.0, abs=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_procrustes_beats_random_similarities(seed):
    rng = np.random.default_rng(seed)
    J = rng.normal(size=(12, 3))
    T = 1.5 * J @ random_rotation(rng).T + rng.normal(size=3) + 0.2 * rng.normal(size=(12, 3))
    best = procrustes_align(J, T)
    r = similarity_residual(J, T, best.scale, best.rotation, best.translation)
    for _ in range(1000):
        s = np.exp(rng.normal(0.4, 0.5))
        cand = similarity_residual(J, T, s, random_rotation(rng), rng.normal(size=3) * 2)
        assert r <= cand
    # local perturbations of the optimum do not help either
    for _ in range(200):
        dR = rotation_matrix(rng.normal(size=3), rng.normal(0, 0.01))
        cand = similarity_residual(J, T, best.scale * (1 + rng.normal(0, 0.01)), dR @ best.rotation,
                                   best.translation + rng.normal(0, 0.01, 3))
        assert r <= cand + 1e-12


def test_procrustes_not_worse_than_grid_search():
    # exhaustive grid over scale, z-rotation and translation in the plane the data live in
    rng = np.random.default_rng(4)
    J = np.c_[rng.normal(size=(6, 2)), np.zeros(6)]
    T = np.c_[rng.normal(size=(6, 2)), np.zeros(6)]
    best = procrustes_align(np.vstack([J, [[0, 0, 1e-3]]]), np.vstack([T, [[0, 0, 1e-3]]]))
    closed = similarity_residual(J, T, best.scale, best.rotation, best.translation)
    grid = np.inf
    for s, a, tx, ty in itertools.product(np.linspace(0.1, 2, 20), np.linspace(-np.pi, np.pi, 37),
                                          np.linspace(-1, 1, 11), np.linspace(-1, 1, 11)):
        grid = min(grid, similarity_residual(J, T, s, rotation_matrix((0, 0, 1), a), np.array([tx, ty, 0.0])))
    assert closed <= grid + 1e-9


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_pa_mpjpe_not_above_mpjpe(seed):
    rng = np.random.default_rng(seed)
    J = rng.normal(size=(12, 3))
    T = J @ random_rotation(rng).T * rng.uniform(0.5, 2) + rng.normal(scale=0.3, size=(12, 3))
    assert pa_mpjpe(J, T) <= mpjpe(J, T) + 1e-9


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_metric_invariances(seed):
    rng = np.random.default_rng(seed)
    J, T = rng.normal(size=(12, 3)), rng.normal(size=(12, 3))
    shift = rng.normal(size=3)
    assert mpjpe(J + shift, T + shift) == pytest.approx(mpjpe(J, T), rel=1e-9)
    R, s = random_rotation(rng), rng.uniform(0.2, 5)
    base = pa_mpjpe(J, T)
    # any similarity on the prediction is absorbed; a rigid motion of the target moves the optimum with it
    assert pa_mpjpe(s * J @ R.T + shift, T) == pytest.approx(base, rel=1e-9)
    assert pa_mpjpe(J, T @ R.T + shift) == pytest.approx(base, rel=1e-9)


def test_degenerate_configurations_rejected():
    line = np.outer(np.arange(5.0), [1.0, 2.0, 3.0])
    with pytest.raises(DegenerateConfigurationError, match="collinear"):
        procrustes_align(line, np.random.default_rng(0).normal(size=(5, 3)))
    with pytest.raises(DegenerateConfigurationError):
        procrustes_align(np.ones((4, 3)), np.zeros((4, 3)))
    with pytest.raises(DegenerateConfigurationError):
        pa_mpjpe(np.eye(3)[:2], np.eye(3)[:2])


def test_pa_mpjpe_mask_drops_joints():
    rng = np.random.default_rng(5)
    J = rng.normal(size=(8, 3))
    T = J.copy()
    T[7] += 10.0
    mask = np.ones(8, bool)
    mask[7] = False
    assert pa_mpjpe(J, T, mask) <= 1e-9 < pa_mpjpe(J, T)


def test_losses_on_small_hand_mesh():
    # single planar quad: loss values by hand
    v = np.array([[0.0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0]])
    t = TemplateMesh(v, [[0, 1, 2], [0, 2, 3]], np.ones(4, int), [[0.1, 0.1], [0.9, 0.1], [0.9, 0.9], [0.1, 0.9]],
                     1, JointRegressor(np.full((1, 4), 0.25)))
    M = v.copy()
    M[2] = [1.0, 1.0, 1.0]
    rep = combined_loss(Tensor(M), v, t.joint_regressor, t)
    assert rep.l_vertex == 1.0
    assert rep.l_joint == pytest.approx(0.25, abs=1e-15)
    # edges (1,2) and (2,3) grow from 1 to sqrt 2; diagonal (0,2) from sqrt 2 to sqrt 3
    assert rep.l_edge == pytest.approx(2 * (np.sqrt(2) - 1) + np.sqrt(3) - np.sqrt(2), abs=1e-14)
    # every lifted edge makes an angle with the z normal: 1/sqrt2 twice per face for the side edges, 1/sqrt3 for the diagonal
    assert rep.l_normal == pytest.approx(2 / np.sqrt(2) + 2 / np.sqrt(3), abs=1e-14)
