"""End-to-end acceptance suite: one test and one PASS/FAIL line per criterion."""
import subprocess
import sys
import time

import numpy as np
import pytest

from pixmesh.autodiff import Tensor
from pixmesh.config import PRESETS
from pixmesh.correspondence import CorrespondenceSet, IuvImage, vertex_to_pixel, vertex_to_pixel_scan
from pixmesh.features import (BackboneConfig, FeaturePyramid, backbone_forward, bilinear_sample, feature_layout,
                              vertex_features)
from pixmesh.gradcheck import grad_check
from pixmesh.graphnet import GraphNet, GraphNetConfig, GraphPattern, gcn_forward, init_graphnet
from pixmesh.losses import combined_loss, loss_edge, loss_joint, loss_normal, loss_vertex, weighted_total
from pixmesh.mesh import rotation_matrix
from pixmesh.metrics import mpjpe, pa_mpjpe, procrustes_align
from pixmesh.scene import Camera, iuv_from_raster, make_scene, rasterize
from pixmesh.templates import capped_tube, capsule_man
from pixmesh.training import Pipeline, compare

import test_autodiff
from oracles import (loss_edge_loop, loss_joint_loop, loss_normal_loop, loss_vertex_loop, similarity_residual)


def random_rotation(rng):
    return rotation_matrix(rng.normal(size=3), rng.uniform(-np.pi, np.pi))


# 1 ---------------------------------------------------------------------------------

@pytest.fixture(scope="module")
def desk_ablation(tmp_path_factory):
    out = tmp_path_factory.mktemp("desk")
    t0 = time.perf_counter()
    reps = []
    for seed in (0, 1, 2):
        base = PRESETS["desk"](seed=seed)
        reps.append(compare(base.with_overrides(feature_mode="local"), base.with_overrides(feature_mode="global"),
                            out / f"seed{seed}"))
    return reps, (time.perf_counter() - t0) / 60


def test_criterion_1_local_beats_global_on_desk(verdict, desk_ablation):
    reps, minutes = desk_ablation
    finals, below, tails = [], [], []
    for rep in reps:
        loc, glo = rep["results"]["a"].curve("test"), rep["results"]["b"].curve("test")
        n = len(loc)
        tail = range(n - n // 3, n)
        finals.append((loc[-1], glo[-1]))
        below.append(all(loc[i] < glo[i] for i in tail))
        tails.append(max(loc[i] - glo[i] for i in tail))
    wins = sum(a < b for a, b in finals)
    ok = wins == 3 and all(below) and minutes < 30
    detail = "; ".join(f"seed {s}: local {a:.4f} vs global {b:.4f}" for s, (a, b) in enumerate(finals))
    verdict(1, "directional ablation", ok,
            f"{wins}/3 wins, tail below in {sum(below)}/3, worst tail gap {max(tails):+.4f}, {detail}, "
            f"{minutes:.1f} min")


def test_desk_training_loss_drops_below_a_fifth(desk_ablation):
    reps, _ = desk_ablation
    for rep in reps:
        res = rep["results"]["a"]
        assert res.curve("train", "l_total")[-1] < 0.2 * res.initial["train"]["l_total"]


# 2 ---------------------------------------------------------------------------------

def test_criterion_2_gradient_integrity(verdict):
    t0 = time.perf_counter()
    cfg = PRESETS["tiny"]()
    pipe = Pipeline.from_config(cfg)
    sample = pipe.sample(3)
    assert sample.scene.image.shape == (3, 16, 16) and pipe.template.num_vertices == 50
    assert sample.corr.present.any()
    rng = np.random.default_rng(0)
    # move every bias and logit off zero so no ReLU sits exactly at its kink
    for k, p in pipe.params.items():
        if k.endswith("bias") or k.endswith("edge_logits"):
            p.data[...] = rng.uniform(0.05, 0.2, p.shape)
    keys = sorted(pipe.params)
    W, tmpl, gt = pipe.template.joint_regressor, pipe.template, sample.scene.gt_mesh

    def loss(*vals):
        params = dict(zip(keys, vals))
        pyr = backbone_forward(sample.scene.image, params, pipe.backbone)
        feats = vertex_features(pyr, sample.corr, tmpl, "local")
        M = gcn_forward(feats, GraphNet(pipe.gcn, pipe.pattern, params))
        return combined_loss(M, gt, W, tmpl).total

    full = grad_check(loss, [pipe.params[k] for k in keys], h=1e-6, tol=1e-4)
    worst_op = 0.0
    for op, build in test_autodiff.CASES.items():
        for trial in range(100):
            r = np.random.default_rng(1000 + trial)
            fn, arrays = build(r)
            if op in ("abs", "norm_l1"):
                arrays = [test_autodiff.away_from_zero(r, a.shape) for a in arrays]
            worst_op = max(worst_op, grad_check(fn, [Tensor(a) for a in arrays], h=1e-6, tol=1e-5).max_rel_error)
    seconds = time.perf_counter() - t0
    ok = full.passed and worst_op <= 1e-5 and seconds < 120
    verdict(2, "gradient integrity", ok,
            f"pipeline max rel err {full.max_rel_error:.2e} over {full.n_checked} coords, "
            f"per-op worst {worst_op:.2e} over {len(test_autodiff.CASES)} ops, {seconds:.0f} s")


# 3 ---------------------------------------------------------------------------------

def test_criterion_3_correspondence_matches_scan(verdict):
    t = capsule_man("desk")
    same, present, ties = 0, 0, 0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        part = rng.integers(0, 13, size=(32, 32))
        uv = rng.random((32, 32, 2))
        if seed % 4 == 0:
            # quantised uv creates many exact ties between pixels
            uv = np.round(uv * 16) / 16
        img = IuvImage(part, uv)
        fast, slow = vertex_to_pixel(img, t), vertex_to_pixel_scan(img, t)
        same += fast.equals(slow)
        present += int(fast.present.sum())
        ties += seed % 4 == 0
    verdict(3, "correspondence oracle equivalence", same == 100,
            f"{same}/100 bit-identical, {ties} tie-heavy images, {present} matches in total")


# 4 ---------------------------------------------------------------------------------

def _occlusion_fixture(t):
    """Left arm thickened and hung in front of the torso; yields (posed vertices, image size)."""
    arm = np.isin(t.vertex_part, [5, 6])
    for fat in (2.0, 2.5, 3.0):
        for x0 in (-0.06, 0.0, 0.06):
            for H in (64, 96, 128):
                V = t.vertices.copy()
                P = V[arm]
                Q = P - P[np.argmin(P[:, 0])]
                Q[:, 1:] *= fat
                Q = Q @ rotation_matrix((0, 0, 1), -np.pi / 2).T
                V[arm] = Q + np.array([x0, 0.5, 0.5])
                yield V, H


def test_criterion_4_threshold_semantics(verdict):
    t = capsule_man("desk")
    violations, checked = 0, 0
    for seed in range(20):
        sc = make_scene(t, seed, 0.5, 64, 64)
        c = vertex_to_pixel(sc.iuv, t)
        k = np.flatnonzero(c.present)
        uv = sc.iuv.uv[c.pixel[k, 0] - 1, c.pixel[k, 1] - 1].astype(np.float64)
        d = np.linalg.norm(uv - t.vertex_uv[k], axis=1)
        violations += int(np.sum(d > t.delta[k])) + int(np.sum(sc.iuv.part[c.pixel[k, 0] - 1, c.pixel[k, 1] - 1]
                                                           != t.vertex_part[k]))
        checked += len(k)
    # torso-front vertices whose surrounding two rings of faces are fully hidden behind the arm
    incident = [set() for _ in range(t.num_vertices)]
    for fi, f in enumerate(t.faces):
        for v in f:
            incident[v].add(fi)
    ring2 = []
    for k in range(t.num_vertices):
        fs = set(incident[k])
        for n in t.neighbors[k]:
            fs |= incident[n]
        ring2.append(np.array(sorted(fs)))
    occluded, absent = 0, 0
    for V, H in _occlusion_fixture(t):
        ras = rasterize(V, t.faces, Camera.fit(H, H), H, H)
        corr = vertex_to_pixel(iuv_from_raster(ras, t), t)
        shown = np.zeros(t.num_faces, bool)
        shown[np.unique(ras.face[ras.face >= 0])] = True
        region = [k for k in np.flatnonzero(t.vertex_part == 1) if not shown[ring2[k]].any()]
        occluded += len(region)
        absent += int((~corr.present[region]).sum())
    rate = absent / max(occluded, 1)
    ok = violations == 0 and occluded > 0 and rate >= 0.95
    verdict(4, "threshold semantics", ok,
            f"{violations} violations over {checked} clean matches; occluded-region ABSENT {absent}/{occluded} "
            f"= {rate:.3f}")


# 5 ---------------------------------------------------------------------------------

def test_criterion_5_losses_match_oracles(verdict):
    worst = 0.0
    exact = True
    for seed in range(50):
        rng = np.random.default_rng(seed)
        t = capped_tube() if seed % 2 else capsule_man("small")
        M = t.vertices + 0.05 * rng.normal(size=t.vertices.shape)
        T = t.vertices + 0.05 * rng.normal(size=t.vertices.shape)
        Ml, Tl, faces = M.tolist(), T.tolist(), t.faces.tolist()
        W = t.joint_regressor
        pairs = [
            (loss_vertex(Tensor(M), T).item(), loss_vertex_loop(Ml, Tl)),
            (loss_joint(Tensor(M), T, W).item(), loss_joint_loop(Ml, Tl, W.W.tolist())),
            (loss_edge(Tensor(M), T, t).item(), loss_edge_loop(Ml, Tl, faces)),
            (loss_normal(Tensor(M), T, t).item(), loss_normal_loop(Ml, Tl, faces)),
        ]
        worst = max(worst, max(abs(a - b) for a, b in pairs))
        rep = combined_loss(Tensor(M), T, W, t)
        exact &= rep.l_total == rep.l_vertex + rep.l_joint + 0.1 * rep.l_normal + 0.1 * rep.l_edge
    exact &= weighted_total(4.0, 2.0, 10.0, 20.0) == 9.0
    verdict(5, "loss definitions", worst <= 1e-10 and exact,
            f"worst |impl - oracle| {worst:.2e} over 50 pairs, weights exact: {exact}")


# 6 ---------------------------------------------------------------------------------

def test_criterion_6_metric_correctness(verdict):
    rng = np.random.default_rng(0)
    worst_exact = 0.0
    for _ in range(100):
        J = rng.normal(size=(12, 3))
        worst_exact = max(worst_exact, pa_mpjpe(J, rng.uniform(0.2, 5) * J @ random_rotation(rng).T + rng.normal(size=3)))
    dominated = 0
    for _ in range(1000):
        J = rng.normal(size=(12, 3))
        T = rng.uniform(0.5, 2) * J @ random_rotation(rng).T + rng.normal(size=3) + rng.normal(0, 0.3, (12, 3))
        dominated += pa_mpjpe(J, T) <= mpjpe(J, T)
    beaten, trials = 0, 0
    for _ in range(10):
        J = rng.normal(size=(12, 3))
        T = 1.3 * J @ random_rotation(rng).T + rng.normal(size=3) + rng.normal(0, 0.2, (12, 3))
        best = procrustes_align(J, T)
        r = similarity_residual(J, T, best.scale, best.rotation, best.translation)
        for _ in range(100):
            trials += 1
            beaten += r <= similarity_residual(J, T, np.exp(rng.normal(0.3, 0.5)), random_rotation(rng),
                                               rng.normal(size=3) * 2)
    ok = worst_exact <= 1e-9 and dominated == 1000 and beaten == trials
    verdict(6, "metric correctness", ok,
            f"exact-similarity pa_mpjpe max {worst_exact:.1e}; pa <= mpjpe in {dominated}/1000; "
            f"closed form best in {beaten}/{trials} random transforms")


# 7 ---------------------------------------------------------------------------------

def test_criterion_7_feature_layout(verdict):
    widths = {}
    zero_ok = True
    rng = np.random.default_rng(0)
    for name in ("desk", "long-schedule", "tiny"):
        pipe = Pipeline.from_config(PRESETS[name]())
        sample = pipe.sample(0)
        pyr = backbone_forward(sample.scene.image, pipe.params, pipe.backbone)
        F = vertex_features(pyr, sample.corr, pipe.template).data
        lay = feature_layout(pyr.channels)
        widths[name] = (F.shape[1], pipe.backbone.feature_dim + 5)
        absent = ~sample.corr.present
        zero_ok &= bool(absent.any()) and bool(np.all(F[absent][:, lay["local"]] == 0)) \
            and bool(np.all(F[absent][:, lay["pixel"]] == 0))
    # the full-scale layout, on a random pyramid with the full-scale channel counts
    full = BackboneConfig.full_scale()
    t = capped_tube()
    stages = [Tensor(rng.normal(size=(c, s, s))) for c, s in zip(full.channels[:4], full.stage_sizes)]
    pyr = FeaturePyramid(stages, Tensor(rng.normal(size=full.channels[4])), (224, 224))
    present = rng.random(t.num_vertices) < 0.5
    pix = np.where(present[:, None], rng.integers(1, 225, size=(t.num_vertices, 2)), 0)
    corr = CorrespondenceSet(pix, present, np.where(present, 0.0, np.inf), (224, 224))
    F = vertex_features(pyr, corr, t).data
    lay = feature_layout(full.channels)
    widths["full-scale"] = (F.shape[1], 3909)
    zero_ok &= bool(np.all(F[~present][:, lay["local"]] == 0)) and bool(np.all(F[~present][:, lay["pixel"]] == 0))
    ok = all(a == b for a, b in widths.values()) and zero_ok and full.feature_dim == 3904
    verdict(7, "feature layout", ok,
            ", ".join(f"{k} {a} (want {b})" for k, (a, b) in widths.items()) + f", absent rows zero: {zero_ok}")


# 8 ---------------------------------------------------------------------------------

def test_criterion_8_equivariance(verdict):
    t = capped_tube()
    p = GraphPattern.from_faces(t.faces, t.num_vertices)
    worst_perm = 0.0
    for seed in range(10):
        rng = np.random.default_rng(seed)
        cfg = GraphNetConfig(in_dim=9, hidden=8, blocks=2, per_channel_logits=bool(seed % 2))
        params = init_graphnet(cfg, p, seed)
        for k, v in params.items():
            if "edge_logits" in k or k.endswith("bias"):
                v.data[...] = rng.normal(size=v.shape)
        F = rng.normal(size=(50, 9))
        perm = rng.permutation(50)
        inv = np.argsort(perm)
        q = GraphPattern.from_edges(np.stack([inv[p.rows], inv[p.cols]], axis=1), 50)
        qi = q.index()
        where = np.array([qi[(int(inv[r]), int(inv[c]))] for r, c in zip(p.rows, p.cols)])
        moved = {}
        for k, v in params.items():
            if "edge_logits" in k:
                arr = np.empty_like(v.data)
                arr[where] = v.data
                moved[k] = Tensor(arr)
            else:
                moved[k] = v
        a = GraphNet(cfg, p, params)(F).data
        b = GraphNet(cfg, q, moved)(F[perm]).data
        worst_perm = max(worst_perm, float(np.abs(b - a[perm]).max()))
    worst_affine = 0.0
    rng = np.random.default_rng(1)
    S, H = 7, 28
    i, j = np.meshgrid(np.arange(S), np.arange(S), indexing="ij")
    lo, hi = 0.5 * H / S - 0.5, (S - 0.5) * H / S - 0.5
    for _ in range(1000):
        a0, b0, c0 = rng.normal(size=3)
        fmap = (a0 + b0 * i + c0 * j)[None]
        pt = rng.uniform(lo, hi, 2)
        g = (pt + 0.5) * S / H - 0.5
        worst_affine = max(worst_affine, abs(bilinear_sample(fmap, pt, (H, H)).data[0] - (a0 + b0 * g[0] + c0 * g[1])))
    ok = worst_perm <= 1e-12 and worst_affine <= 1e-10
    verdict(8, "equivariance", ok,
            f"permutation max dev {worst_perm:.1e} over 10 nets, affine max dev {worst_affine:.1e} over 1000 points")


# 9 ---------------------------------------------------------------------------------

def test_criterion_9_determinism(verdict, tmp_path):
    outs = []
    for run in ("first", "second"):
        out = tmp_path / run
        subprocess.run([sys.executable, "-m", "pixmesh.cli", "train", "--preset", "tiny", "--out", str(out),
                        "--epochs-scale", "3"], check=True, capture_output=True)
        outs.append(out)
    same = {name: (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes()
            for name in ("log.csv", "checkpoint.mgc")}
    rows = len((outs[0] / "log.csv").read_text().splitlines()) - 1
    verdict(9, "determinism", all(same.values()),
            ", ".join(f"{k} identical: {v}" for k, v in same.items()) + f", {rows} log rows")
