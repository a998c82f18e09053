"""Training, evaluation and ablation comparison for the image-to-mesh regressor."""
from __future__ import annotations

import csv
import json
import logging
import math
import os
import time
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .config import RunConfig, save_config
from .correspondence import CorrespondenceSet, vertex_to_pixel
from .features import BackboneConfig, backbone_forward, init_backbone, vertex_features
from .graphnet import GraphNet, GraphNetConfig, GraphPattern, gcn_forward, init_graphnet
from .losses import combined_loss
from .mesh import TemplateMesh, export_obj, load_template, regress_joints
from .metrics import DegenerateConfigurationError, mpjpe, pa_mpjpe
from .optim import AdamState, adam_step
from .scene import Camera, Scene, corrupt_iuv, make_scene
from .templates import capped_tube, capsule_man
from .tensorio import load_checkpoint, save_checkpoint

logger = logging.getLogger(__name__)

CSV_FIELDS = ("epoch", "split", "l_vertex", "l_joint", "l_edge", "l_normal", "l_total", "mpjpe", "pa_mpjpe")
METRIC_FIELDS = CSV_FIELDS[2:]


class TrainingAborted(RuntimeError):
    pass


def build_template(spec) -> TemplateMesh:
    if spec.preset == "capsule_man":
        return capsule_man(spec.resolution, texture_seed=spec.texture_seed)
    if spec.preset == "capped_tube":
        return capped_tube(texture_seed=spec.texture_seed)
    if spec.preset == "file":
        if not spec.path:
            raise ValueError("template preset 'file' needs template.path")
        return load_template(spec.path)
    raise ValueError(f"unknown template preset {spec.preset!r}")


@dataclass(eq=False)
class Sample:
    scene: Scene
    corr: CorrespondenceSet


@dataclass(eq=False)
class Pipeline:
    """Template, graph, camera and the two networks' parameters for one run."""

    config: RunConfig
    template: TemplateMesh
    pattern: GraphPattern
    camera: Camera
    backbone: BackboneConfig
    gcn: GraphNetConfig
    params: dict

    @classmethod
    def from_config(cls, cfg: RunConfig) -> Pipeline:
        template = build_template(cfg.template)
        b = cfg.backbone
        bcfg = BackboneConfig(b.in_channels, b.input_size, tuple(b.channels))
        g = cfg.gcn
        gcfg = GraphNetConfig(bcfg.row_width, g.hidden, g.blocks, 3, g.per_channel_logits, g.conv, g.offset_mode)
        pattern = GraphPattern.from_faces(template.faces, template.num_vertices)
        seed_b, seed_g = np.random.SeedSequence(cfg.seed).generate_state(2)
        params = dict(init_backbone(bcfg, int(seed_b)))
        params.update(init_graphnet(gcfg, pattern, int(seed_g), zero_head=g.zero_head))
        camera = Camera.frame(template.vertices, b.input_size, b.input_size)
        return cls(cfg, template, pattern, camera, bcfg, gcfg, params)

    @property
    def size(self) -> int:
        return self.backbone.input_size

    def network(self) -> GraphNet:
        return GraphNet(self.gcn, self.pattern, self.params, tpose=self.template.vertices)

    def sample(self, seed: int) -> Sample:
        d = self.config.data
        scene = make_scene(self.template, seed, d.difficulty, self.size, self.size, self.camera)
        iuv = scene.iuv
        if d.noise_level > 0:
            iuv = corrupt_iuv(iuv, seed, d.noise_level, self.template)
        return Sample(scene, vertex_to_pixel(iuv, self.template))

    def predict(self, sample: Sample) -> ad.Tensor:
        pyramid = backbone_forward(sample.scene.image, self.params, self.backbone)
        feats = vertex_features(pyramid, sample.corr, self.template, self.config.feature_mode)
        return gcn_forward(feats, self.network())

    def load_params(self, arrays: dict) -> None:
        missing = set(self.params) - set(arrays)
        extra = set(arrays) - set(self.params)
        if missing or extra:
            raise ValueError(f"checkpoint keys disagree: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for k, a in arrays.items():
            if a.shape != self.params[k].shape:
                raise ValueError(f"parameter {k}: checkpoint shape {a.shape} vs config shape {self.params[k].shape}")
        for k, a in arrays.items():
            self.params[k] = ad.parameter(a, k)

    def arrays(self) -> dict:
        return {k: p.data for k, p in self.params.items()}


def score(pipe: Pipeline, sample: Sample, M: ad.Tensor | None = None):
    """Loss report and metric row for one sample."""
    M = pipe.predict(sample) if M is None else M
    gt = sample.scene.gt_mesh
    report = combined_loss(M, gt, pipe.template.joint_regressor, pipe.template)
    W = pipe.template.joint_regressor
    J, Jt = regress_joints(W, M.data), regress_joints(W, gt)
    mask = pipe.config.eval.joint_mask
    row = report.row()
    row["mpjpe"] = mpjpe(J, Jt, W.root_index, mask)
    row["pa_mpjpe"] = _pa_mpjpe(J, Jt, mask)
    return report, row


def _pa_mpjpe(J, Jt, mask):
    try:
        return pa_mpjpe(J, Jt, mask)
    except DegenerateConfigurationError:
        a, b = (J, Jt) if mask is None else (J[np.asarray(mask, bool)], Jt[np.asarray(mask, bool)])
        if np.ptp(a, axis=0).max() > 0:
            raise
        # a collapsed prediction: the best similarity can only move it to the target centroid
        logger.warning("prediction joints coincide; PA-MPJPE falls back to centroid alignment")
        return float(np.mean(np.linalg.norm(b - b.mean(axis=0), axis=1)))


def mean_rows(rows: list[dict]) -> dict:
    return {k: float(np.mean([r[k] for r in rows])) for k in METRIC_FIELDS}


def evaluate(pipe: Pipeline, samples: list[Sample]) -> dict:
    return mean_rows([score(pipe, s)[1] for s in samples])


@dataclass
class TrainResult:
    rows: list  # CSV rows in log order
    initial: dict  # split -> metric means before any update
    skipped_steps: int
    pipeline: Pipeline

    def curve(self, split: str, key: str = "mpjpe") -> list[float]:
        return [r[key] for r in self.rows if r["split"] == split]


def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def write_csv(path, rows, fields=CSV_FIELDS) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(fields)
        for r in rows:
            w.writerow([_fmt(r[f]) for f in fields])


def _parse(v: str):
    try:
        return float(v)
    except ValueError:
        return v


def read_csv(path) -> list[dict]:
    """Rows with numeric cells as floats and labels (split, arm, ``mean``) as strings."""
    with open(path, newline="") as fh:
        return [{k: (v if k in ("split", "feature_mode", "arm") else _parse(v)) for k, v in r.items()}
                for r in csv.DictReader(fh)]


def train(cfg: RunConfig, out_dir: str | os.PathLike | None = None, max_skip_fraction: float = 0.01) -> TrainResult:
    """Per-scene Adam training over the configured schedule.

    After every epoch both splits are evaluated and logged. When ``out_dir``
    is given it receives ``config.json``, ``log.csv``, ``checkpoint.mgc`` and
    ``summary.json``.
    """
    t0 = time.perf_counter()
    pipe = Pipeline.from_config(cfg)
    train_set = [pipe.sample(s) for s in cfg.data.train_seeds(cfg.seed)]
    test_set = [pipe.sample(s) for s in cfg.data.test_seeds(cfg.seed)]
    splits = {"train": train_set, "test": test_set} if test_set else {"train": train_set}
    initial = {k: evaluate(pipe, v) for k, v in splits.items()}
    o = cfg.optim
    state = AdamState(lr=o.schedule[0][1], beta1=o.beta1, beta2=o.beta2, eps=o.eps)
    order_rng = np.random.default_rng([cfg.seed, 7])
    rows, skipped_total = [], 0
    for epoch in range(1, o.total_epochs + 1):
        state.lr = o.lr_at(epoch)
        skipped = 0
        for i in order_rng.permutation(len(train_set)):
            ad.zero_grad(pipe.params.values())
            M = pipe.predict(train_set[i])
            report = combined_loss(M, train_set[i].scene.gt_mesh, pipe.template.joint_regressor, pipe.template)
            if not math.isfinite(report.l_total):
                skipped += 1
                logger.warning("epoch %d scene %d: non-finite loss, step skipped", epoch, i)
                continue
            contrib = ad.backward(report.total)
            adam_step(pipe.params, {k: contrib.get(p) for k, p in pipe.params.items()}, state)
        skipped_total += skipped
        if skipped > max_skip_fraction * len(train_set):
            raise TrainingAborted(f"epoch {epoch}: {skipped} of {len(train_set)} steps had non-finite loss")
        for split, samples in splits.items():
            rows.append({"epoch": epoch, "split": split, **evaluate(pipe, samples)})
        logger.info("epoch %d: train l_total %.4g mpjpe %.4g%s", epoch, rows[-len(splits)]["l_total"],
                    rows[-len(splits)]["mpjpe"], f" test mpjpe {rows[-1]['mpjpe']:.4g}" if test_set else "")
    result = TrainResult(rows, initial, skipped_total, pipe)
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        save_config(cfg, os.path.join(out_dir, "config.json"))
        write_csv(os.path.join(out_dir, "log.csv"), rows)
        save_checkpoint(os.path.join(out_dir, "checkpoint.mgc"), pipe.arrays())
        with open(os.path.join(out_dir, "summary.json"), "w") as fh:
            json.dump({"initial": initial, "final": {r["split"]: {k: r[k] for k in METRIC_FIELDS}
                                                     for r in rows[-len(splits):]},
                       "skipped_steps": skipped_total, "epochs": o.total_epochs}, fh, indent=2, sort_keys=True)
    logger.info("training finished in %.1f s", time.perf_counter() - t0)
    return result


def evaluate_checkpoint(cfg: RunConfig, checkpoint, split: str = "test", out_dir=None,
                        export_count: int | None = None) -> dict:
    """Per-scene and mean metrics for a saved checkpoint; optional OBJ export."""
    pipe = Pipeline.from_config(cfg)
    pipe.load_params(checkpoint if isinstance(checkpoint, dict) else load_checkpoint(checkpoint))
    seeds = cfg.data.train_seeds(cfg.seed) if split == "train" else cfg.data.test_seeds(cfg.seed)
    k = cfg.eval.export_count if export_count is None else export_count
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
    per_scene = []
    for n, seed in enumerate(seeds):
        sample = pipe.sample(seed)
        M = pipe.predict(sample)
        _, row = score(pipe, sample, M)
        per_scene.append({"scene": seed, **row})
        if out_dir is not None and n < k:
            export_obj(M.data, pipe.template.faces, os.path.join(out_dir, f"pred_{seed}.obj"))
            export_obj(sample.scene.gt_mesh, pipe.template.faces, os.path.join(out_dir, f"gt_{seed}.obj"))
    mean = mean_rows(per_scene)
    if out_dir is not None:
        fields = ("scene",) + METRIC_FIELDS
        write_csv(os.path.join(out_dir, f"eval_{split}.csv"),
                  per_scene + [{"scene": "mean", **mean}], fields)
    return {"split": split, "per_scene": per_scene, "mean": mean}


def _comparable(cfg: RunConfig) -> dict:
    d = cfg.to_dict()
    for key in ("feature_mode", "name", "out_dir"):
        d.pop(key)
    return d


def compare(cfg_a: RunConfig, cfg_b: RunConfig, out_dir=None) -> dict:
    """Train two arms that differ only in feature mode and report their test curves."""
    da, db = _comparable(cfg_a), _comparable(cfg_b)
    if da != db:
        diff = sorted(k for k in set(da) | set(db) if da.get(k) != db.get(k))
        raise ValueError(f"configs differ beyond feature_mode: {diff}")
    arms = {}
    curve_rows = []
    for label, cfg in (("a", cfg_a), ("b", cfg_b)):
        sub = None if out_dir is None else os.path.join(out_dir, f"{label}_{cfg.feature_mode}")
        res = train(cfg, sub)
        arms[label] = res
        split = "test" if cfg.data.test_count else "train"
        for r in res.rows:
            if r["split"] == split:
                curve_rows.append({"arm": label, "feature_mode": cfg.feature_mode, **r})
    split = "test" if cfg_a.data.test_count else "train"
    final = {lab: {k: res.rows[-1][k] for k in METRIC_FIELDS} for lab, res in arms.items()}
    report = {
        "split": split,
        "arms": {lab: {"feature_mode": c.feature_mode, "final": final[lab]}
                 for lab, c in (("a", cfg_a), ("b", cfg_b))},
        "delta_b_minus_a": {k: final["b"][k] - final["a"][k] for k in METRIC_FIELDS},
    }
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        write_csv(os.path.join(out_dir, "curves.csv"), curve_rows, ("arm", "feature_mode") + CSV_FIELDS)
        with open(os.path.join(out_dir, "report.json"), "w") as fh:
            json.dump(report, fh, indent=2, sort_keys=True)
    report["results"] = arms
    return report
