"""Run configuration: nested dataclasses serialised as JSON with full defaulting.

Schema (every key optional; missing keys take the defaults below)::

    {
      "name": str, "seed": int, "feature_mode": "local" | "global",
      "template": {"preset": "capsule_man" | "capped_tube" | "file", "resolution": str, "texture_seed": int,
                   "path": null | str},
      "backbone": {"in_channels": int, "input_size": int, "channels": [5 ints]},
      "gcn": {"hidden": int, "blocks": int, "per_channel_logits": bool, "conv": "semantic" | "kipf",
              "offset_mode": bool, "zero_head": bool},
      "data": {"train_start": int, "train_count": int, "test_start": int, "test_count": int,
               "seed_stride": int, "difficulty": float, "noise_level": float},
      "optim": {"schedule": [[epochs, lr], ...], "beta1": float, "beta2": float, "eps": float,
                "batch_size": 1},
      "eval": {"export_count": int, "joint_mask": null | [bools]},
      "out_dir": str
    }

The image size is the backbone's ``input_size``.
"""
from __future__ import annotations

import dataclasses
import json
import math
import os
from dataclasses import dataclass, field

FEATURE_MODES = ("local", "global")


@dataclass
class TemplateSpec:
    preset: str = "capsule_man"  # or "capped_tube", or "file" to load ``path``
    resolution: str = "desk"
    texture_seed: int = 0
    path: str | None = None


@dataclass
class BackboneSpec:
    in_channels: int = 3
    input_size: int = 56
    channels: tuple = (8, 16, 32, 64, 128)


@dataclass
class GcnSpec:
    hidden: int = 64
    blocks: int = 4
    per_channel_logits: bool = False
    conv: str = "semantic"
    offset_mode: bool = False
    zero_head: bool = False


@dataclass
class DataSpec:
    train_start: int = 0
    train_count: int = 64
    test_start: int = 5000
    test_count: int = 32
    seed_stride: int = 10000  # scene seeds shift by run_seed * seed_stride
    difficulty: float = 0.5
    noise_level: float = 0.0

    def train_seeds(self, run_seed: int) -> list[int]:
        base = self.train_start + run_seed * self.seed_stride
        return list(range(base, base + self.train_count))

    def test_seeds(self, run_seed: int) -> list[int]:
        base = self.test_start + run_seed * self.seed_stride
        return list(range(base, base + self.test_count))


@dataclass
class OptimSpec:
    schedule: list = field(default_factory=lambda: [[24, 1e-3], [4, 1e-4], [2, 1e-5]])
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 1

    @property
    def total_epochs(self) -> int:
        return int(sum(e for e, _ in self.schedule))

    def lr_at(self, epoch: int) -> float:
        """Learning rate for 1-based ``epoch``."""
        at = 0
        for n, lr in self.schedule:
            at += n
            if epoch <= at:
                return float(lr)
        raise ValueError(f"epoch {epoch} beyond the schedule's {at} epochs")


@dataclass
class EvalSpec:
    export_count: int = 4
    joint_mask: list | None = None


@dataclass
class RunConfig:
    name: str = "desk"
    seed: int = 0
    feature_mode: str = "local"
    template: TemplateSpec = field(default_factory=TemplateSpec)
    backbone: BackboneSpec = field(default_factory=BackboneSpec)
    gcn: GcnSpec = field(default_factory=GcnSpec)
    data: DataSpec = field(default_factory=DataSpec)
    optim: OptimSpec = field(default_factory=OptimSpec)
    eval: EvalSpec = field(default_factory=EvalSpec)
    out_dir: str = "runs/desk"

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.feature_mode not in FEATURE_MODES:
            raise ValueError(f"feature_mode must be one of {FEATURE_MODES}, got {self.feature_mode!r}")
        if not self.optim.schedule:
            raise ValueError("optimizer schedule is empty")
        for phase in self.optim.schedule:
            if len(phase) != 2:
                raise ValueError(f"schedule phase {phase!r} is not [epochs, lr]")
            n, lr = phase
            if int(n) != n or n < 1:
                raise ValueError(f"schedule epochs must be integers >= 1, got {n!r}")
            if not (lr > 0 and math.isfinite(lr)):
                raise ValueError(f"learning rates must be positive, got {lr!r}")
        if self.optim.batch_size != 1:
            raise ValueError("only batch size 1 is supported")
        d = self.data
        if d.train_count < 1 or d.test_count < 0:
            raise ValueError("need at least one training scene")
        if not 0.0 <= d.difficulty <= 1.0 or not 0.0 <= d.noise_level <= 1.0:
            raise ValueError("difficulty and noise level must lie in [0, 1]")
        tr = (d.train_start, d.train_start + d.train_count)
        te = (d.test_start, d.test_start + d.test_count)
        if d.test_count and tr[0] < te[1] and te[0] < tr[1]:
            raise ValueError(f"train seeds {tr} and test seeds {te} overlap")
        if d.seed_stride < max(tr[1], te[1]) - min(tr[0], te[0]):
            raise ValueError("seed_stride must exceed the span of the seed ranges")
        if len(self.backbone.channels) != 5:
            raise ValueError("backbone needs 5 stage channel counts")
        if self.template.preset not in ("capsule_man", "capped_tube", "file"):
            raise ValueError(f"unknown template preset {self.template.preset!r}")
        if self.gcn.conv not in ("semantic", "kipf"):
            raise ValueError(f"unknown graph convolution {self.gcn.conv!r}")

    def scaled(self, epochs_scale: float) -> RunConfig:
        """Copy with every schedule phase's epochs scaled (rounded, at least 1)."""
        if not epochs_scale > 0:
            raise ValueError("epochs scale must be positive")
        sched = [[max(1, int(round(n * epochs_scale))), lr] for n, lr in self.optim.schedule]
        return dataclasses.replace(self, optim=dataclasses.replace(self.optim, schedule=sched))

    def with_overrides(self, **kw) -> RunConfig:
        return dataclasses.replace(self, **{k: v for k, v in kw.items() if v is not None})

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["backbone"]["channels"] = list(d["backbone"]["channels"])
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> RunConfig:
        d = dict(d)
        sub = {"template": TemplateSpec, "backbone": BackboneSpec, "gcn": GcnSpec,
               "data": DataSpec, "optim": OptimSpec, "eval": EvalSpec}
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        for key, typ in sub.items():
            if key in d:
                fields = {f.name for f in dataclasses.fields(typ)}
                bad = set(d[key]) - fields
                if bad:
                    raise ValueError(f"unknown keys in {key!r}: {sorted(bad)}")
                d[key] = typ(**d[key])
        if "backbone" in d:
            d["backbone"].channels = tuple(d["backbone"].channels)
        return cls(**d)


def load_config(path: str | os.PathLike) -> RunConfig:
    with open(path) as fh:
        return RunConfig.from_dict(json.load(fh))


def save_config(cfg: RunConfig, path: str | os.PathLike) -> None:
    with open(path, "w") as fh:
        fh.write(cfg.to_json() + "\n")


def desk_config(**kw) -> RunConfig:
    return RunConfig(**kw)


def long_schedule_config(**kw) -> RunConfig:
    """12 / 2 / 1 epochs at 1e-4 / 1e-5 / 1e-6 on the desk problem."""
    return RunConfig(name="long-schedule", optim=OptimSpec(schedule=[[12, 1e-4], [2, 1e-5], [1, 1e-6]]), **kw)


def full_scale_config(**kw) -> RunConfig:
    """224 px input with wide stages; the template must be supplied as a JSON file via ``template.path``."""
    base = dict(
        name="full-scale",
        template=TemplateSpec("file"),
        backbone=BackboneSpec(3, 224, (64, 256, 512, 1024, 2048)),
        optim=OptimSpec(schedule=[[12, 1e-4], [2, 1e-5], [1, 1e-6]]),
        out_dir="runs/full-scale",
    )
    base.update(kw)
    return RunConfig(**base)


def tiny_config(**kw) -> RunConfig:
    """Seconds-scale smoke configuration on the 50-vertex tube."""
    base = dict(
        name="tiny",
        template=TemplateSpec("capped_tube", "default"),
        backbone=BackboneSpec(3, 16, (2, 3, 4, 5, 6)),
        gcn=GcnSpec(hidden=8, blocks=1),
        data=DataSpec(train_count=4, test_count=2, test_start=100, seed_stride=1000),
        optim=OptimSpec(schedule=[[1, 1e-3]]),
        eval=EvalSpec(export_count=1),
        out_dir="runs/tiny",
    )
    base.update(kw)
    return RunConfig(**base)


PRESETS = {"desk": desk_config, "long-schedule": long_schedule_config, "full-scale": full_scale_config,
           "tiny": tiny_config}
