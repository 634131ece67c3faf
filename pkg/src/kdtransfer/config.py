"""Run configuration: YAML on disk, nested dataclasses in memory.

Every training and attack hyperparameter carries the reference experiment's
value as its default. ``fast_profile`` rewrites a config into a small
synthetic run for smoke tests.
"""

from __future__ import annotations

import copy
import hashlib
import json
import os
from dataclasses import asdict, dataclass, field, fields, is_dataclass

import yaml


class ConfigFileError(ValueError):
    """Invalid or inconsistent configuration."""


@dataclass
class SyntheticSpec:
    num_classes: int = 10
    train_per_class: int = 500
    test_per_class: int = 100
    separation: float = 60.0
    noise_std: float = 1.0
    shift: int = 0
    seed: int = 0


@dataclass
class DataConfig:
    source: str = "cifar10"
    cifar10_dir: str | None = None
    val_fraction: float = 0.1
    split_seed: int = 0
    test_limit: int | None = None
    synthetic: SyntheticSpec = field(default_factory=SyntheticSpec)


@dataclass
class TrainConfig:
    width: float = 1.0
    max_epochs: int = 100
    warmup_epochs: int = 30
    patience: int = 10
    plateau_tol: float = 1e-4
    batch_size: int = 256
    weight_decay: float = 1e-6
    lr_grid: list = field(default_factory=lambda: [1e-2, 1e-3])
    seeds: list = field(default_factory=lambda: [0, 1])


@dataclass
class DistillConfig:
    alpha: float = 0.3
    tau: float = 1.0
    switch_period: int = 4
    scale_tau2: bool = True
    strategies: list = field(default_factory=lambda: ["curriculum", "joint"])
    alpha_grid: list = field(default_factory=lambda: [0.0, 0.3])
    tau_grid: list = field(default_factory=lambda: [1.0, 5.0])


@dataclass
class AttackConfig:
    kinds: list = field(default_factory=lambda: ["fg", "fgs", "pgd"])
    iterations: int = 10
    batch_size: int = 150
    rmsd_target: float = 25.0
    rmsd_tolerance: float = 1.0
    calibration_samples: int = 1000
    max_bisections: int = 30
    epsilons: dict = field(default_factory=dict)
    ensemble_mode: str = "logits"


@dataclass
class EvalConfig:
    asr_mode: str = "all"


@dataclass
class BoundaryConfig:
    image_index: int = 0
    ranges: list = field(default_factory=lambda: [50.0, 6.0])
    resolution: int = 101
    direction_seed: int = 0


@dataclass
class RunConfig:
    seed: int = 0
    output_dir: str = "runs/default"
    data: DataConfig = field(default_factory=DataConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    distill: DistillConfig = field(default_factory=DistillConfig)
    attack: AttackConfig = field(default_factory=AttackConfig)
    evaluation: EvalConfig = field(default_factory=EvalConfig)
    boundary: BoundaryConfig = field(default_factory=BoundaryConfig)

    def to_dict(self):
        return asdict(self)

    def section_hash(self, *sections):
        """Short content hash over the named sections (all when none given)."""
        full = self.to_dict()
        full.pop("output_dir")
        picked = {k: full[k] for k in sections} if sections else full
        raw = json.dumps(picked, sort_keys=True, default=str).encode()
        return hashlib.sha256(raw).hexdigest()[:16]

    def validate(self):
        d, t, k, a = self.data, self.train, self.distill, self.attack
        if d.source not in ("cifar10", "synthetic"):
            raise ConfigFileError(f"data.source must be 'cifar10' or 'synthetic', got {d.source!r}")
        if d.source == "cifar10":
            if not d.cifar10_dir:
                raise ConfigFileError("data.cifar10_dir is required for the cifar10 source")
            if not os.path.isdir(d.cifar10_dir):
                raise ConfigFileError(f"data.cifar10_dir {d.cifar10_dir!r} does not exist")
        if not 0 < d.val_fraction < 1:
            raise ConfigFileError("data.val_fraction must lie in (0, 1)")
        s = d.synthetic
        if min(s.num_classes, s.train_per_class, s.test_per_class) <= 0:
            raise ConfigFileError("synthetic class and sample counts must be positive")
        if t.width <= 0:
            raise ConfigFileError("train.width must be positive")
        if t.max_epochs < 1 or not 0 <= t.warmup_epochs < t.max_epochs:
            raise ConfigFileError("need max_epochs >= 1 and 0 <= warmup_epochs < max_epochs")
        if t.patience < 1 or t.batch_size < 1:
            raise ConfigFileError("patience and batch_size must be >= 1")
        for name, grid in (("train.lr_grid", t.lr_grid), ("train.seeds", t.seeds),
                           ("distill.strategies", k.strategies), ("distill.alpha_grid", k.alpha_grid),
                           ("distill.tau_grid", k.tau_grid), ("attack.kinds", a.kinds),
                           ("boundary.ranges", self.boundary.ranges)):
            if not grid:
                raise ConfigFileError(f"{name} must not be empty")
        if set(k.strategies) - {"curriculum", "joint"}:
            raise ConfigFileError(f"unknown strategies {sorted(set(k.strategies) - {'curriculum', 'joint'})}")
        if any(not 0 <= x <= 1 for x in k.alpha_grid + [k.alpha]):
            raise ConfigFileError("alpha values must lie in [0, 1]")
        if any(x <= 0 for x in k.tau_grid + [k.tau]):
            raise ConfigFileError("tau values must be positive")
        if k.switch_period < 1:
            raise ConfigFileError("distill.switch_period must be >= 1")
        if set(a.kinds) - {"fg", "fgs", "pgd"}:
            raise ConfigFileError(f"unknown attack kinds {sorted(set(a.kinds) - {'fg', 'fgs', 'pgd'})}")
        if a.iterations < 1 or a.batch_size < 1 or a.calibration_samples < 1:
            raise ConfigFileError("attack iterations, batch_size and calibration_samples must be >= 1")
        if a.rmsd_target <= 0 or a.rmsd_tolerance <= 0:
            raise ConfigFileError("rmsd_target and rmsd_tolerance must be positive")
        if a.ensemble_mode not in ("logits", "prob"):
            raise ConfigFileError("attack.ensemble_mode must be 'logits' or 'prob'")
        if self.evaluation.asr_mode not in ("all", "clean-correct"):
            raise ConfigFileError("evaluation.asr_mode must be 'all' or 'clean-correct'")
        if self.boundary.resolution < 2:
            raise ConfigFileError("boundary.resolution must be >= 2")
        return self


def _build(cls, raw, path):
    if raw is None:
        return cls()
    if not isinstance(raw, dict):
        raise ConfigFileError(f"{path or 'config'}: expected a mapping, got {type(raw).__name__}")
    known = {f.name: f for f in fields(cls)}
    unknown = set(raw) - set(known)
    if unknown:
        raise ConfigFileError(f"{path or 'config'}: unknown keys {sorted(unknown)}")
    kwargs = {}
    for name, value in raw.items():
        default = known[name].default_factory() if callable(known[name].default_factory) else None
        if is_dataclass(default):
            kwargs[name] = _build(type(default), value, f"{path}.{name}" if path else name)
        else:
            kwargs[name] = value
    return cls(**kwargs)


def from_dict(raw):
    return _build(RunConfig, raw or {}, "")


def load_config(path=None):
    if path is None:
        return RunConfig()
    try:
        with open(path) as fh:
            raw = yaml.safe_load(fh)
    except FileNotFoundError:
        raise ConfigFileError(f"config file {path!r} not found") from None
    except yaml.YAMLError as exc:
        raise ConfigFileError(f"{path}: {exc}") from None
    return from_dict(raw)


def dump_config(config, path):
    with open(path, "w") as fh:
        yaml.safe_dump(config.to_dict(), fh, sort_keys=False)


def fast_profile(config):
    """Small synthetic variant that exercises every stage in a few minutes."""
    c = copy.deepcopy(config)
    c.data.source = "synthetic"
    c.data.synthetic = SyntheticSpec(train_per_class=60, test_per_class=20, noise_std=30.0, shift=2)
    c.train.width = 0.25
    c.train.max_epochs = 10
    c.train.warmup_epochs = 2
    c.train.batch_size = 64
    c.train.lr_grid = [3e-3]
    c.train.seeds = [0]
    c.attack.calibration_samples = 100
    c.attack.batch_size = 100
    c.boundary.resolution = 51
    return c
