"""Experiment configuration: TOML text to a fully defaulted, validated ExperimentConfig."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import re
import sys
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Tuple, get_type_hints

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .data import SynthSpec
from .defenses import DEFENSE_GRIDS
from .models import FAMILIES, ArchSpec, TrainConfig
from .oslo import CALIBRATION_GRID, STOP_MODES, VALIDATION_RULES, AttackConfig
from .transfer import TransferMethodParams

STAGES = ("data", "train", "attack", "baselines", "analysis", "defend")
BASELINES = ("gaussian", "augmentation", "shadow", "global-threshold")


class ConfigError(ValueError):
    """Invalid configuration; ``path`` names the offending field."""

    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}" if path else message)
        self.path = path


@dataclass
class DataSection:
    source: str = "synth"
    num_classes: int = 10
    per_class: int = 300
    size: int = 12
    channels: int = 1
    images_path: str = ""
    labels_path: str = ""

    def check(self):
        if self.source not in ("synth", "idx"):
            raise ValueError("source must be 'synth' or 'idx'")
        if self.source == "idx" and not (self.images_path and self.labels_path):
            raise ValueError("idx source needs images_path and labels_path")
        if self.source == "synth":
            self.synth_spec()

    def synth_spec(self) -> SynthSpec:
        return SynthSpec(num_classes=self.num_classes, per_class=self.per_class, size=self.size,
                         channels=self.channels)


@dataclass
class SplitSection:
    target_train: int = 1000
    surrogate_train: int = 1000
    eval_members: int = 200
    eval_nonmembers: int = 200
    calibration: int = 200

    def check(self):
        if self.eval_members != self.eval_nonmembers:
            raise ValueError("eval_members must equal eval_nonmembers")
        for k, v in dataclasses.asdict(self).items():
            if v < 0:
                raise ValueError(f"{k} must be >= 0")


@dataclass
class ModelSection:
    family: str = "cnn-a"
    width: int = 1
    depth: int = 0
    dropout: float = 0.0

    def check(self):
        self.arch()

    def arch(self) -> ArchSpec:
        return ArchSpec(self.family, self.width, self.depth, self.dropout)


@dataclass
class TrainSection:
    optimizer: str = "adam"
    learning_rate: float = 1e-3
    epochs: int = 100
    batch_size: int = 128
    weight_decay_l2: float = 1e-6
    weight_decay_l1: float = 0.0
    momentum: float = 0.9

    def check(self):
        self.train_config(0)

    def train_config(self, seed: int) -> TrainConfig:
        return TrainConfig(optimizer=self.optimizer, learning_rate=self.learning_rate, epochs=self.epochs,
                           batch_size=self.batch_size, weight_decay_l2=self.weight_decay_l2,
                           weight_decay_l1=self.weight_decay_l1, seed=seed, momentum=self.momentum)


@dataclass
class EnsembleSection:
    families: List[str] = field(default_factory=list)
    count: int = 3

    def check(self):
        if not self.families:
            raise ValueError("families must be non-empty")
        for f in self.families:
            if f not in FAMILIES:
                raise ValueError(f"unknown family {f!r}; choose from {list(FAMILIES)}")
        if self.count < 1:
            raise ValueError("count must be >= 1")

    def members(self) -> List[Tuple[str, int]]:
        """(family, replica) pairs, family-major."""
        return [(f, i) for f in self.families for i in range(self.count)]


@dataclass
class AttackSection:
    stages: int = 80
    iterations: int = 10
    alpha: float = 1 / 255
    eps_max: float = 80 / 255
    tau: float = 0.01
    taus: List[float] = field(default_factory=lambda: [0.5, 0.2, 0.1, 0.05, 0.02, 0.01, 0.005, 0.002, 0.001])
    methods: str = "TDMI"
    momentum_decay: float = 1.0
    di_prob: float = 0.5
    di_min_scale: float = 0.9
    ti_radius: int = 3
    admix_strength: float = 0.2
    admix_count: int = 3
    validation_rule: str = "all-below"
    stop_mode: str = "tau-threshold"
    max_shots: int = 3
    calibration_fpr: float = 0.05
    target_flip_search: bool = True

    def check(self):
        self.attack_config()
        if not self.taus:
            raise ValueError("taus must be non-empty")
        if any(not 0 <= t <= 1 for t in self.taus):
            raise ValueError("every tau must be in [0, 1]")
        if any(not a > b for a, b in zip(self.taus, self.taus[1:])):
            raise ValueError("taus must be strictly decreasing")
        if self.max_shots < 1:
            raise ValueError("max_shots must be >= 1")
        if not 0 <= self.calibration_fpr <= 1:
            raise ValueError("calibration_fpr must be in [0, 1]")

    def method_params(self) -> TransferMethodParams:
        return TransferMethodParams.from_name(
            self.methods, momentum_decay=self.momentum_decay, di_prob=self.di_prob,
            di_min_scale=self.di_min_scale, ti_radius=self.ti_radius,
            admix_strength=self.admix_strength, admix_count=self.admix_count)

    def attack_config(self) -> AttackConfig:
        return AttackConfig(stages=self.stages, iterations=self.iterations, alpha=self.alpha,
                            eps_max=self.eps_max, tau=self.tau, methods=self.method_params(),
                            validation_rule=self.validation_rule, stop_mode=self.stop_mode)


@dataclass
class BaselineSection:
    enabled: List[str] = field(default_factory=lambda: list(BASELINES))
    gaussian_sigmas: List[float] = field(
        default_factory=lambda: [0.02, 0.04, 0.06, 0.08, 0.1, 0.13, 0.16, 0.2, 0.25, 0.3, 0.4, 0.5])
    gaussian_trials: int = 5
    gaussian_budget: int = 700
    rotations: List[float] = field(default_factory=lambda: [-10.0, -5.0, 0.0, 5.0, 10.0])
    translations: List[List[int]] = field(default_factory=lambda: [[-1, 0], [1, 0], [0, -1], [0, 1], [1, 1]])
    shadow_family: str = "cnn-c"
    shadow_epochs: int = 100
    relabel_budget: int = 1000

    def check(self):
        for b in self.enabled:
            if b not in BASELINES:
                raise ValueError(f"unknown baseline {b!r}; choose from {list(BASELINES)}")
        if self.shadow_family not in FAMILIES:
            raise ValueError(f"unknown shadow family {self.shadow_family!r}")
        if any(len(t) != 2 for t in self.translations):
            raise ValueError("translations must be [dx, dy] pairs")
        if self.shadow_epochs < 1 or self.relabel_budget < 1:
            raise ValueError("shadow_epochs and relabel_budget must be >= 1")
        self.baseline_config()

    def baseline_config(self):
        from .baselines import AugmentationConfig, BaselineConfig, GaussianConfig, ShadowConfig
        return BaselineConfig(
            gaussian=GaussianConfig(tuple(self.gaussian_sigmas), self.gaussian_trials, self.gaussian_budget),
            augmentation=AugmentationConfig(tuple(self.rotations), tuple(tuple(t) for t in self.translations)),
            shadow=ShadowConfig(arch=ArchSpec(self.shadow_family), relabel_budget=self.relabel_budget))


@dataclass
class DefenseSection:
    kinds: List[str] = field(default_factory=lambda: ["dropout", "dpsgd"])
    l2: List[float] = field(default_factory=lambda: list(DEFENSE_GRIDS["l2"]))
    l1: List[float] = field(default_factory=lambda: list(DEFENSE_GRIDS["l1"]))
    dropout: List[float] = field(default_factory=lambda: list(DEFENSE_GRIDS["dropout"]))
    dpsgd: List[float] = field(default_factory=lambda: list(DEFENSE_GRIDS["dpsgd"]))
    adv_train: List[float] = field(default_factory=lambda: list(DEFENSE_GRIDS["adv-train"]))
    dpsgd_clip: float = 1.2
    pgd_steps: int = 7

    def check(self):
        for k in self.kinds:
            if k not in DEFENSE_GRIDS:
                raise ValueError(f"unknown defense {k!r}; choose from {sorted(DEFENSE_GRIDS)}")
        if self.dpsgd_clip <= 0:
            raise ValueError("dpsgd_clip must be > 0")
        if any(not 0 <= r < 1 for r in self.dropout):
            raise ValueError("dropout rates must be in [0, 1)")

    def grid(self, kind: str) -> List[float]:
        return list(getattr(self, kind.replace("-", "_")))


@dataclass
class AnalysisSection:
    matched_fraction: float = 0.15
    ablation: bool = True
    ablation_coverage: float = 0.99

    def check(self):
        if not 0 <= self.matched_fraction <= 1:
            raise ValueError("matched_fraction must be in [0, 1]")
        if not 0 < self.ablation_coverage <= 1:
            raise ValueError("ablation_coverage must be in (0, 1]")


@dataclass
class PipelineSection:
    stages: List[str] = field(default_factory=lambda: list(STAGES))
    jobs: int = 1

    def check(self):
        for s in self.stages:
            if s not in STAGES:
                raise ValueError(f"unknown stage {s!r}; choose from {list(STAGES)}")
        if self.jobs < 1:
            raise ValueError("jobs must be >= 1")


@dataclass
class ExperimentConfig:
    seed: int = 0
    out: str = "runs/default"
    data: DataSection = field(default_factory=DataSection)
    split: SplitSection = field(default_factory=SplitSection)
    target: ModelSection = field(default_factory=ModelSection)
    train: TrainSection = field(default_factory=TrainSection)
    source: EnsembleSection = field(default_factory=lambda: EnsembleSection(["cnn-b"], 3))
    validation: EnsembleSection = field(default_factory=lambda: EnsembleSection(["cnn-c"], 3))
    attack: AttackSection = field(default_factory=AttackSection)
    baselines: BaselineSection = field(default_factory=BaselineSection)
    defenses: DefenseSection = field(default_factory=DefenseSection)
    analysis: AnalysisSection = field(default_factory=AnalysisSection)
    pipeline: PipelineSection = field(default_factory=PipelineSection)

    def check(self):
        fam = self.target.family
        if fam in self.source.families:
            raise ConfigError("source.families", f"contains the target family {fam!r}")
        if fam in self.validation.families:
            raise ConfigError("validation.families", f"contains the target family {fam!r}")
        if self.baselines.shadow_family == fam and "shadow" in self.baselines.enabled:
            raise ConfigError("baselines.shadow_family", f"must differ from the target family {fam!r}")

    def to_dict(self) -> Dict[str, Any]:
        return dataclasses.asdict(self)

    def canonical_json(self) -> str:
        d = self.to_dict()
        d.pop("out")
        return json.dumps(d, sort_keys=True, separators=(",", ":"))

    def config_hash(self) -> str:
        """Hash of everything that affects results (the output directory excluded)."""
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()


def _type_ok(value, tp) -> bool:
    origin = getattr(tp, "__origin__", None)
    if tp is bool:
        return isinstance(value, bool)
    if tp is int:
        return isinstance(value, int) and not isinstance(value, bool)
    if tp is float:
        return isinstance(value, (int, float)) and not isinstance(value, bool)
    if tp is str:
        return isinstance(value, str)
    if origin in (list, List):
        (inner,) = tp.__args__
        return isinstance(value, list) and all(_type_ok(v, inner) for v in value)
    return True


def _type_name(tp) -> str:
    return getattr(tp, "__name__", None) or str(tp).replace("typing.", "")


def _build(cls, raw: Dict[str, Any], path: str):
    hints = get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    for key in raw:
        if key not in names:
            where = f"{path}.{key}" if path else key
            raise ConfigError(where, f"unknown key (valid keys: {', '.join(sorted(names))})")
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name not in raw:
            continue
        where = f"{path}.{f.name}" if path else f.name
        value, tp = raw[f.name], hints[f.name]
        if dataclasses.is_dataclass(tp):
            if not isinstance(value, dict):
                raise ConfigError(where, "expected a table")
            kwargs[f.name] = _build(tp, value, where)
            continue
        if not _type_ok(value, tp):
            raise ConfigError(where, f"expected {_type_name(tp)}, got {type(value).__name__} {value!r}")
        if tp is float:
            value = float(value)
        elif getattr(tp, "__origin__", None) is list and tp.__args__[0] is float:
            value = [float(v) for v in value]
        kwargs[f.name] = value
    obj = cls(**kwargs)
    check = getattr(obj, "check", None)
    if check is not None and cls is not ExperimentConfig:
        try:
            check()
        except ConfigError:
            raise
        except ValueError as e:
            msg = str(e)
            # longest whole-word field name, preferring one that leads the message
            ordered = sorted(names, key=len, reverse=True)
            field_name = next((n for n in ordered if re.match(rf"{n}\b", msg)), None)
            if field_name is None:
                field_name = next((n for n in ordered if re.search(rf"\b{n}\b", msg)), None)
            where = f"{path}.{field_name}" if field_name else path
            raise ConfigError(where, msg) from None
    return obj


def parse_config(text: str) -> ExperimentConfig:
    """Parse TOML text; unknown keys and out-of-range values raise ConfigError with the field path."""
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as e:
        raise ConfigError("", f"TOML syntax error: {e}") from None
    cfg = _build(ExperimentConfig, raw, "")
    cfg.check()
    return cfg


def load_config(path) -> ExperimentConfig:
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read())


def _toml_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (int, float)):
        return repr(v)
    if isinstance(v, str):
        return json.dumps(v)
    if isinstance(v, list):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    raise TypeError(type(v))


def dump_config(cfg: ExperimentConfig) -> str:
    """TOML text that parses back to an equal config."""
    d = cfg.to_dict()
    lines = [f"{k} = {_toml_value(v)}" for k, v in d.items() if not isinstance(v, dict)]
    for k, v in d.items():
        if isinstance(v, dict):
            lines.append("")
            lines.append(f"[{k}]")
            lines.extend(f"{kk} = {_toml_value(vv)}" for kk, vv in v.items())
    return "\n".join(lines) + "\n"
