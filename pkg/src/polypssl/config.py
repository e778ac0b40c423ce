"""Structured YAML configuration: defaults, file values and ``key=value`` overrides."""

from __future__ import annotations

import dataclasses
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import yaml

from .augmentation import AugmentConfig
from .datasets import SyntheticSpec
from .evaluation import ExperimentConfig
from .exceptions import InvalidConfigError
from .losses import ReconLossConfig, TverskyParams
from .network import UNetConfig, with_head
from .training import FINETUNE_SCHEDULE, PRETRAIN_SCHEDULE, TrainSchedule


@dataclass(frozen=True)
class DataConfig:
    root: str | None = None
    image_subdir: str = "images"
    mask_subdir: str = "masks"
    unlabeled_root: str | None = None
    unlabeled_image_subdir: str = "images"
    test_fraction: float = 0.1
    n_folds: int = 5
    n_jobs: int = 1

    def __post_init__(self):
        if not 0.0 < self.test_fraction < 1.0:
            raise InvalidConfigError("must lie in (0, 1)", "data", "test_fraction")
        if self.n_folds < 2:
            raise InvalidConfigError("must be >= 2", "data", "n_folds")
        if self.n_jobs < 1:
            raise InvalidConfigError("must be >= 1", "data", "n_jobs")


@dataclass(frozen=True)
class NetworkConfig:
    depth: int = 4
    base_channels: int = 64
    channel_multiplier: int = 2
    norm: bool = True

    def __post_init__(self):
        self.unet("segmentation")

    def unet(self, task: str) -> UNetConfig:
        base = UNetConfig(self.depth, self.base_channels, self.channel_multiplier, norm=self.norm)
        return with_head(base, task)


@dataclass(frozen=True)
class LossConfig:
    alpha: float = 0.4
    beta: float = 0.6
    smooth: float = 1.0
    reduction: str = "mean_over_masked"

    def __post_init__(self):
        self.tversky
        self.recon

    @property
    def tversky(self) -> TverskyParams:
        return TverskyParams(self.alpha, self.beta, self.smooth)

    @property
    def recon(self) -> ReconLossConfig:
        return ReconLossConfig(self.reduction)


@dataclass(frozen=True)
class StudyConfig:
    n_labeled: int = 20
    seeds: tuple[int, ...] = (0, 1, 2)
    n_test: int = 40
    output_dir: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        if self.n_labeled < 10:
            raise InvalidConfigError("must be >= 10", "study", "n_labeled")
        if len(self.seeds) < 3:
            raise InvalidConfigError("need at least 3 seeds", "study", "seeds")
        if self.n_test < 1:
            raise InvalidConfigError("must be >= 1", "study", "n_test")


SECTIONS = {
    "data": DataConfig,
    "augment": AugmentConfig,
    "network": NetworkConfig,
    "losses": LossConfig,
    "schedule_pretrain": TrainSchedule,
    "schedule_finetune": TrainSchedule,
    "evaluation": ExperimentConfig,
    "synthetic": SyntheticSpec,
    "study": StudyConfig,
}
SECTION_DEFAULTS = {"schedule_pretrain": PRETRAIN_SCHEDULE, "schedule_finetune": FINETUNE_SCHEDULE}
SCALARS = {"seed": int, "determinism": bool}


@dataclass(frozen=True)
class GlobalConfig:
    data: DataConfig = field(default_factory=DataConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    network: NetworkConfig = field(default_factory=NetworkConfig)
    losses: LossConfig = field(default_factory=LossConfig)
    schedule_pretrain: TrainSchedule = PRETRAIN_SCHEDULE
    schedule_finetune: TrainSchedule = FINETUNE_SCHEDULE
    evaluation: ExperimentConfig = field(default_factory=ExperimentConfig)
    synthetic: SyntheticSpec = field(default_factory=SyntheticSpec)
    study: StudyConfig = field(default_factory=StudyConfig)
    seed: int = 0
    determinism: bool = False

    def __post_init__(self):
        divisor = 2**self.network.depth
        bad = [s for s in self.augment.scales if s % divisor]
        if bad:
            raise InvalidConfigError(
                f"scales {bad} are not divisible by {divisor} (network depth {self.network.depth})",
                "augment",
                "scales",
            )
        self.evaluation.check_divisor(divisor)

    def to_dict(self):
        out = {}
        for name in SECTIONS:
            section = asdict(getattr(self, name))
            out[name] = {k: list(v) if isinstance(v, tuple) else v for k, v in section.items()}
        out["evaluation"]["conditions"] = [asdict(c) for c in self.evaluation.conditions]
        out["seed"] = self.seed
        out["determinism"] = self.determinism
        return out

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    def save(self, path):
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(self.to_yaml(), encoding="utf-8")
        return path

    def replace(self, **changes) -> "GlobalConfig":
        return dataclasses.replace(self, **changes)


def _build_section(name: str, values) -> object:
    cls = SECTIONS[name]
    if values is None:
        return SECTION_DEFAULTS.get(name) or cls()
    if not isinstance(values, dict):
        raise InvalidConfigError("section must be a mapping", name)
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise InvalidConfigError(f"unknown key(s) {unknown}", name)
    base = SECTION_DEFAULTS.get(name)
    try:
        if base is not None:
            return dataclasses.replace(base, **values)
        return cls(**values)
    except InvalidConfigError as exc:
        if exc.section is None or exc.section != name:
            raise InvalidConfigError(exc.message, name, exc.field) from exc
        raise
    except (TypeError, ValueError) as exc:
        raise InvalidConfigError(str(exc), name) from exc


def from_dict(raw: dict | None) -> GlobalConfig:
    raw = dict(raw or {})
    unknown = sorted(set(raw) - set(SECTIONS) - set(SCALARS))
    if unknown:
        raise InvalidConfigError(f"unknown top-level key(s) {unknown}")
    kwargs = {name: _build_section(name, raw.get(name)) for name in SECTIONS}
    for key, cast in SCALARS.items():
        if key in raw:
            value = raw[key]
            if cast is bool and not isinstance(value, bool):
                raise InvalidConfigError("must be true or false", None, key)
            try:
                kwargs[key] = cast(value)
            except (TypeError, ValueError) as exc:
                raise InvalidConfigError(str(exc), None, key) from exc
    return GlobalConfig(**kwargs)


def parse_override(text: str) -> tuple[list[str], object]:
    if "=" not in text:
        raise InvalidConfigError(f"override '{text}' is not of the form key=value")
    key, value = text.split("=", 1)
    path = key.strip().split(".")
    if not all(path) or len(path) > 2:
        raise InvalidConfigError(f"bad override key '{key}'")
    return path, yaml.safe_load(value) if value.strip() else None


def apply_overrides(raw: dict, overrides: Sequence[str]) -> dict:
    raw = {k: (dict(v) if isinstance(v, dict) else v) for k, v in (raw or {}).items()}
    for text in overrides:
        path, value = parse_override(text)
        if len(path) == 1:
            raw[path[0]] = value
        else:
            section = raw.setdefault(path[0], {})
            if section is None:
                section = raw[path[0]] = {}
            if not isinstance(section, dict):
                raise InvalidConfigError("section must be a mapping", path[0])
            section[path[1]] = value
    return raw


def load_config(path=None, overrides: Sequence[str] = ()) -> GlobalConfig:
    """Defaults, then the YAML file at ``path`` (if any), then ``overrides``."""
    raw = {}
    if path is not None:
        text = Path(path).read_text(encoding="utf-8")
        try:
            raw = yaml.safe_load(text) or {}
        except yaml.MarkedYAMLError as exc:
            mark = exc.problem_mark or exc.context_mark
            line = f" at line {mark.line + 1}, column {mark.column + 1}" if mark else ""
            raise InvalidConfigError(f"cannot parse '{path}'{line}: {exc.problem}") from exc
        if not isinstance(raw, dict):
            raise InvalidConfigError(f"'{path}' must contain a mapping at top level")
    return from_dict(apply_overrides(raw, overrides))
