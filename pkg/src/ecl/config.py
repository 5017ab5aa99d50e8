"""Experiment configuration: nested YAML sections with strict key checking."""
from __future__ import annotations

import os
from dataclasses import asdict, dataclass, field, fields

import yaml

from .losses import PARADIGMS

OUT_DIR_ENV = "ECL_OUT_DIR"
ARMS = ("uncal", "soft-ece", "ecl", "uncal-matched")
VERIFY_IDS = ("theorem1", "theorem2", "theorem3", "all")


class ConfigError(ValueError):
    """Invalid or unknown configuration entry."""


@dataclass
class TaskSection:
    kind: str = "gaussian"
    n_per_domain: int = 400
    source_mean: list = field(default_factory=lambda: [0.0, 0.0])
    target_mean: list = field(default_factory=lambda: [2.0, 2.0])
    cov_diag: list = field(default_factory=lambda: [5.0, 5.0])
    source_box: list = field(default_factory=lambda: [-2.5, 2.5])
    target_box: list = field(default_factory=lambda: [-1.5, 3.5])
    labeling: str = "sine"
    eval_n: int = 0  # 0: evaluate on the unlabeled target sample itself

    def validate(self):
        if self.kind not in ("gaussian", "uniform"):
            raise ConfigError(f"task.kind must be gaussian or uniform, got {self.kind!r}")
        _positive("task.n_per_domain", self.n_per_domain)
        if self.eval_n < 0:
            raise ConfigError("task.eval_n must be >= 0")


@dataclass
class ModelSection:
    hidden: int = 64
    d: int | None = None  # inferred from the task when null
    K: int | None = None

    def validate(self):
        _positive("model.hidden", self.hidden)


@dataclass
class TrainingSection:
    epochs: int = 100
    batch_size: int = 100
    lr: float = 1e-3
    seed: int = 0
    n_seeds: int = 1
    aux_epochs: int = 100
    calib_epochs: int = 100
    aux_holdout: float = 0.0
    finetune_epochs: int = 20
    arms: list = field(default_factory=lambda: ["uncal", "soft-ece", "ecl"])

    def validate(self):
        for name in ("epochs", "batch_size", "n_seeds", "finetune_epochs"):
            _positive(f"training.{name}", getattr(self, name))
        for name in ("aux_epochs", "calib_epochs"):
            if getattr(self, name) < 0:
                raise ConfigError(f"training.{name} must be >= 0")
        _positive("training.lr", self.lr)
        if not 0.0 <= self.aux_holdout < 1.0:
            raise ConfigError("training.aux_holdout must be in [0, 1)")
        bad = [a for a in self.arms if a not in ARMS]
        if bad:
            raise ConfigError(f"training.arms has unknown entries {bad}; expected {ARMS}")
        if "uncal" not in self.arms:
            raise ConfigError("training.arms must include uncal (the accuracy baseline)")


@dataclass
class LossSection:
    paradigms: list = field(default_factory=lambda: list(PARADIGMS))
    n_bins: int = 15
    lattice_resolution: int = 14
    tau: float | None = None
    eps: float = 1e-8
    alpha_ema: float = 0.1
    n_prox: int = 3
    gamma: float = 1.0
    lambda_cap: float = 1e6
    soft_ece_weight: float = 1.0
    posterior: str = "live"
    minibatch: str = "trainable"

    def validate(self):
        bad = [p for p in self.paradigms if p not in PARADIGMS]
        if bad or not self.paradigms:
            raise ConfigError(f"loss.paradigms must be a non-empty subset of {PARADIGMS}")
        for name in ("n_bins", "lattice_resolution", "eps", "n_prox", "lambda_cap"):
            _positive(f"loss.{name}", getattr(self, name))
        if self.tau is not None:
            _positive("loss.tau", self.tau)
        if not 0.0 < self.alpha_ema <= 1.0:
            raise ConfigError("loss.alpha_ema must be in (0, 1]")
        if self.gamma < 0:
            raise ConfigError("loss.gamma must be >= 0")
        if self.posterior not in ("live", "snapshot"):
            raise ConfigError("loss.posterior must be live or snapshot")
        if self.minibatch not in ("trainable", "naive"):
            raise ConfigError("loss.minibatch must be trainable or naive")


@dataclass
class AblationSection:
    gammas: list = field(default_factory=lambda: [0.5, 0.8, 1.0, 1.2, 1.5])
    paradigm: str = "top-label"
    n_seeds: int = 5

    def validate(self):
        if self.paradigm not in PARADIGMS:
            raise ConfigError(f"ablation.paradigm must be one of {PARADIGMS}")
        _positive("ablation.n_seeds", self.n_seeds)
        if not self.gammas:
            raise ConfigError("ablation.gammas must not be empty")


@dataclass
class VerifySection:
    n_grid: int = 1000
    ns: list = field(default_factory=lambda: [100, 1000, 10_000, 100_000])
    trials: int = 50
    n_random: int = 1000
    large_n: int = 1_000_000

    def validate(self):
        for name in ("n_grid", "trials", "n_random", "large_n"):
            _positive(f"verify.{name}", getattr(self, name))


@dataclass
class OutputSection:
    dir: str = "runs/default"
    checkpoints: bool = True
    svg: bool = True

    def validate(self):
        if not self.dir:
            raise ConfigError("output.dir must not be empty")


SECTIONS = {"task": TaskSection, "model": ModelSection, "training": TrainingSection,
            "loss": LossSection, "ablation": AblationSection, "verify": VerifySection,
            "output": OutputSection}


@dataclass
class ExperimentConfig:
    task: TaskSection = field(default_factory=TaskSection)
    model: ModelSection = field(default_factory=ModelSection)
    training: TrainingSection = field(default_factory=TrainingSection)
    loss: LossSection = field(default_factory=LossSection)
    ablation: AblationSection = field(default_factory=AblationSection)
    verify: VerifySection = field(default_factory=VerifySection)
    output: OutputSection = field(default_factory=OutputSection)

    def validate(self):
        for name in SECTIONS:
            getattr(self, name).validate()
        return self

    def to_dict(self):
        return asdict(self)

    def to_yaml(self):
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    def save(self, path):
        with open(path, "w") as fh:
            fh.write(self.to_yaml())

    @classmethod
    def from_dict(cls, data):
        data = data or {}
        if not isinstance(data, dict):
            raise ConfigError("configuration root must be a mapping")
        unknown = set(data) - set(SECTIONS)
        if unknown:
            raise ConfigError(f"unknown config section(s): {sorted(unknown)}")
        kwargs = {}
        for name, section_cls in SECTIONS.items():
            body = data.get(name) or {}
            if not isinstance(body, dict):
                raise ConfigError(f"section {name!r} must be a mapping")
            allowed = {f.name for f in fields(section_cls)}
            extra = set(body) - allowed
            if extra:
                raise ConfigError(f"unknown key(s) in {name}: {sorted(extra)}")
            kwargs[name] = section_cls(**body)
        try:
            return cls(**kwargs).validate()
        except TypeError as exc:
            raise ConfigError(f"bad value type in config: {exc}") from exc

    @classmethod
    def load(cls, path):
        try:
            with open(path) as fh:
                data = yaml.safe_load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse config {path}: {exc}") from exc
        return cls.from_dict(data)


def _positive(name, value):
    if value is None or not value > 0:
        raise ConfigError(f"{name} must be positive, got {value!r}")


def resolve(path=None, seed=None, out=None):
    """Load a config (defaults when ``path`` is None) and apply CLI/env overrides.

    Output directory precedence: ``--out`` flag, then the ECL_OUT_DIR
    environment variable, then the file.
    """
    cfg = ExperimentConfig.load(path) if path else ExperimentConfig().validate()
    if seed is not None:
        cfg.training.seed = int(seed)
    env_out = os.environ.get(OUT_DIR_ENV)
    if out:
        cfg.output.dir = out
    elif env_out:
        cfg.output.dir = env_out
    return cfg
