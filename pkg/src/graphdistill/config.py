"""Experiment configuration: dataclasses, JSON loading, and fingerprinting."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field
from typing import Any

from .errors import ConfigError
from .losses import DistillConfig

TEACHER_KINDS = ("gcn", "sage", "gat")
INPUT_MODES = ("teacher-latent", "raw-features")

# Independent rng streams per training phase, so e.g. distillation settings
# can never perturb teacher training.
PHASE_TEACHER = 0
PHASE_MLP = 1
PHASE_STUDENT = 2


@dataclass(frozen=True)
class TeacherConfig:
    layers: int = 2
    hidden: int = 64
    dropout: float = 0.5
    heads: int = 8  # GAT hidden layers
    final_heads: int = 1
    leaky_slope: float = 0.2
    lr: float = 0.01
    weight_decay: float = 5e-4  # first-layer parameters only
    epochs: int = 400
    patience: int = 50

    def validate(self) -> "TeacherConfig":
        if self.layers < 1:
            raise ConfigError("teacher.layers must be >= 1")
        if self.hidden < 1 or self.hidden % self.heads != 0:
            raise ConfigError(f"teacher.hidden ({self.hidden}) must be a positive multiple "
                              f"of teacher.heads ({self.heads})")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("teacher.dropout must lie in [0, 1)")
        if self.lr <= 0 or self.epochs < 1 or self.patience < 0:
            raise ConfigError("teacher optimizer settings out of domain")
        return self


@dataclass(frozen=True)
class StudentConfig:
    input_mode: str = "teacher-latent"
    d_model: int = 64
    heads: int = 4
    d_ff: int = 128
    layers: int = 2
    dropout: float = 0.2  # attention weights and feed-forward
    lr: float = 3e-3
    weight_decay: float = 0.0
    epochs: int = 200
    patience: int = 25

    def validate(self) -> "StudentConfig":
        if self.input_mode not in INPUT_MODES:
            raise ConfigError(f"student.input_mode must be one of {INPUT_MODES}")
        if self.d_model < 1 or self.d_model % self.heads != 0:
            raise ConfigError(f"student.d_model ({self.d_model}) must be a positive multiple "
                              f"of student.heads ({self.heads})")
        if self.layers < 0:
            raise ConfigError("student.layers must be >= 0")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("student.dropout must lie in [0, 1)")
        if self.lr <= 0 or self.epochs < 1 or self.patience < 0:
            raise ConfigError("student optimizer settings out of domain")
        return self


@dataclass(frozen=True)
class MlpConfig:
    hidden: int = 64
    dropout: float = 0.5
    lr: float = 0.01
    weight_decay: float = 5e-4
    epochs: int = 400
    patience: int = 50

    def validate(self) -> "MlpConfig":
        if self.hidden < 1 or not 0.0 <= self.dropout < 1.0:
            raise ConfigError("mlp settings out of domain")
        if self.lr <= 0 or self.epochs < 1 or self.patience < 0:
            raise ConfigError("mlp optimizer settings out of domain")
        return self


@dataclass(frozen=True)
class ExperimentConfig:
    teachers: tuple[str, ...] = ("gcn",)
    data: str | None = None
    row_normalize: bool = True
    seed: int = 0
    runs: int = 5
    out: str | None = None
    fmt: str = "csv"
    history_dir: str | None = None
    teacher: TeacherConfig = field(default_factory=TeacherConfig)
    student: StudentConfig = field(default_factory=StudentConfig)
    mlp: MlpConfig = field(default_factory=MlpConfig)
    distill: DistillConfig = field(default_factory=DistillConfig)

    def validate(self) -> "ExperimentConfig":
        if not self.teachers:
            raise ConfigError("at least one teacher kind required")
        for k in self.teachers:
            if k not in TEACHER_KINDS:
                raise ConfigError(f"unknown teacher kind {k!r}; expected one of {TEACHER_KINDS}")
        if self.runs < 1:
            raise ConfigError("runs must be >= 1")
        if self.fmt not in ("csv", "json"):
            raise ConfigError(f"format must be csv or json, got {self.fmt!r}")
        self.teacher.validate()
        self.student.validate()
        self.mlp.validate()
        try:
            self.distill.validate()
        except Exception as e:
            raise ConfigError(str(e)) from e
        return self

    def resolve_data_path(self) -> str:
        """Resolve the dataset path, falling back to $DISTILL_DATA_DIR for
        relative paths that do not exist as given."""
        if self.data is None:
            raise ConfigError("no dataset path configured (set 'data' or pass --data)")
        if os.path.exists(self.data):
            return self.data
        root = os.environ.get("DISTILL_DATA_DIR")
        if root and not os.path.isabs(self.data):
            candidate = os.path.join(root, self.data)
            if os.path.exists(candidate):
                return candidate
        return self.data

    def semantic_dict(self) -> dict[str, Any]:
        d = dataclasses.asdict(self)
        for transient in ("out", "fmt", "history_dir"):
            d.pop(transient)
        d["teachers"] = list(self.teachers)
        return d

    def fingerprint(self) -> str:
        blob = json.dumps(self.semantic_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:12]


def _build(cls, raw: dict, path: str):
    valid = {f.name for f in dataclasses.fields(cls)}
    unknown = set(raw) - valid
    if unknown:
        raise ConfigError(f"{path}: unknown key(s) {sorted(unknown)}")
    return cls(**raw)


def config_from_dict(raw: dict[str, Any]) -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config document must be a JSON object")
    raw = dict(raw)
    nested = {}
    for name, cls in (("teacher", TeacherConfig), ("student", StudentConfig),
                      ("mlp", MlpConfig), ("distill", DistillConfig)):
        if name in raw:
            section = raw.pop(name)
            if not isinstance(section, dict):
                raise ConfigError(f"{name}: expected an object")
            nested[name] = _build(cls, section, name)
    if "teachers" in raw:
        t = raw["teachers"]
        if isinstance(t, str):
            t = [t]
        if not isinstance(t, list):
            raise ConfigError("teachers: expected a list of kinds")
        raw["teachers"] = tuple(t)
    try:
        cfg = _build(ExperimentConfig, {**raw, **nested}, "config")
    except TypeError as e:
        raise ConfigError(str(e)) from e
    return cfg.validate()


def load_config(path: str) -> ExperimentConfig:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON ({e})") from e
    return config_from_dict(raw)
