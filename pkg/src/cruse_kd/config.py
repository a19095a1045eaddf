"""TOML run configuration: parsing, validation and normalised dumps.

Layout::

    [data]              corpus, manifest and batching settings
    [model.teacher]     teacher architecture and checkpoint path
    [model.student]     student architecture and init seed
    [schedule]          optimisation settings
    [schedule.phase.N]  phases, run in increasing N
    [eval]              evaluation settings

Unknown sections or keys are errors. Missing keys take the defaults below,
which describe the full-scale setup.
"""

from __future__ import annotations

import dataclasses
import sys
import typing
from dataclasses import dataclass, field
from pathlib import Path

import tomli_w

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .errors import ConfigurationError
from .losses import KD_KINDS
from .model import ModelConfig
from .train import Phase, TrainingSchedule


@dataclass
class DataSection:
    corpus_dir: str = "corpus"
    speech_dir: str = "corpus/speech"
    noise_dir: str = "corpus/noise"
    n_speech: int = 32
    n_noise: int = 16
    synth_seconds: float = 4.0
    manifest: str = "manifests/train.tsv"
    eval_manifest: str = "manifests/eval.tsv"
    count: int = 1000
    eval_count: int = 150
    snr_low: float = -5.0
    snr_high: float = 15.0
    seed: int = 0
    clip_seconds: float = 2.0
    batch_size: int = 32
    workers: int = 0


@dataclass
class ModelSection:
    enc_channels: list[int] = field(default_factory=lambda: [32, 64, 128, 192])
    gru_units: int = 960
    gru_groups: int = 4
    n_mels: int = 80
    leaky_slope: float = 0.2
    gru_shuffle: bool = False
    seed: int = 0
    checkpoint: str = ""

    def model_config(self) -> ModelConfig:
        return ModelConfig(tuple(self.enc_channels), self.gru_units, self.gru_groups,
                           self.n_mels, self.leaky_slope, self.gru_shuffle)


def _student_defaults() -> "ModelSection":
    return ModelSection(enc_channels=[8, 16, 32, 32], gru_units=160)


@dataclass
class PhaseSection:
    epochs: int = 1
    gamma: float = 0.0
    kd_kind: str = "tf"


def _default_phases() -> list[PhaseSection]:
    return [PhaseSection(100, 1.0, "tf"), PhaseSection(300, 0.0, "tf")]


@dataclass
class ScheduleSection:
    steps_per_epoch: int = 5000
    lr: float = 6e-5
    seed: int = 0
    teacher_epochs: int = 400
    reset_optimizer: bool = False
    grad_clip: float = 0.0
    kd_normalize: bool = True
    row_normalize: bool = False
    out_dir: str = "runs/distill"
    phase: list[PhaseSection] = field(default_factory=_default_phases)


@dataclass
class EvalSection:
    fixed_snr: list[float] = field(default_factory=list)
    max_clips: int = 0
    output: str = ""


@dataclass
class RunConfig:
    data: DataSection = field(default_factory=DataSection)
    teacher: ModelSection = field(default_factory=ModelSection)
    student: ModelSection = field(default_factory=_student_defaults)
    schedule: ScheduleSection = field(default_factory=ScheduleSection)
    eval: EvalSection = field(default_factory=EvalSection)

    def schedule_for(self, phases: list[PhaseSection] | None = None) -> TrainingSchedule:
        s = self.schedule
        return TrainingSchedule(
            phases=tuple(Phase(p.epochs, p.gamma, p.kd_kind) for p in (phases or s.phase)),
            steps_per_epoch=s.steps_per_epoch,
            batch_size=self.data.batch_size,
            lr=s.lr,
            seed=s.seed,
            model_seed=self.student.seed,
            reset_optimizer=s.reset_optimizer,
            grad_clip=s.grad_clip or None,
            kd_normalize=s.kd_normalize,
            row_normalize=s.row_normalize,
            clip_seconds=self.data.clip_seconds,
            workers=self.data.workers,
        )

    def to_toml(self) -> str:
        return tomli_w.dumps(to_table(self))


def _coerce(value, tp, where: str):
    origin = typing.get_origin(tp)
    if origin is list:
        (item,) = typing.get_args(tp)
        if not isinstance(value, list):
            raise ConfigurationError(f"{where}: expected a list, got {type(value).__name__}")
        return [_coerce(v, item, where) for v in value]
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigurationError(f"{where}: expected true/false, got {value!r}")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigurationError(f"{where}: expected an integer, got {value!r}")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigurationError(f"{where}: expected a number, got {value!r}")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigurationError(f"{where}: expected a string, got {value!r}")
        return value
    raise ConfigurationError(f"{where}: unsupported type {tp}")


def _section(cls, table, name: str, base=None):
    if not isinstance(table, dict):
        raise ConfigurationError(f"[{name}] must be a table")
    hints = typing.get_type_hints(cls)
    obj = base if base is not None else cls()
    for key, value in table.items():
        if key not in hints or key == "phase":
            raise ConfigurationError(f"unknown key [{name}].{key}")
        setattr(obj, key, _coerce(value, hints[key], f"[{name}].{key}"))
    return obj


def from_table(raw: dict) -> RunConfig:
    cfg = RunConfig()
    for key, value in raw.items():
        if key == "data":
            _section(DataSection, value, "data", cfg.data)
        elif key == "eval":
            _section(EvalSection, value, "eval", cfg.eval)
        elif key == "model":
            if not isinstance(value, dict):
                raise ConfigurationError("[model] must be a table")
            for sub, table in value.items():
                if sub not in ("teacher", "student"):
                    raise ConfigurationError(f"unknown section [model.{sub}]")
                _section(ModelSection, table, f"model.{sub}", getattr(cfg, sub))
        elif key == "schedule":
            if not isinstance(value, dict):
                raise ConfigurationError("[schedule] must be a table")
            phases = value.get("phase")
            _section(ScheduleSection, {k: v for k, v in value.items() if k != "phase"}, "schedule", cfg.schedule)
            if phases is not None:
                cfg.schedule.phase = _phases(phases)
        else:
            raise ConfigurationError(f"unknown section [{key}]")
    validate(cfg)
    return cfg


def _phases(table) -> list[PhaseSection]:
    if not isinstance(table, dict) or not table:
        raise ConfigurationError("[schedule.phase] needs numbered sub-tables like [schedule.phase.1]")
    out = []
    for key in sorted(table, key=lambda k: int(k) if str(k).isdigit() else -1):
        if not str(key).isdigit():
            raise ConfigurationError(f"phase key {key!r} must be a positive integer")
        out.append(_section(PhaseSection, table[key], f"schedule.phase.{key}"))
    return out


def validate(cfg: RunConfig) -> None:
    for i, p in enumerate(cfg.schedule.phase, start=1):
        where = f"[schedule.phase.{i}]"
        if not 0.0 <= p.gamma <= 1.0:
            raise ConfigurationError(f"{where}.gamma must lie in [0, 1], got {p.gamma}")
        if p.epochs < 1:
            raise ConfigurationError(f"{where}.epochs must be at least 1, got {p.epochs}")
        if p.kd_kind not in KD_KINDS:
            raise ConfigurationError(f"{where}.kd_kind must be one of {', '.join(KD_KINDS)}")
    for name in ("teacher", "student"):
        try:
            getattr(cfg, name).model_config()
        except ConfigurationError as exc:
            raise ConfigurationError(f"[model.{name}]: {exc}") from None
    d = cfg.data
    if d.snr_low > d.snr_high:
        raise ConfigurationError("[data].snr_low must not exceed [data].snr_high")
    for key in ("batch_size", "count", "eval_count", "n_speech", "n_noise"):
        if getattr(d, key) < 1:
            raise ConfigurationError(f"[data].{key} must be positive")
    if d.clip_seconds <= 0 or d.synth_seconds < d.clip_seconds:
        raise ConfigurationError("[data].synth_seconds must be at least [data].clip_seconds > 0")
    s = cfg.schedule
    if s.lr <= 0:
        raise ConfigurationError("[schedule].lr must be positive")
    if s.steps_per_epoch < 1 or s.teacher_epochs < 1:
        raise ConfigurationError("[schedule].steps_per_epoch and teacher_epochs must be positive")
    if s.grad_clip < 0:
        raise ConfigurationError("[schedule].grad_clip must be >= 0 (0 disables clipping)")


def to_table(cfg: RunConfig) -> dict:
    schedule = dataclasses.asdict(cfg.schedule)
    schedule["phase"] = {str(i): p for i, p in enumerate(schedule.pop("phase"), start=1)}
    return {
        "data": dataclasses.asdict(cfg.data),
        "model": {"teacher": dataclasses.asdict(cfg.teacher), "student": dataclasses.asdict(cfg.student)},
        "schedule": schedule,
        "eval": dataclasses.asdict(cfg.eval),
    }


def parse_config(path) -> RunConfig:
    """Read, validate and fill defaults for a TOML run configuration."""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc}") from exc
    return parse_config_text(text)


def parse_config_text(text: str) -> RunConfig:
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigurationError(f"invalid TOML: {exc}") from exc
    return from_table(raw)


def apply_override(cfg: RunConfig, *assignments: str) -> RunConfig:
    """Apply ``section.key=value`` assignments (values in TOML syntax), then validate."""
    table = to_table(cfg)
    for assignment in assignments:
        if "=" not in assignment:
            raise ConfigurationError(f"override {assignment!r} must look like section.key=value")
        dotted, value = assignment.split("=", 1)
        parts = dotted.strip().split(".")
        try:
            parsed = tomllib.loads(f"v = {value.strip()}")["v"]
        except tomllib.TOMLDecodeError:
            parsed = value.strip()
        node = table
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigurationError(f"cannot override {dotted}")
        node[parts[-1]] = parsed
    return from_table(table)
