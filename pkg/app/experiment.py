"""
Experiment files: one JSON document naming a dataset, encoder pretraining jobs,
teacher probes and the student regime grid.
"""

import json
import logging
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Union

from pydantic import Field, ValidationError, model_validator

from app.config import StrictModel
from app.data import Dataset, DatasetFormat, GenSpec, benchmark_spec, generate, load
from app.errors import ConfigError, KDError
from app.objectives import DistillConfig
from app.training import PretrainConfig, ProbeConfig, ScheduleSettings, TrainConfig

logger = logging.getLogger(__name__)


class DatasetRef(StrictModel):
    """Exactly one of a dataset file, an inline generator spec or a named benchmark."""

    path: Optional[str] = None
    format: DatasetFormat = "packed-binary"
    generate: Optional[GenSpec] = None
    benchmark: Optional[str] = None
    seed: Optional[int] = None

    @model_validator(mode="after")
    def _exactly_one(self):
        given = [k for k in ("path", "generate", "benchmark") if getattr(self, k) is not None]
        if len(given) != 1:
            raise ValueError(f"dataset needs exactly one of path, generate, benchmark; got {given or 'none'}")
        return self

    def resolve(self) -> Dataset:
        if self.path is not None:
            return load(self.path, self.format)
        if self.benchmark is not None:
            return generate(benchmark_spec(self.benchmark, self.seed))
        spec = self.generate if self.seed is None else self.generate.model_copy(update={"seed": self.seed})
        return generate(spec)


class PretrainJob(PretrainConfig):
    name: str


class TeacherConfig(StrictModel):
    """
    A named teacher: a pretrained encoder adapted by linear probing.

    ``encoder`` is the name of a pretrain job in the same file or a checkpoint path.
    """

    name: str
    encoder: str
    probe: ProbeConfig = Field(default_factory=ProbeConfig)


class StudentConfig(ScheduleSettings):
    """
    One student cell of the grid, run once per experiment seed.

    ``encoder`` (for init=pretrained) and ``teacher`` (for strategy=distill)
    are job names from the same file or checkpoint paths.
    """

    name: Optional[str] = None
    preset: str
    widths: Optional[List[int]] = None
    activation: Literal["relu", "gelu"] = "relu"
    init: Literal["scratch", "pretrained"] = "scratch"
    encoder: Optional[str] = None
    strategy: Literal["finetune", "distill"] = "finetune"
    teacher: Optional[str] = None
    distill: DistillConfig = Field(default_factory=DistillConfig)
    teacher_cache: bool = False

    @model_validator(mode="after")
    def _check_refs(self):
        if self.init == "pretrained" and not self.encoder:
            raise ValueError(f"student {self.preset}: init=pretrained needs an encoder")
        if self.strategy == "distill" and not self.teacher:
            raise ValueError(f"student {self.preset}: strategy=distill needs a teacher")
        return self

    @property
    def teacher_label(self) -> Optional[str]:
        if self.strategy != "distill":
            return None
        return Path(self.teacher).stem if self.teacher.endswith(".ckpt") else self.teacher

    def run_name(self, seed: int) -> str:
        if self.name:
            return f"{self.name}-s{seed}"
        parts = [self.preset, self.init, self.strategy]
        if self.teacher_label:
            parts.append(self.teacher_label)
        return "-".join(parts) + f"-s{seed}"

    def train_config(self, seed: int, pretrained_path: Optional[str], teacher_path: Optional[str]) -> TrainConfig:
        schedule = {name: getattr(self, name) for name in ScheduleSettings.model_fields}
        return TrainConfig(
            **schedule,
            name=self.run_name(seed),
            preset=self.preset,
            widths=self.widths,
            activation=self.activation,
            init=self.init,
            pretrained_path=pretrained_path if self.init == "pretrained" else None,
            strategy=self.strategy,
            teacher_path=teacher_path if self.strategy == "distill" else None,
            teacher_name=self.teacher_label,
            distill=self.distill,
            seed=seed,
            teacher_cache=self.teacher_cache,
        )


def _apply_defaults(job: Any, defaults: Dict[str, Any], fields) -> Any:
    if not isinstance(job, dict):
        return job
    merged = {k: v for k, v in defaults.items() if k in fields}
    merged.update(job)
    return merged


class ExperimentFile(StrictModel):
    """
    A complete experiment.

    Attributes:
        dataset: Where the data comes from.
        pretrain_dataset: Optional separate pool for encoder pretraining; defaults to ``dataset``.
        seed: First student seed; students run for seed .. seed + replicates - 1.
        defaults: Schedule settings applied to every job that does not set them.
        pretrain: Encoder pretraining jobs.
        teachers: Teacher probes over pretrained encoders.
        students: Student cells of the (init x strategy) grid.
    """

    name: str = "experiment"
    dataset: DatasetRef
    pretrain_dataset: Optional[DatasetRef] = None
    seed: int = 0
    replicates: int = Field(1, ge=1)
    defaults: Dict[str, Any] = Field(default_factory=dict)
    pretrain: List[PretrainJob] = Field(default_factory=list)
    teachers: List[TeacherConfig] = Field(default_factory=list)
    students: List[StudentConfig] = Field(default_factory=list)

    @model_validator(mode="before")
    @classmethod
    def _spread_defaults(cls, data: Any) -> Any:
        if not isinstance(data, dict) or not data.get("defaults"):
            return data
        defaults = data["defaults"]
        unknown = set(defaults) - set(ScheduleSettings.model_fields) - {"teacher_cache", "distill"}
        if unknown:
            raise ValueError(f"unknown keys in defaults: {sorted(unknown)}")
        data = dict(data)
        data["pretrain"] = [_apply_defaults(j, defaults, PretrainJob.model_fields) for j in data.get("pretrain", [])]
        data["students"] = [_apply_defaults(j, defaults, StudentConfig.model_fields) for j in data.get("students", [])]
        teachers = []
        for t in data.get("teachers", []):
            if isinstance(t, dict):
                t = dict(t)
                t["probe"] = _apply_defaults(t.get("probe", {}), defaults, ProbeConfig.model_fields)
            teachers.append(t)
        data["teachers"] = teachers
        return data

    @model_validator(mode="after")
    def _check_references(self):
        pretrain_names = [j.name for j in self.pretrain]
        teacher_names = [t.name for t in self.teachers]
        for names, kind in ((pretrain_names, "pretrain job"), (teacher_names, "teacher")):
            duplicates = sorted({n for n in names if names.count(n) > 1})
            if duplicates:
                raise ValueError(f"duplicate {kind} names: {duplicates}")
        for t in self.teachers:
            _require_ref(t.encoder, pretrain_names, f"teacher {t.name!r} encoder")
        for s in self.students:
            if s.init == "pretrained":
                _require_ref(s.encoder, pretrain_names, f"student {s.preset} encoder")
            if s.strategy == "distill":
                _require_ref(s.teacher, teacher_names, f"student {s.preset} teacher")
        return self

    def student_seeds(self, seed_override: Optional[int] = None) -> List[int]:
        base = self.seed if seed_override is None else seed_override
        return list(range(base, base + self.replicates))


def _require_ref(ref: str, names: List[str], what: str) -> None:
    if ref in names or Path(ref).is_file():
        return
    raise ValueError(f"{what} {ref!r} is neither a job in this file nor an existing checkpoint")


def load_experiment(path: Union[str, Path]) -> ExperimentFile:
    """
    Parse and validate an experiment file.

    Raises:
        ConfigError: Unreadable file, invalid JSON, unknown keys or unresolved references.
    """
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except OSError as e:
        raise ConfigError(f"cannot read experiment file {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON at line {e.lineno}: {e.msg}") from e
    try:
        experiment = ExperimentFile.model_validate(raw)
    except ValidationError as e:
        raise ConfigError(f"{path}: {e}") from e
    logger.info(
        f"Loaded experiment {experiment.name!r}: {len(experiment.pretrain)} pretrain, "
        f"{len(experiment.teachers)} teachers, {len(experiment.students)} students x {experiment.replicates} seeds"
    )
    return experiment


def _resolve(ref: DatasetRef, what: str) -> Dataset:
    try:
        return ref.resolve()
    except KDError:
        raise
    except (OSError, ValueError) as e:
        raise ConfigError(f"cannot resolve {what}: {e}") from e


def resolve_dataset(experiment: ExperimentFile) -> Dataset:
    return _resolve(experiment.dataset, "dataset")


def resolve_pretrain_dataset(experiment: ExperimentFile, dataset: Dataset) -> Dataset:
    """
    The pool encoders are pretrained on: ``pretrain_dataset`` when given, else ``dataset``.

    Raises:
        ConfigError: The pool cannot be resolved or its input shape differs from ``dataset``.
    """
    if experiment.pretrain_dataset is None:
        return dataset
    pool = _resolve(experiment.pretrain_dataset, "pretrain dataset")
    if pool.input_shape != dataset.input_shape:
        raise ConfigError(f"pretrain dataset input {pool.input_shape} differs from dataset input {dataset.input_shape}")
    return pool
