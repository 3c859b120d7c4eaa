"""
Training runs: encoder pretraining, teacher linear probing and student training.

All three share one loop: define-by-run forward on a fresh tape, the blended
objective, backward, and an AdamW step at the per-step cosine learning rate.
"""

import logging
import math
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Literal, Optional, Tuple, Union

import numpy as np
from pydantic import Field, model_validator

from app.config import StrictModel, load_settings
from app.data import Dataset, batch_indices, coarsen
from app.errors import ConfigError, NumericError
from app.evaluation import EpochRecord, RunReport, TeacherProvenance, count_flops, count_params, top1_micro
from app.models import (
    Model,
    ModelSpec,
    build_preset,
    freeze_encoder,
    from_checkpoint,
    init_truncated_normal,
    load_pretrained,
    to_checkpoint,
)
from app.objectives import DistillConfig, total_loss
from app.optim import AdamW, CosineSchedule
from app.tensor import Tape, Tensor, no_grad
from app.tools.checkpoint_io import Checkpoint, load_checkpoint
from app.tools.report_store import file_digest

logger = logging.getLogger(__name__)

INFERENCE_CHUNK = 256


class ScheduleSettings(StrictModel):
    """Optimizer and schedule settings shared by every kind of run."""

    epochs: int = Field(default_factory=lambda: load_settings().epochs, ge=1)
    batch_size: int = Field(default_factory=lambda: load_settings().batch_size, ge=1)
    lr_max: float = Field(1e-4, gt=0)
    lr_min: float = Field(1e-6, ge=0)
    weight_decay: float = Field(1e-4, ge=0)
    init_std: float = Field(0.02, gt=0)

    @model_validator(mode="after")
    def _check_lr(self):
        if self.lr_min > self.lr_max:
            raise ValueError(f"lr_min {self.lr_min} exceeds lr_max {self.lr_max}")
        return self


class TrainConfig(ScheduleSettings):
    """
    One student run: model preset, initialization regime and objective.

    Attributes:
        preset: Student model preset name.
        init: ``scratch`` (truncated normal) or ``pretrained`` (encoder from ``pretrained_path``).
        strategy: ``finetune`` (cross-entropy) or ``distill`` (blended objective, teacher at ``teacher_path``).
        distill: Temperature, alpha and KL direction of the blended objective.
        teacher_cache: Precompute teacher logits for the train split once.
        augmentation: Recorded for provenance; only ``none`` is implemented.
    """

    preset: str
    name: Optional[str] = None
    widths: Optional[List[int]] = None
    activation: Literal["relu", "gelu"] = "relu"
    init: Literal["scratch", "pretrained"] = "scratch"
    pretrained_path: Optional[str] = None
    strategy: Literal["finetune", "distill"] = "finetune"
    teacher_path: Optional[str] = None
    teacher_name: Optional[str] = None
    distill: DistillConfig = Field(default_factory=DistillConfig)
    seed: int = 0
    teacher_cache: bool = False
    augmentation: Literal["none"] = "none"

    @model_validator(mode="after")
    def _check_regime(self):
        if self.init == "pretrained" and not self.pretrained_path:
            raise ValueError("init=pretrained needs pretrained_path")
        if self.strategy == "distill" and not self.teacher_path:
            raise ValueError("strategy=distill needs teacher_path")
        return self

    @property
    def kl_direction(self) -> str:
        return self.distill.kl_direction

    def run_name(self) -> str:
        if self.name:
            return self.name
        teacher = f"-{self.teacher_name}" if self.strategy == "distill" and self.teacher_name else ""
        return f"{self.preset}-{self.init}-{self.strategy}{teacher}-s{self.seed}"


class PretrainConfig(ScheduleSettings):
    """Supervised encoder pretraining on labels merged ``merge_factor``-to-1."""

    name: Optional[str] = None
    preset: str
    widths: Optional[List[int]] = None
    activation: Literal["relu", "gelu"] = "relu"
    merge_factor: int = Field(1, ge=1)
    seed: int = 0


class ProbeConfig(ScheduleSettings):
    """Linear probing of a frozen encoder."""

    name: Optional[str] = None
    seed: int = 0


@dataclass
class _FitResult:
    epochs: List[EpochRecord]
    selected_epoch: int
    initial_loss: float


class TeacherSource:
    """
    Frozen teacher logits for training batches.

    Logits are computed row by row so that cached and recomputed values are
    bitwise identical regardless of batch composition.
    """

    def __init__(self, model: Model, dataset: Dataset, cache: bool = False):
        self.model = model
        self.features = dataset.features
        self.train_start = dataset.splits["train"][0]
        self._cache: Optional[np.ndarray] = None
        if cache:
            start, end = dataset.splits["train"]
            self._cache = teacher_logits(model, dataset.features[start:end])
            logger.info(f"Cached teacher logits for {end - start} train samples")

    def logits(self, indices: np.ndarray) -> np.ndarray:
        if self._cache is not None:
            return self._cache[indices - self.train_start]
        return teacher_logits(self.model, self.features[indices])


def teacher_logits(model: Model, features: np.ndarray) -> np.ndarray:
    """Row-wise no-gradient inference."""
    with no_grad():
        rows = [model.forward(Tensor(features[i:i + 1])).data[0] for i in range(features.shape[0])]
    return np.stack(rows) if rows else np.zeros((0, model.spec.num_classes))


def predict_logits(model: Model, features: np.ndarray) -> np.ndarray:
    """No-gradient inference in fixed chunks of the natural sample order."""
    with no_grad():
        chunks = [
            model.forward(Tensor(features[i:i + INFERENCE_CHUNK])).data
            for i in range(0, features.shape[0], INFERENCE_CHUNK)
        ]
    return np.concatenate(chunks) if chunks else np.zeros((0, model.spec.num_classes))


def evaluate(model: Model, dataset: Dataset, split: str = "test") -> float:
    features, labels = dataset.split(split)
    return top1_micro(predict_logits(model, features), labels)


def _fit(
    model: Model,
    dataset: Dataset,
    settings: ScheduleSettings,
    seed: int,
    objective: DistillConfig,
    teacher: Optional[TeacherSource] = None,
) -> _FitResult:
    params = model.trainable_params()
    if not params:
        raise ConfigError(f"model {model.spec.name!r} has no trainable parameters")
    optimizer = AdamW(params, weight_decay=settings.weight_decay)
    n_train = dataset.splits["train"][1] - dataset.splits["train"][0]
    steps_per_epoch = math.ceil(n_train / settings.batch_size)
    schedule = CosineSchedule(settings.lr_max, settings.lr_min, settings.epochs * steps_per_epoch)

    records: List[EpochRecord] = []
    best: Optional[Tuple[float, int, Dict[str, np.ndarray]]] = None
    initial_loss = math.nan
    step = 0
    lr = settings.lr_max
    for epoch in range(1, settings.epochs + 1):
        losses = []
        for idx in batch_indices(dataset, "train", settings.batch_size, seed, epoch):
            targets = teacher.logits(idx) if teacher is not None else None
            lr = schedule.lr_at(step)
            with Tape() as tape:
                logits = model.forward(Tensor(dataset.features[idx]))
                loss = total_loss(logits, targets, dataset.labels[idx], objective)
            value = loss.item()
            if not math.isfinite(value):
                raise NumericError(f"non-finite loss {value} at step {step} (epoch {epoch})")
            if step == 0:
                initial_loss = value
            optimizer.zero_grad()
            tape.backward(loss)
            optimizer.step(lr)
            losses.append(value)
            step += 1

        train_loss = float(np.mean(losses))
        if dataset.has_val:
            val_acc = evaluate(model, dataset, "val")
            records.append(EpochRecord(epoch=epoch, train_loss=train_loss, val_accuracy=val_acc, lr=lr))
            logger.info(f"epoch={epoch} train_loss={train_loss:.6f} val_acc={val_acc:.4f} lr={lr:.6g}")
            if best is None or val_acc > best[0]:
                best = (val_acc, epoch, model.arrays())
        else:
            train_acc = evaluate(model, dataset, "train")
            records.append(EpochRecord(epoch=epoch, train_loss=train_loss, train_accuracy=train_acc, lr=lr))
            logger.info(f"epoch={epoch} train_loss={train_loss:.6f} train_acc={train_acc:.4f} lr={lr:.6g}")

    selected = settings.epochs
    if best is not None:
        _, selected, arrays = best
        model.assign(arrays)
    # the evaluated model is exactly what the checkpoint stores
    model.assign({name: value.astype(np.float32).astype(np.float64) for name, value in model.arrays().items()})
    return _FitResult(records, selected, initial_loss)


def _finish(
    model: Model,
    dataset: Dataset,
    fit: _FitResult,
    *,
    name: str,
    role: str,
    init: str,
    strategy: str,
    seed: int,
    config: dict,
    batch_size: int,
    teacher: Optional[str] = None,
    provenance: Optional[TeacherProvenance] = None,
    started: float,
    eval_dataset: Optional[Dataset] = None,
) -> Tuple[Checkpoint, RunReport]:
    eval_dataset = eval_dataset or dataset
    report = RunReport(
        name=name,
        role=role,
        preset=model.spec.name,
        init=init,
        strategy=strategy,
        teacher=teacher,
        seed=seed,
        config=config,
        epochs=fit.epochs,
        selected_epoch=fit.selected_epoch,
        initial_loss=fit.initial_loss,
        test_accuracy=evaluate(model, eval_dataset, "test"),
        params=count_params(model.spec),
        flops=count_flops(model.spec),
        teacher_provenance=provenance,
        metadata={
            "batch_size": batch_size,
            "augmentation": "none",
            "selection": "best-val" if dataset.has_val else "last-epoch",
            "num_classes": eval_dataset.num_classes,
        },
        wall_clock_seconds=time.perf_counter() - started,
    )
    checkpoint = to_checkpoint(
        model,
        {
            "name": name,
            "role": role,
            "config": config,
            "epoch": fit.selected_epoch,
            "metrics": {"test_accuracy": report.test_accuracy},
            "report": report.model_dump(mode="json"),
        },
    )
    logger.info(f"{role} {name}: test top-1 {100 * report.test_accuracy:.2f}% ({report.wall_clock_seconds:.1f}s)")
    return checkpoint, report


def pretrain_encoder(dataset: Dataset, cfg: PretrainConfig) -> Tuple[Checkpoint, RunReport]:
    """
    Supervised training on the coarse-labeled variant of ``dataset``.

    The resulting encoder initializes teachers before probing and students in
    the pretrained regime.
    """
    started = time.perf_counter()
    coarse = coarsen(dataset, cfg.merge_factor)
    spec = build_preset(cfg.preset, coarse.input_shape, coarse.num_classes, cfg.widths, cfg.activation)
    model = init_truncated_normal(spec, cfg.init_std, cfg.seed)
    name = cfg.name or f"{cfg.preset}-pretrain-k{cfg.merge_factor}-s{cfg.seed}"
    logger.info(f"Pretraining encoder {name} on {coarse.num_classes} coarse classes")
    fit = _fit(model, coarse, cfg, cfg.seed, DistillConfig(alpha=0.0))
    return _finish(
        model, coarse, fit,
        name=name, role="pretrain", init="scratch", strategy="pretrain", seed=cfg.seed,
        config=cfg.model_dump(mode="json"), batch_size=cfg.batch_size, started=started,
    )


def _as_checkpoint(source: Union[str, Path, Checkpoint]) -> Checkpoint:
    return source if isinstance(source, Checkpoint) else load_checkpoint(source)


def train_teacher_probe(
    encoder_ckpt: Union[str, Path, Checkpoint], dataset: Dataset, cfg: ProbeConfig
) -> Checkpoint:
    """
    Adapt a pretrained encoder to ``dataset`` by training only a linear head.

    Returns:
        Checkpoint: Frozen encoder plus trained head; the run's RunReport is
            embedded in the metadata under ``report``.

    Raises:
        ConfigError: If the encoder's input shape does not match the dataset.
    """
    started = time.perf_counter()
    source = _as_checkpoint(encoder_ckpt)
    encoder_model = from_checkpoint(source)
    encoder_spec = encoder_model.spec
    if tuple(encoder_spec.input_shape) != dataset.input_shape:
        raise ConfigError(
            f"encoder {encoder_spec.name!r} takes input {tuple(encoder_spec.input_shape)}, dataset provides {dataset.input_shape}"
        )
    head = encoder_spec.head.model_copy(update={"out_features": dataset.num_classes})
    spec = ModelSpec(name=encoder_spec.name, input_shape=encoder_spec.input_shape, layers=encoder_spec.layers, head=head)
    model = freeze_encoder(load_pretrained(spec, source, seed=cfg.seed, std=cfg.init_std))

    encoder_name = source.metadata.get("name", encoder_spec.name)
    name = cfg.name or f"{encoder_spec.name}-probe-{encoder_name}"
    logger.info(f"Linear probing teacher {name} ({len(model.trainable_params())} trainable tensors)")
    fit = _fit(model, dataset, cfg, cfg.seed, DistillConfig(alpha=0.0))
    checkpoint, _ = _finish(
        model, dataset, fit,
        name=name, role="teacher", init=encoder_name, strategy="linear-probe", seed=cfg.seed,
        config=cfg.model_dump(mode="json"), batch_size=cfg.batch_size, started=started,
    )
    return checkpoint


def load_teacher(path: Union[str, Path], dataset: Dataset) -> Model:
    """Load a teacher checkpoint as a fully frozen model compatible with ``dataset``."""
    teacher = from_checkpoint(load_checkpoint(path))
    if teacher.spec.num_classes != dataset.num_classes:
        raise ConfigError(f"teacher {path} predicts {teacher.spec.num_classes} classes, dataset has {dataset.num_classes}")
    if tuple(teacher.spec.input_shape) != dataset.input_shape:
        raise ConfigError(f"teacher {path} takes input {tuple(teacher.spec.input_shape)}, dataset provides {dataset.input_shape}")
    for name in teacher.params:
        teacher.set_frozen(name, True)
    return teacher


def train_student(dataset: Dataset, cfg: TrainConfig) -> Tuple[Checkpoint, RunReport]:
    """
    Train a compact student under one regime of the (init x strategy) grid.

    Raises:
        ConfigError: Teacher/dataset class-count or shape mismatch.
        NumericError: Non-finite loss; the message names the step index.
    """
    started = time.perf_counter()
    spec = build_preset(cfg.preset, dataset.input_shape, dataset.num_classes, cfg.widths, cfg.activation)
    if cfg.init == "pretrained":
        model = load_pretrained(spec, cfg.pretrained_path, seed=cfg.seed, std=cfg.init_std)
    else:
        model = init_truncated_normal(spec, cfg.init_std, cfg.seed)

    teacher: Optional[TeacherSource] = None
    provenance: Optional[TeacherProvenance] = None
    objective = DistillConfig(alpha=0.0)
    if cfg.strategy == "distill":
        teacher = TeacherSource(load_teacher(cfg.teacher_path, dataset), dataset, cache=cfg.teacher_cache)
        provenance = TeacherProvenance(name=cfg.teacher_name, path=str(cfg.teacher_path), digest=file_digest(cfg.teacher_path))
        objective = cfg.distill

    name = cfg.run_name()
    logger.info(f"Training student {name}")
    fit = _fit(model, dataset, cfg, cfg.seed, objective, teacher)
    return _finish(
        model, dataset, fit,
        name=name, role="student", init=cfg.init, strategy=cfg.strategy, seed=cfg.seed,
        config=cfg.model_dump(mode="json"), batch_size=cfg.batch_size,
        teacher=cfg.teacher_name if cfg.strategy == "distill" else None,
        provenance=provenance, started=started,
    )


def evaluate_checkpoint(path: Union[str, Path], dataset: Dataset, split: str = "test", expected: Optional[ModelSpec] = None) -> float:
    """Top-1 of a stored model; with ``expected`` the checkpoint must have been built for that spec."""
    return evaluate(from_checkpoint(load_checkpoint(path), expected), dataset, split)
