"""Top-1 accuracy, parameter/FLOP accounting, run reports and markdown result tables."""

import json
import statistics
from collections import defaultdict
from typing import Any, Dict, Iterable, List, Literal, Optional, Sequence, Tuple

import numpy as np
from pydantic import Field

from app.config import StrictModel
from app.errors import DataError, DimensionError
from app.models import ModelSpec

Role = Literal["pretrain", "teacher", "student"]


class EpochRecord(StrictModel):
    epoch: int
    train_loss: float
    val_accuracy: Optional[float] = None
    train_accuracy: Optional[float] = None
    lr: float


class TeacherProvenance(StrictModel):
    name: Optional[str] = None
    path: str
    digest: str


class RunReport(StrictModel):
    """
    Everything recorded about one training run.

    ``wall_clock_seconds`` is kept in memory only so that persisted reports of
    identical runs are byte-identical; timing is logged and optionally written
    to a sidecar instead.
    """

    name: str
    role: Role
    preset: str
    init: str
    strategy: str
    teacher: Optional[str] = None
    seed: int
    config: Dict[str, Any] = Field(default_factory=dict)
    epochs: List[EpochRecord] = Field(default_factory=list)
    selected_epoch: int
    initial_loss: float
    test_accuracy: float = Field(ge=0.0, le=1.0)
    params: int = Field(gt=0)
    flops: int = Field(gt=0)
    teacher_provenance: Optional[TeacherProvenance] = None
    metadata: Dict[str, Any] = Field(default_factory=dict)
    cell_digest: Optional[str] = None
    wall_clock_seconds: Optional[float] = Field(None, exclude=True)


# Metrics

def top1_micro(logits: np.ndarray, labels: np.ndarray) -> float:
    """
    Fraction of rows whose argmax equals the label.

    Ties resolve to the lowest class index. The result is the exact ratio
    correct / N rounded once to float.
    """
    logits = np.asarray(logits)
    labels = np.asarray(labels)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise DimensionError(f"top1_micro: logits {logits.shape} do not match labels {labels.shape}")
    if labels.size == 0:
        raise DataError("top1_micro: empty batch")
    correct = int((np.argmax(logits, axis=1) == labels).sum())
    return correct / labels.size


def majority_baseline(labels: np.ndarray) -> float:
    labels = np.asarray(labels)
    return int(np.bincount(labels).max()) / labels.size


# Complexity accounting

def count_params(spec: ModelSpec) -> int:
    """Closed-form parameter count: dense in*out + out, conv k*k*cin*cout + cout."""
    total = 0
    for layer in [*spec.layers, spec.head]:
        if layer.kind == "dense":
            total += layer.in_features * layer.out_features + layer.out_features
        elif layer.kind == "conv2d":
            total += layer.kernel * layer.kernel * layer.in_channels * layer.out_channels + layer.out_channels
    return total


def count_flops(spec: ModelSpec, input_shape: Optional[Sequence[int]] = None, batch: int = 1) -> int:
    """
    FLOPs of one forward pass over ``batch`` samples.

    Multiply-accumulates count 2, bias adds 1 per output element, activations
    1 per element, mean pooling 1 per input element, flatten 0.
    """
    if input_shape is not None and tuple(input_shape) != tuple(spec.input_shape):
        spec = spec.model_copy(update={"input_shape": tuple(int(d) for d in input_shape)})
    per_sample = 0
    for layer, (shape_in, shape_out) in zip([*spec.layers, spec.head], spec.layer_shapes()):
        if layer.kind == "dense":
            per_sample += 2 * layer.in_features * layer.out_features + layer.out_features
        elif layer.kind == "conv2d":
            _, h_out, w_out = shape_out
            k = layer.kernel
            per_sample += 2 * k * k * layer.in_channels * layer.out_channels * h_out * w_out
            per_sample += layer.out_channels * h_out * w_out
        elif layer.kind == "activation":
            per_sample += int(np.prod(shape_out))
        elif layer.kind == "pool-mean":
            per_sample += int(np.prod(shape_in))
    return per_sample * batch


# Tables

_INIT_ORDER = {"scratch": 0, "pretrained": 1}
_STRATEGY_ORDER = {"finetune": 0, "distill": 1}
_STRATEGY_LABEL = {"finetune": "Finetune", "distill": "Distill", "linear-probe": "Linear Probe", "pretrain": "Pretrain"}
_HEADER = "| Model | Init | Strategy | Teacher | Top-1 (%) |\n|---|---|---|---|---|"


def human_count(n: int) -> str:
    if n >= 1_000_000:
        return f"{n / 1e6:.1f}M"
    if n >= 1_000:
        return f"{n / 1e3:.1f}K"
    return str(n)


def _student_key(r: RunReport) -> Tuple:
    return (r.preset, _INIT_ORDER.get(r.init, 9), r.init, _STRATEGY_ORDER.get(r.strategy, 9), r.teacher or "", r.seed, r.name)


def _row(r: RunReport, init_label: str) -> str:
    strategy = _STRATEGY_LABEL.get(r.strategy, r.strategy)
    teacher = r.teacher or "--"
    return f"| {r.preset} ({human_count(r.params)}) | {init_label} | {strategy} | {teacher} | {100 * r.test_accuracy:.1f} |"


def emit_table(reports: Iterable[RunReport]) -> str:
    """
    Render teacher and student runs as markdown, teachers section first.

    Students are ordered by (preset, init, strategy, teacher name, seed).
    """
    reports = list(reports)
    if not reports:
        raise DataError("emit_table needs at least one report")
    teachers = sorted((r for r in reports if r.role == "teacher"), key=lambda r: (r.preset, r.name, r.seed))
    students = sorted((r for r in reports if r.role == "student"), key=_student_key)

    sections = []
    if teachers:
        rows = [_row(r, r.init) for r in teachers]
        sections.append("### Teachers\n\n" + _HEADER + "\n" + "\n".join(rows))
    if students:
        rows = [_row(r, r.init.capitalize()) for r in students]
        sections.append("### Students\n\n" + _HEADER + "\n" + "\n".join(rows))
    return "\n\n".join(sections) + "\n"


def parse_table(markdown: str) -> List[Dict[str, str]]:
    """Read back the data rows of emit_table output (column name -> cell text)."""
    columns = ["Model", "Init", "Strategy", "Teacher", "Top-1 (%)"]
    rows = []
    for line in markdown.splitlines():
        if not line.startswith("| ") or line.startswith("| Model |"):
            continue
        cells = [c.strip() for c in line.strip().strip("|").split("|")]
        rows.append(dict(zip(columns, cells)))
    return rows


def emit_summary(reports: Iterable[RunReport]) -> str:
    """
    Mean and spread of student Top-1 over seeds per regime cell.

    The last column is the gain of a cell's mean over the finetune mean of the
    same (preset, init) pair.
    """
    groups: Dict[Tuple, List[float]] = defaultdict(list)
    params: Dict[str, int] = {}
    for r in reports:
        if r.role != "student":
            continue
        groups[(r.preset, r.init, r.strategy, r.teacher or "")].append(100 * r.test_accuracy)
        params[r.preset] = r.params
    if not groups:
        raise DataError("emit_summary needs at least one student report")

    means = {key: statistics.fmean(values) for key, values in groups.items()}
    lines = [
        "| Model | Init | Strategy | Teacher | Runs | Top-1 mean (%) | Std | Gain vs Finetune |",
        "|---|---|---|---|---|---|---|---|",
    ]
    order = sorted(groups, key=lambda k: (k[0], _INIT_ORDER.get(k[1], 9), k[1], _STRATEGY_ORDER.get(k[2], 9), k[3]))
    for key in order:
        preset, init, strategy, teacher = key
        values = groups[key]
        spread = statistics.stdev(values) if len(values) > 1 else 0.0
        base = means.get((preset, init, "finetune", ""))
        gain = "--" if base is None or strategy == "finetune" else f"{means[key] - base:+.1f}"
        lines.append(
            f"| {preset} ({human_count(params[preset])}) | {init.capitalize()} | {_STRATEGY_LABEL.get(strategy, strategy)} "
            f"| {teacher or '--'} | {len(values)} | {means[key]:.1f} | {spread:.1f} | {gain} |"
        )
    return "\n".join(lines) + "\n"


def emit_complexity_table(specs: Iterable[ModelSpec]) -> str:
    lines = ["| Model | #Params | MFLOPs |", "|---|---|---|"]
    for spec in specs:
        lines.append(f"| {spec.name} | {human_count(count_params(spec))} | {count_flops(spec) / 1e6:.3f} |")
    return "\n".join(lines) + "\n"


def report_json(report: RunReport) -> str:
    return json.dumps(report.model_dump(mode="json"), sort_keys=True, indent=2)
