"""
Dataset file formats.

packed-binary (little-endian): magic "DFD1", u32 N, u32 num_classes, u32 rank,
u32 dims[rank], N*prod(dims) float32 features, N u32 labels, then 3x2 u32
split ranges (train, val, test).

tabular-csv: header ``label,f0,f1,...`` with one row per sample, plus a JSON
sidecar ``<name>.splits.json`` holding the three index lists, the per-sample
input shape and the class count.
"""

import csv
import json
import logging
import struct
from pathlib import Path
from typing import Dict, List, NamedTuple, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from app.errors import DataError, DataFormatError

logger = logging.getLogger(__name__)

MAGIC = b"DFD1"
SPLIT_NAMES = ("train", "val", "test")


class RawDataset(NamedTuple):
    features: np.ndarray
    labels: np.ndarray
    splits: Dict[str, Tuple[int, int]]
    num_classes: int


class SplitSidecar(BaseModel):
    """Contents of the CSV splits sidecar."""

    model_config = ConfigDict(extra="forbid")

    train: List[int] = Field(default_factory=list)
    val: List[int] = Field(default_factory=list)
    test: List[int] = Field(default_factory=list)
    input_shape: List[int] = Field(min_length=1)
    num_classes: int = Field(gt=0)


def sidecar_path(path: Union[str, Path]) -> Path:
    path = Path(path)
    return path.with_name(path.stem + ".splits.json")


def write_packed(raw: RawDataset, path: Union[str, Path]) -> Path:
    path = Path(path)
    n = raw.features.shape[0]
    dims = raw.features.shape[1:]
    payload = bytearray(MAGIC)
    payload += struct.pack("<III", n, raw.num_classes, len(dims))
    payload += struct.pack(f"<{len(dims)}I", *dims)
    payload += np.ascontiguousarray(raw.features, dtype="<f4").tobytes()
    payload += np.ascontiguousarray(raw.labels, dtype="<u4").tobytes()
    for name in SPLIT_NAMES:
        payload += struct.pack("<II", *raw.splits[name])
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(bytes(payload))
    return path


def _read_bytes(path: Path) -> bytes:
    try:
        return path.read_bytes()
    except OSError as e:
        raise DataError(f"cannot read dataset {path}: {e}") from e


def read_packed(path: Union[str, Path]) -> RawDataset:
    data = _read_bytes(Path(path))
    offset = 0

    def take(n: int) -> bytes:
        nonlocal offset
        if offset + n > len(data):
            raise DataFormatError(f"{path}: truncated payload at byte offset {offset} (need {n} bytes, {len(data) - offset} left)")
        chunk = data[offset:offset + n]
        offset += n
        return chunk

    if data[:4] != MAGIC:
        raise DataFormatError(f"{path}: bad magic at byte offset 0 (expected {MAGIC!r}, got {data[:4]!r})")
    offset = 4
    n, num_classes, rank = struct.unpack("<III", take(12))
    dims = struct.unpack(f"<{rank}I", take(4 * rank))
    per_sample = int(np.prod(dims, dtype=np.int64))
    features = np.frombuffer(take(4 * n * per_sample), dtype="<f4").astype(np.float64).reshape((n, *dims))
    label_offset = offset
    labels = np.frombuffer(take(4 * n), dtype="<u4").astype(np.int64)
    bad = np.flatnonzero(labels >= num_classes)
    if bad.size:
        i = int(bad[0])
        raise DataFormatError(
            f"{path}: label {labels[i]} out of range [0, {num_classes}) at byte offset {label_offset + 4 * i}"
        )
    ranges = struct.unpack("<6I", take(24))
    if offset != len(data):
        raise DataFormatError(f"{path}: {len(data) - offset} unexpected trailing bytes at byte offset {offset}")
    splits = {name: (ranges[2 * i], ranges[2 * i + 1]) for i, name in enumerate(SPLIT_NAMES)}
    return RawDataset(features, labels, splits, int(num_classes))


def write_csv(raw: RawDataset, path: Union[str, Path]) -> Path:
    path = Path(path)
    n = raw.features.shape[0]
    flat = raw.features.reshape(n, -1)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["label"] + [f"f{j}" for j in range(flat.shape[1])])
        for label, row in zip(raw.labels, flat):
            writer.writerow([int(label)] + [repr(float(v)) for v in row])
    sidecar = {
        name: list(range(*raw.splits[name])) for name in SPLIT_NAMES
    }
    sidecar["input_shape"] = list(raw.features.shape[1:])
    sidecar["num_classes"] = raw.num_classes
    sidecar_path(path).write_text(json.dumps(sidecar))
    return path


def read_csv(path: Union[str, Path]) -> RawDataset:
    path = Path(path)
    side = sidecar_path(path)
    try:
        meta = json.loads(side.read_text())
    except OSError as e:
        raise DataError(f"cannot read split sidecar {side}: {e}") from e
    except json.JSONDecodeError as e:
        raise DataFormatError(f"{side}: invalid JSON at line {e.lineno}: {e.msg}") from e
    try:
        sidecar = SplitSidecar.model_validate(meta)
    except ValidationError as e:
        raise DataFormatError(f"{side}: invalid splits sidecar: {e}") from e
    num_classes = sidecar.num_classes
    input_shape = tuple(sidecar.input_shape)
    width = int(np.prod(input_shape, dtype=np.int64))

    labels: List[int] = []
    rows: List[List[float]] = []
    try:
        with open(path, newline="") as f:
            reader = csv.reader(f)
            header = next(reader, None)
            if not header or header[0] != "label" or len(header) != width + 1:
                raise DataFormatError(f"{path}: line 1: expected header label,f0..f{width - 1}")
            for line_no, record in enumerate(reader, start=2):
                if len(record) != width + 1:
                    raise DataFormatError(f"{path}: line {line_no}: expected {width + 1} fields, got {len(record)}")
                try:
                    label = int(record[0])
                    values = [float(v) for v in record[1:]]
                except ValueError as e:
                    raise DataFormatError(f"{path}: line {line_no}: {e}") from e
                if not 0 <= label < num_classes:
                    raise DataFormatError(f"{path}: line {line_no}: label {label} out of range [0, {num_classes})")
                labels.append(label)
                rows.append(values)
    except OSError as e:
        raise DataError(f"cannot read dataset {path}: {e}") from e

    order: List[int] = []
    splits: Dict[str, Tuple[int, int]] = {}
    for name in SPLIT_NAMES:
        indices = getattr(sidecar, name)
        splits[name] = (len(order), len(order) + len(indices))
        order.extend(indices)
    if sorted(order) != list(range(len(rows))):
        raise DataFormatError(f"{side}: split index lists must partition rows 0..{len(rows) - 1}")
    features = np.array(rows, dtype=np.float64).reshape((len(rows), *input_shape))[order]
    return RawDataset(features, np.array(labels, dtype=np.int64)[order], splits, num_classes)
