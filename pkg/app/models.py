"""Declarative model specs, presets, and instantiated encoder + linear-head models."""

import csv
import json
import logging
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Literal, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import Field

from app import tensor as T
from app.config import StrictModel
from app.errors import CheckpointError, ConfigError, DimensionError
from app.tensor import Tensor
from app.tools.checkpoint_io import Checkpoint, load_checkpoint

logger = logging.getLogger(__name__)

Shape = Tuple[int, ...]
LayerKind = Literal["dense", "conv2d", "pool-mean", "flatten", "activation"]


class LayerSpec(StrictModel):
    """
    One layer of an encoder (or the head).

    Only the fields relevant to ``kind`` are read: dense uses in/out_features,
    conv2d uses in/out_channels, kernel, stride, padding; pool-mean uses pool;
    activation uses function.
    """

    kind: LayerKind
    in_features: Optional[int] = Field(None, gt=0)
    out_features: Optional[int] = Field(None, gt=0)
    in_channels: Optional[int] = Field(None, gt=0)
    out_channels: Optional[int] = Field(None, gt=0)
    kernel: Optional[int] = Field(None, gt=0)
    stride: int = Field(1, ge=1)
    padding: int = Field(0, ge=0)
    pool: Optional[int] = Field(None, gt=0)
    function: Literal["relu", "gelu"] = "relu"
    trainable: bool = True

    def param_shapes(self) -> Dict[str, Shape]:
        if self.kind == "dense":
            return {"weight": (self.in_features, self.out_features), "bias": (self.out_features,)}
        if self.kind == "conv2d":
            k = self.kernel
            return {"weight": (self.out_channels, self.in_channels, k, k), "bias": (self.out_channels,)}
        return {}

    def output_shape(self, shape: Shape, where: str) -> Shape:
        """Shape (without batch) produced from ``shape``; raises ConfigError if they do not compose."""
        if self.kind == "dense":
            if shape != (self.in_features,):
                raise ConfigError(f"{where} (dense): expects input ({self.in_features},), got {shape}")
            return (self.out_features,)
        if self.kind == "conv2d":
            if len(shape) != 3 or shape[0] != self.in_channels:
                raise ConfigError(f"{where} (conv2d): expects {self.in_channels} input channels, got {shape}")
            _, h, w = shape
            h_out = (h + 2 * self.padding - self.kernel) // self.stride + 1
            w_out = (w + 2 * self.padding - self.kernel) // self.stride + 1
            if h_out < 1 or w_out < 1:
                raise ConfigError(f"{where} (conv2d): kernel {self.kernel} does not fit {shape}")
            return (self.out_channels, h_out, w_out)
        if self.kind == "pool-mean":
            if len(shape) != 3 or shape[1] < self.pool or shape[2] < self.pool:
                raise ConfigError(f"{where} (pool-mean): window {self.pool} does not fit {shape}")
            return (shape[0], shape[1] // self.pool, shape[2] // self.pool)
        if self.kind == "flatten":
            return (int(np.prod(shape)),)
        return shape


class ModelSpec(StrictModel):
    """
    An encoder layer list plus exactly one dense head.

    Attributes:
        name: Preset or custom model name.
        input_shape: Per-sample input shape, (features,) or (channels, side, side).
        layers: Encoder layers, applied in order.
        head: Dense layer mapping encoder features to class logits.
    """

    name: str
    input_shape: Tuple[int, ...]
    layers: List[LayerSpec]
    head: LayerSpec

    @property
    def num_classes(self) -> int:
        return self.head.out_features

    def layer_shapes(self) -> List[Tuple[Shape, Shape]]:
        """Per-layer (input, output) shapes, encoder first then head."""
        shapes = []
        current = tuple(self.input_shape)
        for i, layer in enumerate(self.layers):
            out = layer.output_shape(current, f"encoder layer {i}")
            shapes.append((current, out))
            current = out
        if self.head.kind != "dense":
            raise ConfigError(f"model {self.name!r}: head must be a dense layer, got {self.head.kind}")
        shapes.append((current, self.head.output_shape(current, "head")))
        return shapes

    def validate_shapes(self) -> "ModelSpec":
        self.layer_shapes()
        return self

    def feature_shape(self) -> Shape:
        return self.layer_shapes()[-1][0]

    def param_shapes(self) -> Dict[str, Shape]:
        shapes: Dict[str, Shape] = {}
        for i, layer in enumerate(self.layers):
            for key, shape in layer.param_shapes().items():
                shapes[f"encoder.{i}.{key}"] = shape
        for key, shape in self.head.param_shapes().items():
            shapes[f"head.{key}"] = shape
        return shapes

    def canonical_json(self) -> str:
        return json.dumps(self.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))

    def digest(self) -> int:
        return zlib.crc32(self.canonical_json().encode("utf-8"))


# Presets: (family, default widths). Conv presets need image input.
PRESETS: Dict[str, Tuple[str, List[int]]] = {
    "cnx-t": ("conv", [8, 16]),
    "cnx-s": ("conv", [12, 24, 32]),
    "vit-s": ("dense", [64, 64]),
    "vit-s+": ("dense", [96, 96]),
    "teacher-b": ("dense", [192, 192, 128]),
    "teacher-l": ("dense", [384, 384, 256]),
}


def _conv_layers(input_shape: Shape, widths: Sequence[int], activation: str) -> List[LayerSpec]:
    if len(input_shape) != 3 or input_shape[1] != input_shape[2]:
        raise ConfigError(f"conv presets need square (channels, side, side) input, got {input_shape}")
    channels, side, _ = input_shape
    layers: List[LayerSpec] = []
    for i, width in enumerate(widths):
        layers.append(LayerSpec(kind="conv2d", in_channels=channels, out_channels=width, kernel=3, padding=1))
        layers.append(LayerSpec(kind="activation", function=activation))
        channels = width
        if i == 0 and side >= 4:
            layers.append(LayerSpec(kind="pool-mean", pool=2))
            side //= 2
    layers.append(LayerSpec(kind="pool-mean", pool=side))
    layers.append(LayerSpec(kind="flatten"))
    return layers


def _dense_layers(input_shape: Shape, widths: Sequence[int], activation: str) -> List[LayerSpec]:
    layers: List[LayerSpec] = []
    if len(input_shape) > 1:
        layers.append(LayerSpec(kind="flatten"))
    features = int(np.prod(input_shape))
    for width in widths:
        layers.append(LayerSpec(kind="dense", in_features=features, out_features=width))
        layers.append(LayerSpec(kind="activation", function=activation))
        features = width
    return layers


def build_preset(
    name: str,
    input_shape: Sequence[int],
    num_classes: int,
    widths: Optional[Sequence[int]] = None,
    activation: str = "relu",
) -> ModelSpec:
    """
    Instantiate a preset spec for a given input shape and class count.

    Args:
        name: One of PRESETS.
        input_shape: Per-sample input shape of the dataset.
        num_classes: Output size of the head.
        widths: Optional per-layer widths overriding the preset defaults.
        activation: Hidden nonlinearity, relu or gelu.
    """
    if name not in PRESETS:
        raise ConfigError(f"unknown model preset {name!r}; choose from {sorted(PRESETS)}")
    family, default_widths = PRESETS[name]
    widths = list(widths) if widths else default_widths
    input_shape = tuple(int(d) for d in input_shape)
    if family == "conv":
        layers = _conv_layers(input_shape, widths, activation)
    else:
        layers = _dense_layers(input_shape, widths, activation)
    shape: Shape = input_shape
    for i, layer in enumerate(layers):
        shape = layer.output_shape(shape, f"{name} layer {i}")
    head = LayerSpec(kind="dense", in_features=shape[0], out_features=num_classes)
    return ModelSpec(name=name, input_shape=input_shape, layers=layers, head=head).validate_shapes()


@dataclass
class Model:
    """
    An instantiated ModelSpec.

    Attributes:
        spec: The declarative spec.
        params: Parameter tensors by name (``encoder.<i>.weight``, ``head.bias``, ...).
        frozen_mask: True for parameters the optimizer must never touch.
    """

    spec: ModelSpec
    params: Dict[str, Tensor]
    frozen_mask: Dict[str, bool]

    def trainable_params(self) -> Dict[str, Tensor]:
        return {name: p for name, p in self.params.items() if not self.frozen_mask[name]}

    def encoder_param_names(self) -> List[str]:
        return [name for name in self.params if name.startswith("encoder.")]

    def set_frozen(self, name: str, frozen: bool) -> None:
        self.frozen_mask[name] = frozen
        self.params[name].set_requires_grad(not frozen)

    def _check_input(self, batch: Tensor) -> None:
        if batch.ndim < 1 or tuple(batch.shape[1:]) != tuple(self.spec.input_shape):
            raise DimensionError(
                f"model {self.spec.name!r} expects batches of shape (n, {', '.join(map(str, self.spec.input_shape))}), got {batch.shape}"
            )

    def embed(self, batch: Tensor) -> Tensor:
        self._check_input(batch)
        x = batch
        for i, layer in enumerate(self.spec.layers):
            if layer.kind == "dense":
                x = T.add(T.matmul(x, self.params[f"encoder.{i}.weight"]), self.params[f"encoder.{i}.bias"])
            elif layer.kind == "conv2d":
                x = T.conv2d(x, self.params[f"encoder.{i}.weight"], self.params[f"encoder.{i}.bias"], layer.stride, layer.padding)
            elif layer.kind == "pool-mean":
                x = T.avg_pool2d(x, layer.pool)
            elif layer.kind == "flatten":
                x = T.flatten(x)
            elif layer.function == "gelu":
                x = T.gelu(x)
            else:
                x = T.relu(x)
        return x

    def head_logits(self, features: Tensor) -> Tensor:
        return T.add(T.matmul(features, self.params["head.weight"]), self.params["head.bias"])

    def forward(self, batch: Tensor) -> Tensor:
        return self.head_logits(self.embed(batch))

    def arrays(self) -> Dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.params.items()}

    def assign(self, arrays: Dict[str, np.ndarray]) -> None:
        for name, value in arrays.items():
            self.params[name].data[...] = value


def _truncated_normal(rng: np.random.Generator, shape: Shape, std: float) -> np.ndarray:
    # values live on the float32 grid so checkpoints of fresh models are exact
    draw = rng.normal(0.0, std, size=shape).astype(np.float32).astype(np.float64)
    bound = 2.0 * std
    outside = np.abs(draw) > bound
    while outside.any():
        draw[outside] = rng.normal(0.0, std, size=int(outside.sum())).astype(np.float32)
        outside = np.abs(draw) > bound
    return draw


def _new_model(spec: ModelSpec, arrays: Dict[str, np.ndarray]) -> Model:
    frozen_by_layer = {f"encoder.{i}.": not layer.trainable for i, layer in enumerate(spec.layers)}
    frozen_by_layer["head."] = not spec.head.trainable
    params: Dict[str, Tensor] = {}
    frozen: Dict[str, bool] = {}
    for name, value in arrays.items():
        prefix = name.rsplit(".", 1)[0] + "."
        is_frozen = frozen_by_layer[prefix]
        params[name] = Tensor(value, requires_grad=not is_frozen, name=name)
        frozen[name] = is_frozen
    return Model(spec=spec, params=params, frozen_mask=frozen)


def init_truncated_normal(spec: ModelSpec, std: float = 0.02, seed: int = 0) -> Model:
    """
    Instantiate a spec with truncated-normal weights and zero biases.

    Weights are drawn from N(0, std^2) and resampled until they lie within
    +-2 std. The result is a deterministic function of (spec, std, seed).
    """
    if not std > 0:
        raise ConfigError(f"init std must be positive, got {std}")
    spec.validate_shapes()
    rng = np.random.default_rng(seed)
    arrays = {}
    for name, shape in spec.param_shapes().items():
        arrays[name] = np.zeros(shape) if name.endswith(".bias") else _truncated_normal(rng, shape, std)
    return _new_model(spec, arrays)


def to_checkpoint(model: Model, metadata: Optional[dict] = None) -> Checkpoint:
    meta = dict(metadata or {})
    meta["spec"] = json.loads(model.spec.canonical_json())
    meta.setdefault("preset", model.spec.name)
    tensors = {name: p.data.astype("<f4") for name, p in model.params.items()}
    return Checkpoint(spec_digest=model.spec.digest(), tensors=tensors, metadata=meta)


def from_checkpoint(checkpoint: Checkpoint, expected: Optional[ModelSpec] = None) -> Model:
    """
    Rebuild the exact model stored in a checkpoint.

    Raises:
        CheckpointError: If ``expected`` is given and its digest differs.
    """
    if "spec" not in checkpoint.metadata:
        raise CheckpointError("checkpoint metadata carries no model spec")
    spec = ModelSpec.model_validate(checkpoint.metadata["spec"])
    if spec.digest() != checkpoint.spec_digest:
        raise CheckpointError(f"spec digest mismatch: header {checkpoint.spec_digest:08x}, metadata spec {spec.digest():08x}")
    if expected is not None:
        checkpoint.require_digest(expected.digest(), expected.name)
    arrays = {name: checkpoint.tensors[name].astype(np.float64) for name in spec.param_shapes()}
    return _new_model(spec, arrays)


def load_pretrained(spec: ModelSpec, checkpoint: Union[Path, str, Checkpoint], seed: int = 0, std: float = 0.02) -> Model:
    """
    Instantiate ``spec`` with encoder weights taken from a checkpoint.

    The head is always freshly initialized (its size may differ from the
    checkpoint's); every parameter starts unfrozen.

    Raises:
        ConfigError: If an encoder tensor is missing or has the wrong shape; the
            message names the layer.
    """
    if not isinstance(checkpoint, Checkpoint):
        checkpoint = load_checkpoint(checkpoint)
    model = init_truncated_normal(spec, std, seed)
    for name in model.encoder_param_names():
        layer = name.rsplit(".", 1)[0]
        expected = model.params[name].shape
        if name not in checkpoint.tensors:
            raise ConfigError(f"{layer}: checkpoint has no tensor {name!r}")
        stored = checkpoint.tensors[name]
        if tuple(stored.shape) != tuple(expected):
            raise ConfigError(f"{layer}: checkpoint {name} has shape {tuple(stored.shape)}, spec expects {tuple(expected)}")
        model.params[name].data[...] = stored.astype(np.float64)
    for name in model.params:
        model.set_frozen(name, False)
    logger.info(f"Loaded pretrained encoder for {spec.name} ({len(model.encoder_param_names())} tensors)")
    return model


def freeze_encoder(model: Model) -> Model:
    """Mark every encoder parameter frozen and the head trainable."""
    for name in model.params:
        model.set_frozen(name, name.startswith("encoder."))
    return model


def forward(model: Model, batch: Tensor) -> Tensor:
    return model.forward(batch)


def embed(model: Model, batch: Tensor) -> Tensor:
    return model.embed(batch)


def export_embeddings(model: Model, features: np.ndarray, path: Path, labels: Optional[np.ndarray] = None) -> np.ndarray:
    """
    Write encoder features of ``features`` as CSV (optional label column first).

    Returns:
        np.ndarray: The exported embedding matrix.
    """
    with T.no_grad():
        emb = model.embed(Tensor(features)).data
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        header = [f"e{j}" for j in range(emb.shape[1])]
        writer.writerow((["label"] if labels is not None else []) + header)
        for i, row in enumerate(emb):
            values = [repr(float(v)) for v in row]
            writer.writerow(([int(labels[i])] if labels is not None else []) + values)
    return emb


def read_embeddings(path: Path) -> Tuple[np.ndarray, Optional[np.ndarray]]:
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    header, body = rows[0], rows[1:]
    if header and header[0] == "label":
        labels = np.array([int(r[0]) for r in body], dtype=np.int64)
        values = np.array([[float(v) for v in r[1:]] for r in body])
        return values, labels
    return np.array([[float(v) for v in r] for r in body]), None
