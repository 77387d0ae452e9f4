"""Layered models with an explicit extractor/classifier boundary."""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autograd as ag
from .autograd import Tensor

LAYER_KINDS = ("linear", "relu", "conv2d", "maxpool2d", "flatten")


class ShapeError(ValueError):
    """Raised when a batch or layer does not fit the expected shape."""


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    in_features: int = 0
    out_features: int = 0
    in_channels: int = 0
    out_channels: int = 0
    kernel: int = 0
    bias: bool = True

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ConfigError(f"unknown layer kind {self.kind!r}")

    @classmethod
    def linear(cls, n_in: int, n_out: int, bias: bool = True) -> LayerSpec:
        return cls("linear", in_features=n_in, out_features=n_out, bias=bias)

    @classmethod
    def conv2d(cls, c_in: int, c_out: int, kernel: int, bias: bool = True) -> LayerSpec:
        return cls("conv2d", in_channels=c_in, out_channels=c_out, kernel=kernel, bias=bias)

    @classmethod
    def simple(cls, kind: str) -> LayerSpec:
        return cls(kind, bias=False)

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        if self.kind == "linear":
            shapes = {"weight": (self.in_features, self.out_features)}
            if self.bias:
                shapes["bias"] = (self.out_features,)
            return shapes
        if self.kind == "conv2d":
            shapes = {"weight": (self.out_channels, self.in_channels, self.kernel, self.kernel)}
            if self.bias:
                shapes["bias"] = (self.out_channels,)
            return shapes
        return {}

    def fan_in(self) -> int:
        if self.kind == "linear":
            return self.in_features
        return self.in_channels * self.kernel * self.kernel

    def output_shape(self, shape: tuple[int, ...], index: int) -> tuple[int, ...]:
        """Per-sample output shape; raises ShapeError naming ``index``."""
        if self.kind == "linear":
            if shape != (self.in_features,):
                raise ShapeError(f"layer {index} (linear): expected input {(self.in_features,)}, got {shape}")
            return (self.out_features,)
        if self.kind == "conv2d":
            if len(shape) != 3 or shape[0] != self.in_channels:
                raise ShapeError(
                    f"layer {index} (conv2d): expected ({self.in_channels}, H, W), got {shape}"
                )
            h, w = shape[1] - self.kernel + 1, shape[2] - self.kernel + 1
            if h < 1 or w < 1:
                raise ShapeError(f"layer {index} (conv2d): input {shape} smaller than kernel {self.kernel}")
            return (self.out_channels, h, w)
        if self.kind == "maxpool2d":
            if len(shape) != 3:
                raise ShapeError(f"layer {index} (maxpool2d): expected (C, H, W), got {shape}")
            return (shape[0], shape[1] // 2, shape[2] // 2)
        if self.kind == "flatten":
            return (int(np.prod(shape)),)
        return shape


def apply_layer(spec: LayerSpec, params: dict[str, Tensor], x: Tensor) -> Tensor:
    if spec.kind == "linear":
        y = ag.matmul(x, params["weight"])
        return ag.add(y, params["bias"]) if "bias" in params else y
    if spec.kind == "relu":
        return ag.relu(x)
    if spec.kind == "conv2d":
        return ag.conv2d(x, params["weight"], params.get("bias"))
    if spec.kind == "maxpool2d":
        return ag.maxpool2d(x, 2)
    return ag.reshape(x, (x.shape[0], -1))


@dataclass(eq=False)
class LayerStack:
    """A contiguous run of layers and their parameter arrays.

    Arrays are shared with the model the stack was split from, so updating a
    stack's parameters updates the model.
    """

    layers: list[LayerSpec]
    params: list[dict[str, np.ndarray]]
    input_shape: tuple[int, ...]
    offset: int = 0

    def output_shape(self) -> tuple[int, ...]:
        shape = tuple(self.input_shape)
        for i, spec in enumerate(self.layers):
            shape = spec.output_shape(shape, self.offset + i)
        return shape

    def apply(self, x: Tensor, tensors: Sequence[dict[str, Tensor]] | None = None) -> Tensor:
        if tuple(x.shape[1:]) != tuple(self.input_shape):
            raise ShapeError(
                f"layer {self.offset}: expected per-sample input {tuple(self.input_shape)}, got {tuple(x.shape[1:])}"
            )
        if tensors is None:
            tensors = [{k: Tensor(v) for k, v in p.items()} for p in self.params]
        for spec, p in zip(self.layers, tensors):
            x = apply_layer(spec, p, x)
        return x

    def forward(self, batch: np.ndarray) -> np.ndarray:
        return self.apply(Tensor(np.asarray(batch))).data

    def num_params(self) -> int:
        return int(sum(a.size for p in self.params for a in p.values()))


@dataclass(eq=False)
class ModelParams:
    layers: list[LayerSpec]
    params: list[dict[str, np.ndarray]]
    classifier_boundary: int
    input_shape: tuple[int, ...]
    num_classes: int = field(init=False)

    def __post_init__(self):
        self.input_shape = tuple(int(d) for d in self.input_shape)
        if not 0 <= self.classifier_boundary < len(self.layers):
            raise ConfigError(
                f"classifier_boundary {self.classifier_boundary} out of range for {len(self.layers)} layers"
            )
        if len(self.params) != len(self.layers):
            raise ConfigError("one parameter dict per layer required")
        shape = self.input_shape
        for i, spec in enumerate(self.layers):
            for name, expected in spec.param_shapes().items():
                got = self.params[i][name].shape
                if tuple(got) != expected:
                    raise ShapeError(f"layer {i} {name}: expected {expected}, got {tuple(got)}")
            shape = spec.output_shape(shape, i)
        if len(shape) != 1:
            raise ShapeError(f"model output must be a vector per sample, got {shape}")
        self.num_classes = shape[0]

    @property
    def dtype(self) -> np.dtype:
        for p in self.params:
            for a in p.values():
                return a.dtype
        return np.dtype(np.float64)

    # Flat iteration order is fixed: layer order, then sorted param name.
    def named_arrays(self) -> list[tuple[str, np.ndarray]]:
        return [(f"{i}.{name}", p[name]) for i, p in enumerate(self.params) for name in sorted(p)]

    def arrays(self) -> list[np.ndarray]:
        return [a for _, a in self.named_arrays()]

    def num_params(self) -> int:
        return int(sum(a.size for a in self.arrays()))

    def copy(self) -> ModelParams:
        return copy.deepcopy(self)

    def with_arrays(self, arrays: Sequence[np.ndarray]) -> ModelParams:
        """New model sharing this one's architecture, filled from a flat list in ``arrays()`` order."""
        it = iter(arrays)
        params = [{name: np.array(next(it)) for name in sorted(p)} for p in self.params]
        return ModelParams(list(self.layers), params, self.classifier_boundary, self.input_shape)

    def flatten(self) -> np.ndarray:
        arrays = self.arrays()
        return np.concatenate([a.ravel() for a in arrays]) if arrays else np.zeros(0)

    def astype(self, dtype) -> ModelParams:
        return self.with_arrays([a.astype(dtype) for a in self.arrays()])


def split(model: ModelParams) -> tuple[LayerStack, LayerStack]:
    """Views of the feature extractor and the classifier head."""
    b = model.classifier_boundary
    if not 0 <= b < len(model.layers):
        raise ConfigError(f"classifier_boundary {b} out of range")
    extractor = LayerStack(model.layers[:b], model.params[:b], model.input_shape, 0)
    classifier = LayerStack(model.layers[b:], model.params[b:], extractor.output_shape(), b)
    return extractor, classifier


class BoundModel:
    """A model wired into the autodiff graph.

    ``trainable=False`` binds parameters as constants, which is how the
    global teacher is frozen: no gradient can reach it.
    """

    def __init__(self, model: ModelParams, trainable: bool = True):
        self.model = model
        self.trainable = trainable
        self.tensors = [{k: Tensor(v, requires_grad=trainable) for k, v in p.items()} for p in model.params]
        self.extractor, self.classifier = split(model)

    def parameters(self) -> list[Tensor]:
        return [p[name] for p in self.tensors for name in sorted(p)]

    def extract(self, x) -> Tensor:
        b = self.model.classifier_boundary
        return self.extractor.apply(ag.as_tensor(x), self.tensors[:b])

    def classify(self, features: Tensor) -> Tensor:
        b = self.model.classifier_boundary
        return self.classifier.apply(features, self.tensors[b:])

    def __call__(self, x) -> tuple[Tensor, Tensor]:
        f = self.extract(x)
        return f, self.classify(f)


def forward(model: ModelParams, batch: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Evaluate ``model`` on ``batch``; returns (features, logits) as arrays."""
    batch = np.asarray(batch, dtype=model.dtype)
    features, logits = BoundModel(model, trainable=False)(batch)
    return features.data, logits.data


def init_params(layers: Sequence[LayerSpec], rng: np.random.Generator, dtype=np.float64) -> list[dict[str, np.ndarray]]:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for every weight and bias."""
    params = []
    for spec in layers:
        p = {}
        if spec.param_shapes():
            bound = 1.0 / math.sqrt(spec.fan_in())
            for name, shape in spec.param_shapes().items():
                p[name] = rng.uniform(-bound, bound, size=shape).astype(dtype)
        params.append(p)
    return params


def small_mlp(
    num_classes: int,
    in_dim: int = 784,
    hidden: int = 128,
    seed: int = 0,
    classifier_bias: bool = False,
    input_shape: tuple[int, ...] | None = None,
    dtype=np.float64,
) -> ModelParams:
    """flatten -> linear(in_dim, hidden) -> relu -> linear(hidden, C); classifier = last linear."""
    if input_shape is None:
        input_shape = (in_dim,)
    if int(np.prod(input_shape)) != in_dim:
        raise ConfigError(f"input_shape {input_shape} does not flatten to {in_dim}")
    layers = [
        LayerSpec.simple("flatten"),
        LayerSpec.linear(in_dim, hidden),
        LayerSpec.simple("relu"),
        LayerSpec.linear(hidden, num_classes, bias=classifier_bias),
    ]
    rng = np.random.default_rng(seed)
    return ModelParams(layers, init_params(layers, rng, dtype), 3, input_shape)


def small_cnn(
    num_classes: int,
    input_shape: tuple[int, int, int] = (1, 28, 28),
    hidden: int = 128,
    seed: int = 0,
    classifier_bias: bool = False,
    dtype=np.float64,
) -> ModelParams:
    c, h, w = input_shape
    convs = [
        LayerSpec.conv2d(c, 16, 5),
        LayerSpec.simple("relu"),
        LayerSpec.simple("maxpool2d"),
        LayerSpec.conv2d(16, 32, 5),
        LayerSpec.simple("relu"),
        LayerSpec.simple("maxpool2d"),
        LayerSpec.simple("flatten"),
    ]
    shape: tuple[int, ...] = tuple(input_shape)
    for i, spec in enumerate(convs):
        shape = spec.output_shape(shape, i)
    layers = convs + [
        LayerSpec.linear(shape[0], hidden),
        LayerSpec.simple("relu"),
        LayerSpec.linear(hidden, num_classes, bias=classifier_bias),
    ]
    rng = np.random.default_rng(seed)
    return ModelParams(layers, init_params(layers, rng, dtype), len(layers) - 1, input_shape)
