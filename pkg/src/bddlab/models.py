"""Fully connected teacher and student networks."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import DimensionError, ParameterError, Tensor

CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class MLPSpec:
    """Layer widths from input to output; ReLU between layers, raw logits out."""

    layer_widths: tuple[int, ...]
    seed: int = 0

    def __post_init__(self):
        widths = tuple(int(w) for w in self.layer_widths)
        object.__setattr__(self, "layer_widths", widths)
        if len(widths) < 2:
            raise ParameterError(f"an MLP needs at least 2 widths, got {widths}")
        if any(w < 1 for w in widths):
            raise ParameterError(f"layer widths must be positive, got {widths}")

    @property
    def in_features(self) -> int:
        return self.layer_widths[0]

    @property
    def num_classes(self) -> int:
        return self.layer_widths[-1]


@dataclass
class ModelParams:
    weights: list[Tensor]
    biases: list[Tensor]

    def tensors(self) -> list[Tensor]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    @property
    def layer_widths(self) -> tuple[int, ...]:
        return (self.weights[0].shape[0],) + tuple(w.shape[1] for w in self.weights)

    def freeze(self) -> ModelParams:
        for t in self.tensors():
            t.requires_grad = False
            t.grad = None
        return self

    def copy(self, requires_grad: bool | None = None) -> ModelParams:
        def _c(t):
            rg = t.requires_grad if requires_grad is None else requires_grad
            return Tensor(t.data.copy(), requires_grad=rg)

        return ModelParams([_c(w) for w in self.weights], [_c(b) for b in self.biases])

    def equals(self, other: ModelParams) -> bool:
        a, b = self.tensors(), other.tensors()
        return len(a) == len(b) and all(x.shape == y.shape and np.array_equal(x.data, y.data) for x, y in zip(a, b))


def init_params(spec: MLPSpec) -> ModelParams:
    """Uniform(-s, s) weights with s = sqrt(6 / (fan_in + fan_out)); zero biases."""
    rng = np.random.default_rng(spec.seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(spec.layer_widths[:-1], spec.layer_widths[1:]):
        s = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(Tensor(rng.uniform(-s, s, size=(fan_in, fan_out)), requires_grad=True))
        biases.append(Tensor(np.zeros(fan_out), requires_grad=True))
    return ModelParams(weights, biases)


def forward_logits(params: ModelParams, x: Tensor) -> Tensor:
    x = ad.as_tensor(x)
    if x.ndim != 2 or x.shape[1] != params.weights[0].shape[0]:
        raise DimensionError(f"input {x.shape} does not match first layer width {params.weights[0].shape[0]}")
    h = x
    last = len(params.weights) - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        h = ad.affine(h, w, b)
        if i < last:
            h = ad.relu(h)
    return h


def forward_dense_logits(params: ModelParams, x: Tensor) -> Tensor:
    """Apply the classifier independently at each cell of [N, D, H, W] features -> [N, C, H, W]."""
    x = ad.as_tensor(x)
    if x.ndim != 4:
        raise DimensionError(f"dense input must be [N, D, H, W], got {x.shape}")
    n, d, h, w = x.shape
    cells = ad.reshape(ad.transpose(x, (0, 2, 3, 1)), (n * h * w, d))
    out = forward_logits(params, cells)
    c = out.shape[1]
    return ad.transpose(ad.reshape(out, (n, h, w, c)), (0, 3, 1, 2))


def count_params(spec: MLPSpec) -> int:
    w = spec.layer_widths
    return int(sum(a * b + b for a, b in zip(w[:-1], w[1:])))


def save_checkpoint(params: ModelParams, path: str | Path) -> Path:
    """Write an .npz holding format version, layer widths and raw float64 arrays."""
    path = Path(path)
    arrays = {"version": np.array(CHECKPOINT_VERSION), "widths": np.array(params.layer_widths, dtype=np.int64)}
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        arrays[f"W{i}"] = w.data
        arrays[f"b{i}"] = b.data
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)
    return path


def load_checkpoint(path: str | Path, requires_grad: bool = False) -> ModelParams:
    with np.load(Path(path)) as z:
        version = int(z["version"])
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        n = len(z["widths"]) - 1
        weights = [Tensor(z[f"W{i}"], requires_grad=requires_grad) for i in range(n)]
        biases = [Tensor(z[f"b{i}"], requires_grad=requires_grad) for i in range(n)]
    return ModelParams(weights, biases)

