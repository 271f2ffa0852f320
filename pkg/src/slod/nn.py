"""SmallCNN model definition and parameter handling."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from . import tensor as T
from .errors import ShapeError, UsageError
from .tensor import Tensor


@dataclass(frozen=True)
class ModelSpec:
    input_channels: int = 1
    input_side: int = 28
    num_classes: int = 10
    conv_widths: tuple = (16, 32)
    fc_width: int = 128

    def __post_init__(self):
        object.__setattr__(self, "conv_widths", tuple(int(w) for w in self.conv_widths))
        if self.num_classes < 2:
            raise UsageError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.input_channels not in (1, 3):
            raise UsageError(f"input_channels must be 1 or 3, got {self.input_channels}")
        if len(self.conv_widths) != 2:
            raise UsageError("SmallCNN has exactly two conv layers")
        if self.input_side % 4:
            raise UsageError(f"input_side must be divisible by 4, got {self.input_side}")

    @property
    def flat_features(self) -> int:
        return self.conv_widths[1] * (self.input_side // 4) ** 2

    def layer_shapes(self) -> list[tuple[str, tuple]]:
        c, (f1, f2), h, k = self.input_channels, self.conv_widths, self.fc_width, self.num_classes
        return [
            ("conv1.weight", (f1, c, 3, 3)),
            ("conv1.bias", (f1,)),
            ("conv2.weight", (f2, f1, 3, 3)),
            ("conv2.bias", (f2,)),
            ("fc1.weight", (self.flat_features, h)),
            ("fc1.bias", (h,)),
            ("fc2.weight", (h, k)),
            ("fc2.bias", (k,)),
        ]

    def to_dict(self) -> dict:
        return {
            "input_channels": self.input_channels,
            "input_side": self.input_side,
            "num_classes": self.num_classes,
            "conv_widths": list(self.conv_widths),
            "fc_width": self.fc_width,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        return cls(**{**d, "conv_widths": tuple(d["conv_widths"])})


@dataclass
class Parameters:
    """Ordered, uniquely named parameter tensors."""

    tensors: dict[str, Tensor] = field(default_factory=dict)

    def __iter__(self) -> Iterator[tuple[str, Tensor]]:
        return iter(self.tensors.items())

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __len__(self) -> int:
        return len(self.tensors)

    def names(self) -> list[str]:
        return list(self.tensors)

    def count(self) -> int:
        return sum(t.size for t in self.tensors.values())

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: t.data for k, t in self.tensors.items()}

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.zero_grad()

    def detached(self) -> "Parameters":
        return Parameters({k: Tensor(t.data) for k, t in self.tensors.items()})

    def trainable_copy(self) -> "Parameters":
        return Parameters({k: Tensor(t.data.copy(), requires_grad=True) for k, t in self.tensors.items()})

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray], requires_grad: bool = True) -> "Parameters":
        return cls({k: Tensor(np.asarray(v), requires_grad=requires_grad) for k, v in arrays.items()})


def parameter_count(spec: ModelSpec) -> int:
    return sum(int(np.prod(shape)) for _, shape in spec.layer_shapes())


GAIN2 = 1.0 / 3.0


def init_model(spec: ModelSpec, seed: int) -> Parameters:
    """Kaiming-uniform fan-in weights, zero biases.

    Every layer uses gain^2 = 1/3, i.e. bound 1/sqrt(fan_in).
    """
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in spec.layer_shapes():
        if name.endswith(".bias"):
            arr = np.zeros(shape, dtype=np.float32)
        else:
            fan_in = int(np.prod(shape[1:])) if len(shape) == 4 else shape[0]
            bound = np.sqrt(3.0 * GAIN2 / fan_in)
            arr = rng.uniform(-bound, bound, size=shape).astype(np.float32)
        tensors[name] = Tensor(arr, requires_grad=True)
    return Parameters(tensors)


def forward(params: Parameters, spec: ModelSpec, batch) -> Tensor:
    """conv-relu-pool, conv-relu-pool, flatten, fc-relu, fc -> N x K logits."""
    x = batch if isinstance(batch, Tensor) else Tensor(batch)
    expected = (spec.input_channels, spec.input_side, spec.input_side)
    if x.data.ndim != 4 or tuple(x.shape[1:]) != expected:
        raise ShapeError(f"batch shape {x.shape} does not match model input (N, {expected[0]}, {expected[1]}, {expected[2]})")
    p = params.tensors
    h = T.max_pool2(T.relu(T.conv2d(x, p["conv1.weight"], p["conv1.bias"])))
    h = T.max_pool2(T.relu(T.conv2d(h, p["conv2.weight"], p["conv2.bias"])))
    h = T.relu(T.flatten(h) @ p["fc1.weight"] + p["fc1.bias"])
    return h @ p["fc2.weight"] + p["fc2.bias"]


def predict_logits(params: Parameters, spec: ModelSpec, images: np.ndarray, batch_size: int = 500) -> np.ndarray:
    """Graph-free batched forward pass."""
    frozen = params.detached()
    out = [forward(frozen, spec, images[i:i + batch_size]).data for i in range(0, len(images), batch_size)]
    if not out:
        return np.zeros((0, spec.num_classes), dtype=np.float32)
    return np.concatenate(out)
