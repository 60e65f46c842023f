"""Slice-level capsule network: conv stack, primary capsules, two capsule layers."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional, Union

import numpy as np

from ..capsnet import CapsuleLayerSpec, capsule_layer, squash
from ..errors import DimensionError, UsageError
from ..numerics import DTYPE, BatchNormState, Tensor, batchnorm, conv2d, maxpool2d, relu

SUPPORTED_SIZES = (32, 64, 128, 256)
CONV_NAMES = ("conv1", "conv2", "conv3", "conv4")


@dataclass(frozen=True)
class SliceArchitecture:
    input_size: int = 256
    conv_channels: tuple = (32, 128, 256, 64)
    # 2x2/stride-2 cells tile the input: conv4 cell i sees exactly rows [32i, 32i+32)
    kernel_size: int = 2
    primary_dim: int = 8
    feature_capsules: int = 32
    feature_dim: int = 16
    class_capsules: int = 2
    class_dim: int = 16
    routing_iterations: int = 3

    def __post_init__(self):
        if self.input_size not in SUPPORTED_SIZES:
            raise UsageError(f"input size {self.input_size} not supported; use one of {SUPPORTED_SIZES}")
        if len(self.conv_channels) != 4 or min(self.conv_channels) < 1:
            raise UsageError(f"need four positive conv widths, got {self.conv_channels}")
        if self.kernel_size < 2:
            raise UsageError(f"kernel size must be >= 2, got {self.kernel_size}")
        if self.conv_channels[-1] % self.primary_dim:
            raise UsageError(
                f"last conv width {self.conv_channels[-1]} is not a multiple of primary capsule dim {self.primary_dim}"
            )

    @property
    def padding(self) -> int:
        # stride 2 halves any even input for k >= 2
        return (self.kernel_size - 1) // 2

    @property
    def grid(self) -> int:
        # four stride-2 convolutions plus one 2x2 pool
        return self.input_size // 32

    @property
    def primary_types(self) -> int:
        return self.conv_channels[-1] // self.primary_dim

    @property
    def primary_capsules(self) -> int:
        return self.grid * self.grid * self.primary_types

    @property
    def feature_spec(self) -> CapsuleLayerSpec:
        return CapsuleLayerSpec(
            self.primary_capsules,
            self.primary_dim,
            self.feature_capsules,
            self.feature_dim,
            self.routing_iterations,
            share_transform_spatially=True,
            capsule_types=self.primary_types,
        )

    @property
    def class_spec(self) -> CapsuleLayerSpec:
        return CapsuleLayerSpec(
            self.feature_capsules, self.feature_dim, self.class_capsules, self.class_dim, self.routing_iterations
        )

    def tensor_shapes(self) -> dict[str, tuple]:
        shapes = {}
        in_ch = 1
        k = self.kernel_size
        for name, out_ch in zip(CONV_NAMES, self.conv_channels):
            shapes[f"{name}.weight"] = (out_ch, in_ch, k, k)
            shapes[f"{name}.bias"] = (out_ch,)
            if name == "conv2":
                shapes["bn.gamma"] = (out_ch,)
                shapes["bn.beta"] = (out_ch,)
            in_ch = out_ch
        shapes["caps_feature.weight"] = self.feature_spec.weight_shape
        shapes["caps_class.weight"] = self.class_spec.weight_shape
        return shapes


@dataclass
class SliceModelParams:
    arch: SliceArchitecture
    tensors: dict = field(default_factory=dict)
    bn_state: BatchNormState = field(default_factory=BatchNormState)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def parameters(self) -> list[Tensor]:
        return [self.tensors[name] for name in self.arch.tensor_shapes()]

    @property
    def parameter_count(self) -> int:
        return int(sum(t.size for t in self.parameters()))

    def snapshot(self) -> "SliceModelParams":
        """Deep copy, trainable tensors included."""
        tensors = {k: Tensor(v.data, requires_grad=v.requires_grad) for k, v in self.tensors.items()}
        return SliceModelParams(self.arch, tensors, self.bn_state.copy())

    def frozen(self) -> "SliceModelParams":
        """Read-only view sharing the weight arrays; no gradients reach it."""
        tensors = {k: Tensor._wrap(v.data) for k, v in self.tensors.items()}
        return SliceModelParams(self.arch, tensors, self.bn_state)


def _xavier(rng: np.random.Generator, shape: tuple, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(DTYPE)


def build_slice_model(input_size: int = 256, seed: int = 0, arch: Optional[SliceArchitecture] = None) -> SliceModelParams:
    """Xavier-uniform initialised slice network for ``input_size`` square slices."""
    arch = SliceArchitecture(input_size=input_size) if arch is None else replace(arch, input_size=input_size)
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in arch.tensor_shapes().items():
        if name.endswith(".bias") or name == "bn.beta":
            data = np.zeros(shape, dtype=DTYPE)
        elif name == "bn.gamma":
            data = np.ones(shape, dtype=DTYPE)
        elif name.startswith("conv"):
            o, i, k, _ = shape
            data = _xavier(rng, shape, i * k * k, o * k * k)
        else:
            _, _, d_in, d_out = shape
            data = _xavier(rng, shape, d_in, d_out)
        tensors[name] = Tensor._wrap(data, requires_grad=True)
    c = arch.conv_channels[1]
    # usable in eval mode before training, like the usual framework defaults
    bn = BatchNormState(np.zeros(c, dtype=DTYPE), np.ones(c, dtype=DTYPE))
    return SliceModelParams(arch, tensors, bn)


def _as_batch(x: Union[Tensor, np.ndarray], size: int) -> tuple[Tensor, bool]:
    t = x if isinstance(x, Tensor) else Tensor(x)
    single = t.ndim in (2, 3)
    if t.ndim == 2:
        t = t.reshape(1, 1, *t.shape)
    elif t.ndim == 3:
        t = t.reshape(1, *t.shape)
    if t.ndim != 4 or t.shape[1] != 1 or t.shape[2:] != (size, size):
        raise DimensionError(f"slice model expects 1x{size}x{size} slices, got {tuple(x.shape)}")
    return t, single


def slice_forward(params: SliceModelParams, x, mode: str = "eval", return_conv: bool = False):
    """Run the slice network.

    ``x`` is one slice (``SxS`` or ``1xSxS``) or a batch ``Bx1xSxS``.
    Returns ``(class_capsules, feature_capsules)``: ``(2, 16)`` and ``(32, 16)``
    per slice.  With ``return_conv`` the last convolution's activation map is
    appended (used for Grad-CAM).
    """
    arch = params.arch
    t, single = _as_batch(x, arch.input_size)
    p = params.tensors
    pad = arch.padding

    h = relu(conv2d(t, p["conv1.weight"], p["conv1.bias"], 2, pad))
    h = conv2d(h, p["conv2.weight"], p["conv2.bias"], 2, pad)
    h = relu(batchnorm(h, p["bn.gamma"], p["bn.beta"], params.bn_state, mode))
    h, _ = maxpool2d(h, 2)
    h = relu(conv2d(h, p["conv3.weight"], p["conv3.bias"], 2, pad))
    conv = relu(conv2d(h, p["conv4.weight"], p["conv4.bias"], 2, pad))

    b = conv.shape[0]
    g, types, dim = arch.grid, arch.primary_types, arch.primary_dim
    primary = conv.reshape(b, types, dim, g, g).transpose(0, 3, 4, 1, 2).reshape(b, g * g * types, dim)
    primary = squash(primary)
    features = capsule_layer(primary, arch.feature_spec, p["caps_feature.weight"])
    classes = capsule_layer(features, arch.class_spec, p["caps_class.weight"])
    if single:
        classes = classes.reshape(classes.shape[1:])
        features = features.reshape(features.shape[1:])
    if return_conv:
        return classes, features, conv
    return classes, features
