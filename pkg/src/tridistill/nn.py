"""Width-parameterized classifier networks over the autodiff engine.

Two families are provided: a plain MLP over flat feature vectors and a
tiny two-stage convolutional net for small image grids.  Every hidden
width scales by a single multiplier, which is how the same blueprint
yields the compact and the generous variants of a model.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np

from .tensor import DTYPE, ShapeError, Tensor

KINDS = ("mlp", "tiny_cnn")
_CONV_KERNEL = 3


@dataclass(frozen=True)
class ArchitectureSpec:
    """Blueprint for a network: family, shapes, and the width multiplier.

    ``input_dims`` is ``(features,)`` for an MLP and ``(channels,
    height, width)`` for the tiny CNN; the CNN pools twice, so height
    and width must be divisible by four.
    """

    kind: str
    input_dims: tuple[int, ...]
    num_classes: int
    base_widths: tuple[int, ...]
    width_multiplier: float = 1.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown architecture kind {self.kind!r}, expected one of {KINDS}")
        object.__setattr__(self, "input_dims", tuple(int(d) for d in self.input_dims))
        object.__setattr__(self, "base_widths", tuple(int(w) for w in self.base_widths))
        if any(d <= 0 for d in self.input_dims):
            raise ValueError(f"input dims must be positive, got {self.input_dims}")
        if self.num_classes < 2:
            raise ValueError(f"need at least 2 classes, got {self.num_classes}")
        if not self.base_widths or any(w <= 0 for w in self.base_widths):
            raise ValueError(f"base widths must be positive, got {self.base_widths}")
        if self.width_multiplier <= 0:
            raise ValueError(f"width multiplier must be positive, got {self.width_multiplier}")
        if self.kind == "mlp":
            if len(self.input_dims) != 1:
                raise ValueError(f"mlp expects input_dims (features,), got {self.input_dims}")
        else:
            if len(self.input_dims) != 3:
                raise ValueError(f"tiny_cnn expects input_dims (C, H, W), got {self.input_dims}")
            if len(self.base_widths) != 2:
                raise ValueError(f"tiny_cnn expects two channel widths, got {self.base_widths}")
            _, h, w = self.input_dims
            if h % 4 or w % 4:
                raise ValueError(f"tiny_cnn spatial dims must be divisible by 4, got {h}x{w}")

    def layer_widths(self) -> tuple[int, ...]:
        """Base widths scaled by the multiplier, rounded, floor of one unit."""
        return tuple(max(1, int(math.floor(w * self.width_multiplier + 0.5)))
                     for w in self.base_widths)

    def input_size(self) -> int:
        return int(np.prod(self.input_dims))


@dataclass
class Network:
    spec: ArchitectureSpec
    params: dict[str, Tensor] = field(repr=False)
    seed: int = 0


def _param_shapes(spec: ArchitectureSpec) -> list[tuple[str, tuple[int, ...]]]:
    widths = spec.layer_widths()
    shapes: list[tuple[str, tuple[int, ...]]] = []
    if spec.kind == "mlp":
        dims = (spec.input_size(), *widths, spec.num_classes)
        for i in range(len(dims) - 1):
            shapes.append((f"layer{i}.weight", (dims[i], dims[i + 1])))
            shapes.append((f"layer{i}.bias", (dims[i + 1],)))
    else:
        c, h, w = spec.input_dims
        c1, c2 = widths
        k2 = _CONV_KERNEL * _CONV_KERNEL
        shapes.append(("conv0.weight", (c * k2, c1)))
        shapes.append(("conv0.bias", (c1,)))
        shapes.append(("conv1.weight", (c1 * k2, c2)))
        shapes.append(("conv1.bias", (c2,)))
        flat = c2 * (h // 4) * (w // 4)
        shapes.append(("head.weight", (flat, spec.num_classes)))
        shapes.append(("head.bias", (spec.num_classes,)))
    return shapes


def init(spec: ArchitectureSpec, seed: int) -> Network:
    """He-uniform fan-in weights, zero biases, deterministic in the seed."""
    rng = np.random.default_rng(seed)
    params: dict[str, Tensor] = {}
    for name, shape in _param_shapes(spec):
        if name.endswith(".bias"):
            data = np.zeros(shape, dtype=DTYPE)
        else:
            fan_in = shape[0]
            bound = math.sqrt(6.0 / fan_in)
            data = rng.uniform(-bound, bound, size=shape).astype(DTYPE)
        params[name] = Tensor(data, requires_grad=True)
    return Network(spec=spec, params=params, seed=seed)


def forward(net: Network, batch: Tensor) -> Tensor:
    """Logits for a [batch, features] input; features must match the architecture."""
    spec = net.spec
    if batch.ndim != 2 or batch.shape[1] != spec.input_size():
        raise ShapeError(
            f"forward: batch shape {batch.shape} does not match "
            f"input size {spec.input_size()} of {spec.kind}"
        )
    p = net.params
    if spec.kind == "mlp":
        x = batch
        n_hidden = len(spec.base_widths)
        for i in range(n_hidden):
            x = x.matmul(p[f"layer{i}.weight"]).add_bias(p[f"layer{i}.bias"]).relu()
        return x.matmul(p[f"layer{n_hidden}.weight"]).add_bias(p[f"layer{n_hidden}.bias"])

    c, h, w = spec.input_dims
    b = batch.shape[0]
    flat = spec.layer_widths()[1] * (h // 4) * (w // 4)
    x = batch.reshape((b, c, h, w))
    x = x.conv2d(p["conv0.weight"], p["conv0.bias"], _CONV_KERNEL).relu().avgpool2()
    x = x.conv2d(p["conv1.weight"], p["conv1.bias"], _CONV_KERNEL).relu().avgpool2()
    x = x.reshape((b, flat))
    return x.matmul(p["head.weight"]).add_bias(p["head.bias"])


def tempered_softmax(logits: Tensor, tau: float) -> Tensor:
    """Class probabilities from logits softened by temperature ``tau``."""
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    return logits.softmax(tau)


def parameter_count(spec: ArchitectureSpec) -> int:
    return sum(int(np.prod(shape)) for _, shape in _param_shapes(spec))


def freeze(net: Network) -> Network:
    """Mark every parameter as non-trainable; returns the same network."""
    for t in net.params.values():
        t.requires_grad = False
    return net


def clone(net: Network) -> Network:
    """Deep copy with bitwise-equal parameters and no shared storage."""
    params = {
        name: Tensor(t.data.copy(), requires_grad=t.requires_grad)
        for name, t in net.params.items()
    }
    return Network(spec=net.spec, params=params, seed=net.seed)


def params_digest(net: Network) -> str:
    """SHA-256 over parameter names, shapes, and raw bytes, in order."""
    h = hashlib.sha256()
    for name, t in net.params.items():
        h.update(name.encode())
        h.update(str(t.shape).encode())
        h.update(np.ascontiguousarray(t.data).tobytes())
    return h.hexdigest()
