"""Dense float32 tensors with reverse-mode automatic differentiation.

The engine is define-by-run: every differentiable operation appends one
entry to the active tape as it executes, so the tape is a topological
order of the graph by construction and a single reverse sweep propagates
every adjoint exactly once.

Tensors are immutable values once created.  The two sanctioned
exceptions are gradient accumulation on leaves and in-place parameter
updates by an optimizer.
"""

from __future__ import annotations

from contextlib import contextmanager
from typing import Callable, NamedTuple

import numpy as np

DTYPE = np.float32


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class TapeError(RuntimeError):
    """A backward pass was asked to start from a tensor the active tape does not hold."""


class _Entry(NamedTuple):
    inputs: tuple["Tensor", ...]
    backward: Callable[[np.ndarray], tuple]


class Tape:
    """Chronological record of differentiable operations.

    ``clear`` bumps an epoch counter; tensors remember the epoch they
    were recorded under, so a stale node from before the clear is
    detected instead of silently producing wrong gradients.
    """

    def __init__(self) -> None:
        self.entries: list[_Entry] = []
        self.epoch = 0

    def __len__(self) -> int:
        return len(self.entries)

    def record(self, inputs: tuple["Tensor", ...], backward: Callable) -> tuple[int, int]:
        self.entries.append(_Entry(inputs, backward))
        return (self.epoch, len(self.entries) - 1)

    def clear(self) -> None:
        """Drop every recorded operation and invalidate outstanding nodes."""
        self.entries.clear()
        self.epoch += 1


_TAPE = Tape()
_GRAD_ENABLED = True


def active_tape() -> Tape:
    return _TAPE


@contextmanager
def no_grad():
    """Suspend tape recording; forwards inside run as pure evaluation."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def _as_f32(data) -> np.ndarray:
    return np.ascontiguousarray(np.asarray(data, dtype=DTYPE))


class Tensor:
    """A float32 array plus the bookkeeping needed for backward."""

    __slots__ = ("data", "requires_grad", "grad", "node")

    def __init__(self, data, requires_grad: bool = False) -> None:
        self.data = _as_f32(data)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        # (tape epoch, entry index) when this tensor is an op output
        self.node: tuple[int, int] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def item(self) -> float:
        if self.size != 1:
            raise ShapeError(f"item: tensor has shape {self.shape}, expected a scalar")
        return float(self.data.reshape(()))

    def __float__(self) -> float:
        return self.item()

    # -- leaf gradient plumbing ------------------------------------------

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        """A copy that shares no graph history; bitwise-equal data."""
        return Tensor(self.data.copy())

    # -- op construction -------------------------------------------------

    def _make(self, data: np.ndarray, inputs: tuple["Tensor", ...], backward: Callable) -> "Tensor":
        out = Tensor(data)
        if _GRAD_ENABLED and any(t.requires_grad for t in inputs):
            out.requires_grad = True
            out.node = _TAPE.record(inputs, backward)
        return out

    def _binary(self, other, fwd, bwd_pair, bwd_scalar, name: str) -> "Tensor":
        if isinstance(other, Tensor):
            if self.shape != other.shape:
                raise ShapeError(f"{name}: shapes differ: {self.shape} vs {other.shape}")
            return self._make(fwd(self.data, other.data), (self, other), bwd_pair(self, other))
        s = float(other)
        return self._make(fwd(self.data, DTYPE(s)), (self,), bwd_scalar(s))

    def __add__(self, other) -> "Tensor":
        return self._binary(
            other,
            np.add,
            lambda a, b: lambda g: (g, g),
            lambda s: lambda g: (g,),
            "add",
        )

    __radd__ = __add__

    def __sub__(self, other) -> "Tensor":
        return self._binary(
            other,
            np.subtract,
            lambda a, b: lambda g: (g, -g),
            lambda s: lambda g: (g,),
            "sub",
        )

    def __rsub__(self, other) -> "Tensor":
        s = float(other)
        return self._make(DTYPE(s) - self.data, (self,), lambda g: (-g,))

    def __neg__(self) -> "Tensor":
        return self._make(-self.data, (self,), lambda g: (-g,))

    def __mul__(self, other) -> "Tensor":
        return self._binary(
            other,
            np.multiply,
            lambda a, b: lambda g: (g * b.data, g * a.data),
            lambda s: lambda g: (g * DTYPE(s),),
            "mul",
        )

    __rmul__ = __mul__

    def matmul(self, other: "Tensor") -> "Tensor":
        if not isinstance(other, Tensor):
            raise TypeError("matmul expects a Tensor")
        if self.ndim != 2 or other.ndim != 2:
            raise ShapeError(f"matmul: operands must be rank 2, got {self.shape} and {other.shape}")
        if self.shape[1] != other.shape[0]:
            raise ShapeError(f"matmul: inner dimensions differ: {self.shape} vs {other.shape}")

        def bwd(g):
            return (g @ other.data.T, self.data.T @ g)

        return self._make(self.data @ other.data, (self, other), bwd)

    __matmul__ = matmul

    def add_bias(self, bias: "Tensor") -> "Tensor":
        """Row-wise bias add for a [batch, n] tensor; bias gradient sums over rows."""
        if self.ndim != 2 or bias.ndim != 1 or self.shape[1] != bias.shape[0]:
            raise ShapeError(f"add_bias: shapes incompatible: {self.shape} vs {bias.shape}")

        def bwd(g):
            return (g, g.sum(axis=0))

        return self._make(self.data + bias.data[None, :], (self, bias), bwd)

    def relu(self) -> "Tensor":
        mask = self.data > 0

        def bwd(g):
            return (g * mask,)

        return self._make(np.where(mask, self.data, DTYPE(0)), (self,), bwd)

    def log(self) -> "Tensor":
        if (self.data <= 0).any():
            lo = float(self.data.min())
            raise ValueError(f"log: non-positive input (min value {lo}); clamp first")
        x = self.data

        def bwd(g):
            return (g / x,)

        return self._make(np.log(self.data), (self,), bwd)

    def exp(self) -> "Tensor":
        out_data = np.exp(self.data)

        def bwd(g):
            return (g * out_data,)

        return self._make(out_data, (self,), bwd)

    def clamp_min(self, lo: float) -> "Tensor":
        # pass-through gradient where the value survived the clamp
        mask = self.data >= lo

        def bwd(g):
            return (g * mask,)

        return self._make(np.maximum(self.data, DTYPE(lo)), (self,), bwd)

    def sum(self) -> "Tensor":
        shape = self.shape

        def bwd(g):
            return (np.full(shape, g, dtype=DTYPE),)

        return self._make(self.data.sum(), (self,), bwd)

    def mean(self) -> "Tensor":
        shape = self.shape
        inv = DTYPE(1.0 / self.size)

        def bwd(g):
            return (np.full(shape, g * inv, dtype=DTYPE),)

        return self._make(self.data.mean(dtype=DTYPE), (self,), bwd)

    def softmax(self, tau: float = 1.0) -> "Tensor":
        """Row-wise softmax of ``self / tau`` for a rank-2 tensor."""
        if self.ndim != 2:
            raise ShapeError(f"softmax: expected rank 2, got {self.shape}")
        if tau <= 0:
            raise ValueError(f"softmax: temperature must be positive, got {tau}")
        y = softmax_rows(self.data, tau)
        inv_tau = DTYPE(1.0 / tau)

        def bwd(g):
            dot = (g * y).sum(axis=1, keepdims=True)
            return ((g - dot) * y * inv_tau,)

        return self._make(y, (self,), bwd)

    def reshape(self, shape: tuple[int, ...]) -> "Tensor":
        old = self.shape
        new = self.data.reshape(shape)

        def bwd(g):
            return (g.reshape(old),)

        return self._make(new, (self,), bwd)

    def conv2d(self, weight: "Tensor", bias: "Tensor", kernel: int = 3) -> "Tensor":
        """Same-padded 2-D convolution over a [B, C, H, W] tensor.

        ``weight`` is stored matmul-ready as [C*kernel*kernel, F]; the
        window unrolling keeps the whole op a single tape entry.
        """
        if self.ndim != 4:
            raise ShapeError(f"conv2d: expected rank 4 input, got {self.shape}")
        b, c, h, w = self.shape
        if kernel % 2 != 1:
            raise ValueError("conv2d: kernel size must be odd")
        if weight.ndim != 2 or weight.shape[0] != c * kernel * kernel:
            raise ShapeError(
                f"conv2d: weight shape {weight.shape} does not match "
                f"{c}x{kernel}x{kernel} input windows"
            )
        f = weight.shape[1]
        if bias.shape != (f,):
            raise ShapeError(f"conv2d: bias shape {bias.shape} does not match {f} filters")

        pad = kernel // 2
        xp = np.pad(self.data, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
        # [B, H, W, C, k, k] view, flattened to one row per output pixel
        win = np.lib.stride_tricks.sliding_window_view(xp, (kernel, kernel), axis=(2, 3))
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(b * h * w, c * kernel * kernel)
        cols = np.ascontiguousarray(cols)
        out = cols @ weight.data + bias.data[None, :]
        out = out.reshape(b, h, w, f).transpose(0, 3, 1, 2)

        def bwd(g):
            g2 = np.ascontiguousarray(g.transpose(0, 2, 3, 1).reshape(b * h * w, f))
            dw = cols.T @ g2
            db = g2.sum(axis=0)
            dcols = (g2 @ weight.data.T).reshape(b, h, w, c, kernel, kernel)
            dxp = np.zeros_like(xp)
            for i in range(kernel):
                for j in range(kernel):
                    dxp[:, :, i:i + h, j:j + w] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            dx = dxp[:, :, pad:pad + h, pad:pad + w]
            return (np.ascontiguousarray(dx), dw, db)

        return self._make(np.ascontiguousarray(out), (self, weight, bias), bwd)

    def avgpool2(self) -> "Tensor":
        """2x2 mean pooling over a [B, C, H, W] tensor with even H and W."""
        if self.ndim != 4:
            raise ShapeError(f"avgpool2: expected rank 4 input, got {self.shape}")
        b, c, h, w = self.shape
        if h % 2 or w % 2:
            raise ShapeError(f"avgpool2: spatial dims must be even, got {self.shape}")
        out = self.data.reshape(b, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5), dtype=DTYPE)

        def bwd(g):
            up = np.repeat(np.repeat(g, 2, axis=2), 2, axis=3)
            return (up * DTYPE(0.25),)

        return self._make(out, (self,), bwd)

    def argmax_rows(self) -> np.ndarray:
        """Per-row argmax of a rank-2 tensor; ties resolve to the lowest index."""
        if self.ndim != 2:
            raise ShapeError(f"argmax_rows: expected rank 2, got {self.shape}")
        return np.argmax(self.data, axis=1)

    # -- backward --------------------------------------------------------

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into every requires_grad leaf.

        Repeated calls over the same tape keep accumulating, which is
        the basis of gradient summation across loss terms.
        """
        if self.size != 1:
            raise ShapeError(f"backward: loss must be a scalar, got shape {self.shape}")
        if self.node is None or self.node[0] != _TAPE.epoch:
            raise TapeError("backward: tensor is not on the active tape")

        entries = _TAPE.entries
        start = self.node[1]
        adjoints: list[np.ndarray | None] = [None] * (start + 1)
        adjoints[start] = np.ones_like(self.data)
        epoch = _TAPE.epoch

        for i in range(start, -1, -1):
            g = adjoints[i]
            if g is None:
                continue
            entry = entries[i]
            grads = entry.backward(g)
            for t, gi in zip(entry.inputs, grads):
                if gi is None:
                    continue
                if t.node is not None and t.node[0] == epoch:
                    j = t.node[1]
                    if adjoints[j] is None:
                        adjoints[j] = np.zeros_like(t.data)
                    adjoints[j] += gi
                elif t.requires_grad:
                    t._accumulate(gi)
            adjoints[i] = None


def backward(loss: Tensor) -> None:
    """Functional alias for ``loss.backward()``."""
    loss.backward()


def softmax_rows(z: np.ndarray, tau: float = 1.0) -> np.ndarray:
    """Numerically stable row softmax of ``z / tau`` in float32."""
    zt = np.asarray(z, dtype=DTYPE) * DTYPE(1.0 / tau)
    zt = zt - zt.max(axis=1, keepdims=True)
    e = np.exp(zt)
    return e / e.sum(axis=1, keepdims=True, dtype=DTYPE)
