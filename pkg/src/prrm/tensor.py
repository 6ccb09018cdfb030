"""Dense tensor value type and batch-norm layer state.

A Tensor wraps a C-contiguous numpy array of up to 4 dimensions plus an
optional gradient array of the same shape. Activations are (N, C, H, W),
convolution kernels (Cout, Cin, Kh, Kw), per-channel vectors (C,). The
payload dtype is float32; float64 is accepted as a shadow mode used only
for gradient checking.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidStateError, ShapeError

REAL = np.float32
SHADOW = np.float64

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


class Tensor:
    """Array value with shape, data and an optional grad slot."""

    __slots__ = ("data", "grad")

    def __init__(self, data: np.ndarray, grad: np.ndarray | None = None):
        data = np.ascontiguousarray(data)
        if data.dtype not in (REAL, SHADOW):
            data = data.astype(REAL)
        if data.ndim > 4:
            raise ShapeError(f"tensors are at most 4-D, got {data.ndim}-D")
        self.data = data
        if grad is not None and grad.shape != data.shape:
            raise ShapeError("grad shape must match data shape")
        self.grad = grad

    @classmethod
    def zeros(cls, shape, dtype=REAL) -> "Tensor":
        return cls(np.zeros(shape, dtype=dtype))

    @classmethod
    def ones(cls, shape, dtype=REAL) -> "Tensor":
        return cls(np.ones(shape, dtype=dtype))

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def copy(self) -> "Tensor":
        return Tensor(self.data.copy(), None if self.grad is None else self.grad.copy())

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data.astype(dtype))

    def ensure_grad(self) -> np.ndarray:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        return self.grad

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad[...] = 0

    def accumulate_grad(self, g: np.ndarray) -> None:
        if g.shape != self.data.shape:
            raise ShapeError(f"grad shape {g.shape} != data shape {self.data.shape}")
        self.ensure_grad()
        self.grad += g

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name})"


def check_finite(t: Tensor, what: str = "tensor") -> None:
    if not np.all(np.isfinite(t.data)):
        raise InvalidStateError(f"{what} contains non-finite values")


@dataclass
class BnState:
    """Per-channel batch-norm state: scale, shift and running statistics.

    eps and momentum are fixed constants; they are serialized with every
    checkpoint so downstream analyses are self-consistent.
    """

    gamma: np.ndarray
    beta: np.ndarray
    run_mean: np.ndarray
    run_var: np.ndarray
    eps: float = BN_EPS
    momentum: float = BN_MOMENTUM

    @classmethod
    def identity(cls, channels: int, dtype=REAL) -> "BnState":
        return cls(
            gamma=np.ones(channels, dtype=dtype),
            beta=np.zeros(channels, dtype=dtype),
            run_mean=np.zeros(channels, dtype=dtype),
            run_var=np.ones(channels, dtype=dtype),
        )

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]

    def validate(self) -> None:
        c = self.gamma.shape[0]
        for name in ("beta", "run_mean", "run_var"):
            v = getattr(self, name)
            if v.shape != (c,):
                raise ShapeError(f"BnState.{name} shape {v.shape} != ({c},)")
        if np.any(self.run_var < 0):
            raise InvalidStateError("BnState.run_var has negative entries")

    def copy(self) -> "BnState":
        return BnState(
            gamma=self.gamma.copy(),
            beta=self.beta.copy(),
            run_mean=self.run_mean.copy(),
            run_var=self.run_var.copy(),
            eps=self.eps,
            momentum=self.momentum,
        )
