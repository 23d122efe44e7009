"""Fast Walsh-Hadamard transform with orthonormal per-level scaling.

The transform matrix is the Sylvester recursion
    H_m = 1/sqrt(2) * [[H_{m-1}, H_{m-1}], [H_{m-1}, -H_{m-1}]],  H_0 = (1),
computed in n*log2(n) butterfly add/sub pairs, each level scaled by
1/sqrt(2). H_m is symmetric and orthonormal, so the transform is its own
inverse and its own adjoint — which makes the backward pass another
forward transform.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor
from .tensor import Tensor

_INV_SQRT2 = np.float32(1.0 / np.sqrt(2.0))


class TransformSizeError(ValueError):
    """Transform length is not a power of two."""


@dataclass(frozen=True)
class HadamardPlan:
    """Validated transform size n = 2^m."""

    n: int
    m: int

    @classmethod
    def for_length(cls, n: int) -> "HadamardPlan":
        if n < 1 or n & (n - 1):
            raise TransformSizeError(f"transform length {n} is not a power of two")
        return cls(n=n, m=n.bit_length() - 1)


def _fht_data(x: np.ndarray) -> np.ndarray:
    """Butterfly transform along the last axis of a [..., n] float32 array."""
    n = x.shape[-1]
    lead = x.shape[:-1]
    y = x.reshape(-1, n)
    rows = y.shape[0]
    if n == 1:
        return y.copy().reshape(*lead, n)
    h = 1
    while h < n:
        y = y.reshape(rows, n // (2 * h), 2, h)
        a = y[:, :, 0, :]
        b = y[:, :, 1, :]
        out = np.empty_like(y)
        np.add(a, b, out=out[:, :, 0, :])
        np.subtract(a, b, out=out[:, :, 1, :])
        out *= _INV_SQRT2
        y = out.reshape(rows, n)
        h *= 2
    return y.reshape(*lead, n)


def fht(x, plan: HadamardPlan | None = None) -> np.ndarray:
    """Orthonormal Walsh-Hadamard transform of a length-n vector."""
    arr = np.asarray(x, dtype=np.float32)
    if arr.ndim != 1:
        raise TransformSizeError(f"fht expects a vector, got shape {arr.shape}")
    if plan is None:
        plan = HadamardPlan.for_length(arr.shape[0])
    elif plan.n != arr.shape[0]:
        raise TransformSizeError(
            f"plan is for length {plan.n}, input has length {arr.shape[0]}")
    return _fht_data(arr)


def hadamard_matrix(m: int) -> np.ndarray:
    """Literal H_m built from the recursion; O(n^2) reference, test oracle."""
    h = np.array([[1.0]], dtype=np.float64)
    for _ in range(m):
        h = np.block([[h, h], [h, -h]]) / np.sqrt(2.0)
    return h


def fht_rows(x: Tensor) -> Tensor:
    """Transform applied independently to each row of [r, n]; differentiable.

    H is self-adjoint, so the gradient is fht_rows of the upstream gradient.
    """
    HadamardPlan.for_length(x.shape[-1])
    out = _fht_data(x.data)

    def bwd(g):
        return (_fht_data(g),)

    return tensor._finish(out, (x,), bwd)
