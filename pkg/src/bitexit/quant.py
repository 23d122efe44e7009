"""Ternary weight quantization, low-bit activation quantization, and STE.

Weights: alpha = mean(|w|) over the whole matrix, codes in {-1, 0, +1} by
the 0.5*alpha threshold, dequantized value = code * alpha.

Activations (per token row, s = max(|x|)):
    8-bit: round(clip(x/s*127, -128, 127)) * s/127
    4-bit: round(clip(x/s*7,   -8,   7))   * s/7
Rounding is half-away-from-zero. Rows with s below 1e-8 map to zeros.

Both quantizers are treated as identity during backprop (straight-through
estimator): the upstream gradient passes unchanged, no scaling or clipping.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor
from .tensor import Tensor

ZERO_ROW_EPS = 1e-8

_QRANGE = {8: (127.0, -128.0, 127.0), 4: (7.0, -8.0, 7.0)}  # bits -> (q, lo, hi)


@dataclass
class TernaryWeights:
    codes: np.ndarray        # int8 matrix over {-1, 0, +1}
    alpha: np.float32        # per-tensor scale, mean(|w|)

    def dequantize(self) -> np.ndarray:
        """Float32 matrix of code * alpha, exact by construction."""
        return self.codes.astype(np.float32) * self.alpha


@dataclass
class QuantizedActivations:
    values: np.ndarray           # float64, already on the low-bit grid
    scale_per_token: np.ndarray  # float64 vector of per-row s
    bits: int

    def as_float32(self) -> np.ndarray:
        return self.values.astype(np.float32)


def round_half_away(x: np.ndarray) -> np.ndarray:
    """round() with .5 ties away from zero (numpy rounds ties to even)."""
    return np.trunc(x + np.copysign(0.5, x))


def ternary_quantize(w) -> TernaryWeights:
    data = w.data if isinstance(w, Tensor) else np.asarray(w, dtype=np.float32)
    if data.size == 0:
        raise ValueError("cannot quantize an empty matrix")
    alpha = np.float32(np.abs(data).mean(dtype=np.float64))
    codes = np.zeros(data.shape, dtype=np.int8)
    if alpha > 0:
        threshold = 0.5 * float(alpha)
        codes[data > threshold] = 1
        codes[data < -threshold] = -1
    return TernaryWeights(codes=codes, alpha=alpha)


def quantize_activations(x, bits: int) -> QuantizedActivations:
    if bits not in _QRANGE:
        raise ValueError(f"activation bits must be 4 or 8, got {bits}")
    data = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float32)
    if data.ndim != 2:
        raise tensor.DimensionError(
            f"quantize_activations expects [tokens, d], got {data.shape}")
    q, lo, hi = _QRANGE[bits]
    x64 = data.astype(np.float64)
    s = np.abs(x64).max(axis=1)
    live = s >= ZERO_ROW_EPS
    safe_s = np.where(live, s, 1.0)[:, None]
    scaled = np.clip(x64 / safe_s * q, lo, hi)
    values = round_half_away(scaled) * (safe_s / q)
    values[~live] = 0.0
    return QuantizedActivations(
        values=values, scale_per_token=np.where(live, s, 0.0), bits=bits)


def ste_gradient(upstream: Tensor) -> Tensor:
    """The straight-through rule: a quantizer backpropagates as identity."""
    return upstream


# ---------------------------------------------------------------------------
# graph-recorded forms used inside quantized layers


def ternary_forward(shadow_w: Tensor) -> Tensor:
    """Dequantized ternary view of full-precision shadow weights, STE backward."""
    tw = ternary_quantize(shadow_w)

    def bwd(g):
        return (ste_gradient_array(g),)

    return tensor._finish(tw.dequantize(), (shadow_w,), bwd)


def activation_forward(x: Tensor, bits: int) -> Tensor:
    """Per-token activation quantization as a graph node, STE backward."""
    qa = quantize_activations(x, bits)

    def bwd(g):
        return (ste_gradient_array(g),)

    return tensor._finish(qa.as_float32(), (x,), bwd)


def ste_gradient_array(upstream: np.ndarray) -> np.ndarray:
    return upstream
