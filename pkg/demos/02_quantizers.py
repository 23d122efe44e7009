#!/usr/bin/env python3
"""Ternary weights, low-bit activations, and the straight-through gradient.

Walks the exact arithmetic of both quantizers on tiny matrices, then shows
that backprop treats them as identity (STE) inside a live graph.
"""

import numpy as np

from bitexit import quant, tensor
from bitexit.quant import quantize_activations, ternary_quantize
from bitexit.tensor import ComputeGraph, Tensor


def main():
    w = np.array([[0.9, 0.1, -0.7]], dtype=np.float32)
    tw = ternary_quantize(w)
    print(f"weights          {w[0]}")
    print(f"alpha = mean|w|  {tw.alpha:.5f}   threshold 0.5*alpha = {0.5*tw.alpha:.5f}")
    print(f"codes            {tw.codes[0]}")
    print(f"dequantized      {tw.dequantize()[0].round(5)}")
    print()

    x = np.array([[1.0, -0.5], [0.7, -1.4]], dtype=np.float32)
    for bits in (8, 4):
        qa = quantize_activations(x, bits)
        print(f"{bits}-bit activations, per-token s = {qa.scale_per_token}:")
        for row, qrow in zip(x, qa.values):
            print(f"  {row} -> {qrow.round(5)}")
    print()

    # STE: the gradient of sum(x @ dequant(ternary(w))) w.r.t. w is exactly
    # the gradient with the quantizer replaced by identity: x^T @ ones
    xv = np.array([[1.0, 2.0], [3.0, -1.0]], dtype=np.float32)
    shadow = Tensor(np.array([[0.6, -0.2], [0.1, 0.9]], dtype=np.float32),
                    requires_grad=True)
    with ComputeGraph() as g:
        y = tensor.matmul(Tensor(xv), quant.ternary_forward(shadow))
        loss = tensor.sum_all(y)
    g.backward(loss)
    print("STE gradient through the weight quantizer:")
    print(shadow.grad)
    print("identity-rule prediction (x^T @ ones):")
    print(xv.T @ np.ones((2, 2), dtype=np.float32))


if __name__ == "__main__":
    main()
