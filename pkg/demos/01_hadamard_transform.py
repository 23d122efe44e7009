#!/usr/bin/env python3
"""The orthonormal fast Walsh-Hadamard transform, step by step.

Shows the literal recursive matrix, the O(n log n) butterfly agreement
with it, the involution/isometry properties, and what the rotation does
to a correlated activation batch (the "preconditioning" effect).
"""

import numpy as np

from bitexit.hadamard import fht, fht_rows, hadamard_matrix
from bitexit.tensor import Tensor


def main():
    print("H_1 from the recursion (1/sqrt(2) scaling per level):")
    print(hadamard_matrix(1))
    print()

    x = np.array([1.0, 0.0], dtype=np.float32)
    print(f"fht([1, 0])  = {fht(x)}        (= [1/sqrt2, 1/sqrt2])")
    x = np.array([1.0, -1.0], dtype=np.float32)
    print(f"fht([1, -1]) = {fht(x)}        (= [0, sqrt2])")
    print()

    rng = np.random.default_rng(0)
    for n in (8, 64, 1024):
        v = rng.normal(size=n).astype(np.float32)
        y = fht(v)
        roundtrip = np.abs(fht(y) - v).max()
        norm_drift = abs(np.linalg.norm(y) - np.linalg.norm(v))
        print(f"n={n:5d}: involution err {roundtrip:.2e}, "
              f"isometry drift {norm_drift:.2e}")
    print()

    n = 16
    H = hadamard_matrix(4)
    v = rng.normal(size=n).astype(np.float32)
    print(f"butterfly vs literal matrix (n={n}): "
          f"max err {np.abs(fht(v) - H @ v).max():.2e}")
    print()

    # the decorrelation story: one outlier column gets smeared across
    # the whole feature dimension, shrinking the per-token max
    batch = rng.normal(scale=0.1, size=(4, 64)).astype(np.float32)
    batch[:, 7] += 5.0  # a systematic outlier feature
    rotated = fht_rows(Tensor(batch)).data
    print("activation preconditioning on a batch with an outlier column:")
    print(f"  before: per-token max |x| = {np.abs(batch).max(axis=1).round(2)}")
    print(f"  after:  per-token max |x| = {np.abs(rotated).max(axis=1).round(2)}")
    print("  (smaller dynamic range -> friendlier per-token quantization grid)")


if __name__ == "__main__":
    main()
