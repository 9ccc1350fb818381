"""
The differentiable engine: kernels and gradient checks
======================================================

Every layer the severity networks use lives in ``oaknet.tensor`` as a pure
forward/backward pair.  This script runs a convolution, checks its output
shape against the published layer arithmetic, and verifies the backward
pass with central finite differences.
"""

import numpy as np

from oaknet import tensor as T
from oaknet.gradsuite import run_suite
from oaknet.metrics import grad_check

# A 200x300 knee crop through the first grading layer: 32 kernels of 11x11
# at stride 2 with "same" padding halve each spatial extent.
rng = np.random.default_rng(0)
x = rng.normal(size=(1, 1, 200, 300)).astype(np.float32)
w = rng.normal(scale=0.05, size=(32, 1, 11, 11)).astype(np.float32)
y, _ = T.conv2d_forward(x, w, np.zeros(32, np.float32), stride=2, padding="same")
print(f"conv 11x11/2 on 1x1x200x300 -> {y.shape}")

# Max pooling 3x3 at stride 2 is always "valid": floor((n - 3) / 2) + 1.
p, _ = T.maxpool2d_forward(y, (3, 3), 2)
print(f"maxpool 3x3/2 -> {p.shape}")

# A gradient check scalarises the kernel through a fixed random functional
# and compares the analytic input gradient against central differences.
x64 = rng.normal(size=(2, 2, 6, 7))
w64 = rng.normal(size=(3, 2, 3, 3))
b64 = rng.normal(size=3)
out, _ = T.conv2d_forward(x64, w64, b64, stride=2, padding="same")
r = rng.normal(size=out.shape)


def through_conv(v):
    yy, cache = T.conv2d_forward(v, w64, b64, stride=2, padding="same")
    dx, _, _ = T.conv2d_backward(r, cache)
    return float((yy * r).sum()), dx


result = grad_check(through_conv, x64)
print(f"conv2d input gradient: max relative error {result.max_rel_error:.2e}")

# The full suite covers every differentiable operation at both precisions.
print("\nfull gradient suite (3 seeds per op for the demo):")
for name, dtype, worst, tol, ok in run_suite(seeds=3):
    print(f"  {name:14s} {dtype:8s} {worst:.2e}  {'ok' if ok else 'FAIL'}")
