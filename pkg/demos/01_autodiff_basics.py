"""
Reverse-mode gradients on the tensor core
=========================================

A walk through the tape: build a tiny convolutional expression, run the
backward pass, then confirm the result against central differences.
"""

import numpy as np

from cascade_stereo import ops
from cascade_stereo.gradcheck import check_gradients
from cascade_stereo.tensor import Tensor, backward, storage_dtype

rng = np.random.default_rng(0)

# Tensors are channels-last. Leaves that need gradients say so explicitly.
image = Tensor(rng.standard_normal((6, 8, 3)), requires_grad=True)
kernel = Tensor(rng.standard_normal((3, 3, 3, 4)) * 0.3, requires_grad=True)
print("image", image, "kernel", kernel)

# Storage is float32 but every op computes in float64 internally.
features = ops.relu(ops.conv2d(image, kernel, stride=2))
print("strided conv + relu ->", features.shape)

# A scalar is needed to start the backward pass.
loss = ops.sum_all(features)
backward(loss)
print("loss", loss.item())
print("d loss / d kernel has shape", kernel.grad.shape, "and norm", np.linalg.norm(kernel.grad))

# The transposed convolution is the exact adjoint of the strided one, so it
# brings the half-resolution map back to any size that rounds down to it.
up = ops.transposed_conv2d(features, Tensor(rng.standard_normal((3, 3, 4, 2))), None, (6, 8))
print("transposed conv back to", up.shape)

# Finite differences in float64 agree with the tape to many digits.
with storage_dtype(np.float64):
    result = check_gradients(lambda x, k: ops.conv2d(x, k, stride=2),
                             [rng.standard_normal((5, 7, 2)), rng.standard_normal((3, 3, 2, 3))])
print("max relative error, strided conv:", f"{result.max_rel_error:.1e}")

# Max pooling works in ceil mode: a 5x7 map pools to 3x4.
pooled = ops.maxpool2x2(Tensor(rng.standard_normal((5, 7, 1))))
print("ceil-mode pooling 5x7 ->", pooled.shape[:2])
