"""
Layer-by-layer shapes at the training crop size
===============================================

A 58x58 crop does not divide by 8, yet the stems pool three times. Ceil-mode
pooling and target-sized transposed convolutions keep every skip connection
aligned. This prints each recorded layer with its output shape.
"""

import numpy as np

from cascade_stereo import conformance, net
from cascade_stereo.tensor import no_grad

config = net.ModelConfig(max_disparity=128, profile="paper")
weights = net.init_weights(config, seed=0)
rng = np.random.default_rng(0)

trace = conformance.ShapeRecorder()  # keeps shapes only, so memory stays low
with no_grad():
    net.full_forward(rng.standard_normal((58, 58, 3)), rng.standard_normal((58, 58, 3)), weights, trace=trace)

shapes = conformance.traced_layer_shapes(trace)
shapes["conv_2"] = conformance.traced_layer_shapes(trace, branch="right")["conv_2"]
expected = conformance.expected_output_shapes(58, 58, config)

for name, shape in shapes.items():
    mark = "" if name not in expected else ("ok" if expected[name] == shape else f"expected {expected[name]}")
    print(f"{name:22s} {str(shape):24s} {mark}")

print("mismatches:", conformance.compare_shapes(shapes, expected) or "none")
