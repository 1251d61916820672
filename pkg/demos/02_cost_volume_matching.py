"""
Cost volumes and winner-take-all
================================

Before any learning: stack left pixels next to shifted right pixels, score
each disparity with a plain absolute difference and pick the cheapest one.
"""

import numpy as np

from cascade_stereo import data_io, metrics, net
from cascade_stereo.tensor import Tensor

# A synthetic scene with two fronto-parallel planes and exact ground truth.
pair = data_io.generate_synthetic_pair(40, 96, 16, scene="two_plane", texture_seed=2)
print("disparities present:", np.unique(pair.gt_disparity))

# The concatenation volume holds left features next to right features
# shifted by every candidate disparity: (D+1, H, W, 2C).
volume = net.build_cost_volume_concat(Tensor(pair.left), Tensor(pair.right), 16).data
print("concat volume", volume.shape)

# Sum of absolute differences over colour channels as a hand-made cost.
left_part, right_part = volume[..., :3], volume[..., 3:]
sad = np.abs(left_part - right_part).sum(axis=-1)  # (D+1, H, W)
cost = np.moveaxis(sad, 0, -1)  # (H, W, D+1), as the network emits it

# WTA: argmin per pixel, ties go to the smaller disparity.
disparity = net.wta(cost)

rep = metrics.report(disparity, pair.gt_disparity, pair.valid_mask)
print(metrics.format_table({"SAD + WTA": rep}))

# The inner-product volume is what the matching network alone would use.
dot = net.build_cost_volume_dot(Tensor(pair.left), Tensor(pair.right), 16)
print("dot volume", dot.shape, "(negated, lower is better)")
