"""
Overfitting one synthetic pair
==============================

The tiny profile trained with AdaGrad on a single constant-disparity scene.
Watch the loss fall and the end-point error go to zero, then save the
prediction as a 16-bit PNG plus a cost heatmap.

Takes well under a minute on one core.
"""

from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from cascade_stereo import data_io, metrics, net, training
from cascade_stereo.tensor import no_grad

out = Path(__file__).with_name("out")

raw = data_io.generate_synthetic_pair(32, 64, 16, scene="constant", texture_seed=0, value=5)
pair = data_io.StereoSample(data_io.normalize(raw.left), data_io.normalize(raw.right),
                            raw.gt_disparity, raw.valid_mask)

config = training.TrainConfig(batch_size=1, crop_height=32, crop_width=32, max_disparity=16,
                              profile="tiny", iterations=400, seed=7)


def progress(it, loss, weights):
    if it % 50:
        return False
    with no_grad():
        pred = net.full_forward(pair.left, pair.right, weights).disparity
    rep = metrics.report(pred, pair.gt_disparity, pair.valid_mask)
    print(f"iter {it:4d}  loss {loss:.4f}  EPE {rep.epe:.3f}px  >3px {100 * rep.err_gt3:.1f}%")
    return rep.epe < 1.0 and rep.err_gt3 == 0.0


with threadpool_limits(limits=1):
    result = training.train_loop([pair], config, callback=progress)

with no_grad():
    final = net.full_forward(pair.left, pair.right, result.weights)

data_io.save_disparity_png(final.disparity, out / "disparity.png")
data_io.save_cost_heatmap(final.final_cost.data.min(axis=-1), out / "min_cost.png")
print("predicted disparities:", np.unique(final.disparity[pair.valid_mask]))
print("wrote", out / "disparity.png", "and", out / "min_cost.png")
