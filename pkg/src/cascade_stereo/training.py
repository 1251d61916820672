"""Loss, AdaGrad, random crop sampling and the training loop."""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, NamedTuple, Sequence

import numpy as np

from .data_io import StereoSample, save_checkpoint
from .net import ModelConfig, NetworkWeights, full_forward, init_weights
from .tensor import Tensor, backward, make_result

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.001
    batch_size: int = 8
    crop_height: int = 58
    crop_width: int = 58
    max_disparity: int = 128
    iterations: int = 400_000
    seed: int = 0
    adagrad_epsilon: float = 1e-8
    checkpoint_interval: int = 10_000
    profile: str = "paper"
    optimizer: str = field(default="adagrad", init=False)

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if self.crop_height < 16 or self.crop_width < 16:
            raise ValueError("crop height and width must be at least 16")
        if self.max_disparity < 1:
            raise ValueError("max_disparity must be at least 1")
        if self.iterations < 0 or self.checkpoint_interval < 1:
            raise ValueError("iterations must be >= 0 and checkpoint_interval >= 1")

    @property
    def model(self) -> ModelConfig:
        return ModelConfig(self.max_disparity, self.profile)

    def as_dict(self) -> dict:
        return asdict(self)


class Patch(NamedTuple):
    left: np.ndarray  # (H, W, 3)
    right: np.ndarray  # (H, W + D, 3)
    gt: np.ndarray  # (H, W)
    mask: np.ndarray  # (H, W) bool
    origin: tuple[int, int]  # (y0, x0) of the left crop


def crop_range(image_shape: tuple[int, int], config: TrainConfig) -> tuple[range, range]:
    """Valid left-crop origins ``(y0, x0)``; ``x0 >= D`` keeps the target crop inside the image."""
    h, w = image_shape
    ch, cw, d = config.crop_height, config.crop_width, config.max_disparity
    if h < ch or w < cw + d:
        raise ValueError(f"image {h}x{w} too small for a {ch}x{cw} crop with max disparity {d}")
    return range(0, h - ch + 1), range(d, w - cw + 1)


def sample_patch(sample: StereoSample, config: TrainConfig, rng: np.random.Generator) -> Patch:
    if sample.right.shape[:2] != sample.left.shape[:2]:
        raise ValueError("sample_patch expects left and right images of equal size")
    ys, xs = crop_range(sample.left.shape[:2], config)
    y0 = int(rng.integers(ys.start, ys.stop))
    x0 = int(rng.integers(xs.start, xs.stop))
    ch, cw, d = config.crop_height, config.crop_width, config.max_disparity
    rows = slice(y0, y0 + ch)
    gt = sample.gt_disparity[rows, x0:x0 + cw]
    mask = sample.valid_mask[rows, x0:x0 + cw] & (gt >= 0) & (gt <= d)
    return Patch(
        left=sample.left[rows, x0:x0 + cw],
        right=sample.right[rows, x0 - d:x0 + cw],
        gt=gt,
        mask=mask,
        origin=(y0, x0),
    )


class LossResult(NamedTuple):
    value: Tensor
    valid_pixels: int
    no_valid_pixels: bool


def loss_cross_entropy(final_cost: Tensor, gt: np.ndarray, mask: np.ndarray) -> LossResult:
    """Hard-label cross-entropy of ``softmax(-cost)`` against the rounded ground truth.

    ``final_cost`` is ``(H, W, D+1)`` or batched ``(B, H, W, D+1)``. With a batch,
    the loss is the mean of per-sample means; samples without valid pixels are
    skipped. With no valid pixel at all the loss is 0 and ``no_valid_pixels`` is set.
    """
    cost = final_cost.data.astype(np.float64)
    batched = cost.ndim == 4
    if not batched:
        cost, gt, mask = cost[None], np.asarray(gt)[None], np.asarray(mask)[None]
    levels = cost.shape[-1]
    labels = np.rint(np.where(np.isfinite(gt), gt, -1)).astype(np.int64)
    valid = np.asarray(mask, dtype=bool) & (labels >= 0) & (labels < levels)
    per_sample = valid.reshape(len(valid), -1).sum(axis=1)
    used = per_sample > 0
    n_used = int(used.sum())
    if n_used == 0:
        warnings.warn("cross-entropy loss has no valid pixels", RuntimeWarning, stacklevel=2)
        zero = make_result(np.zeros(1), (final_cost,), lambda g: (np.zeros(final_cost.shape),))
        return LossResult(zero, 0, True)

    logits = -cost
    shifted = logits - logits.max(axis=-1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    log_p = shifted - log_z
    safe = np.where(valid, labels, 0)
    picked = np.take_along_axis(log_p, safe[..., None], axis=-1)[..., 0]
    weight = valid / (np.maximum(per_sample, 1) * n_used)[:, None, None]
    loss = -(picked * weight).sum()

    def backward_fn(g):
        onehot = np.zeros_like(log_p)
        np.put_along_axis(onehot, safe[..., None], 1.0, axis=-1)
        # loss = -sum(w * log_p[label]) with logits = -cost
        grad = (onehot - np.exp(log_p)) * weight[..., None] * g.reshape(())
        return (grad if batched else grad[0],)

    return LossResult(make_result(np.array([loss]), (final_cost,), backward_fn), int(valid.sum()), False)


@dataclass
class OptimizerState:
    """Per-parameter running sums of squared gradients."""

    accumulators: dict[str, np.ndarray] = field(default_factory=dict)
    steps: int = 0


def adagrad_step(
    weights: NetworkWeights | Sequence[tuple[str, Tensor]],
    state: OptimizerState,
    lr: float = 0.001,
    eps: float = 1e-8,
) -> OptimizerState:
    """``acc += g**2; w -= lr * g / (sqrt(acc) + eps)`` for every parameter with a gradient."""
    params = weights.parameters() if isinstance(weights, NetworkWeights) else weights
    for name, p in params:
        if p.grad is None:
            continue
        g = p.grad.astype(np.float64)
        acc = state.accumulators.get(name)
        if acc is None:
            acc = np.zeros(p.shape)
        acc = acc + g * g
        state.accumulators[name] = acc
        p.data = (p.data.astype(np.float64) - lr * g / (np.sqrt(acc) + eps)).astype(p.data.dtype)
    state.steps += 1
    return state


class NumericalAbort(RuntimeError):
    """Training produced a non-finite value."""

    def __init__(self, iteration: int, where: str):
        super().__init__(f"non-finite value at iteration {iteration}; first affected layer: {where}")
        self.iteration = iteration
        self.where = where


def _first_nonfinite(trace: dict[str, Tensor]) -> str | None:
    for name, t in trace.items():
        if not np.all(np.isfinite(t.data)):
            return name
    return None


def stack_patches(patches: Sequence[Patch]) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    return (
        np.stack([p.left for p in patches]),
        np.stack([p.right for p in patches]),
        np.stack([p.gt for p in patches]),
        np.stack([p.mask for p in patches]),
    )


def train_step(
    weights: NetworkWeights,
    state: OptimizerState,
    left: np.ndarray,
    right: np.ndarray,
    gt: np.ndarray,
    mask: np.ndarray,
    config: TrainConfig,
    iteration: int = 0,
) -> float:
    """One forward/backward/AdaGrad update on a batch; returns the loss."""
    trace: dict[str, Tensor] = {}
    result = full_forward(Tensor(left), Tensor(right), weights, training=True, trace=trace)
    loss = loss_cross_entropy(result.final_cost, gt, mask)
    value = loss.value.item()
    if not math.isfinite(value):
        raise NumericalAbort(iteration, _first_nonfinite(trace) or "loss")
    weights.zero_grad()
    backward(loss.value)
    for name, p in weights.parameters():
        if p.grad is not None and not np.all(np.isfinite(p.grad)):
            raise NumericalAbort(iteration, name.split(".")[0])
    adagrad_step(weights, state, config.learning_rate, config.adagrad_epsilon)
    return value


@dataclass
class TrainResult:
    weights: NetworkWeights
    state: OptimizerState
    losses: list[float]
    checkpoints: list[Path]


def train_loop(
    dataset: Sequence[StereoSample],
    config: TrainConfig,
    weights: NetworkWeights | None = None,
    log_path: str | Path | None = None,
    checkpoint_dir: str | Path | None = None,
    callback: Callable[[int, float, NetworkWeights], bool | None] | None = None,
) -> TrainResult:
    """Train on random crops of ``dataset``.

    Each iteration draws ``batch_size`` samples and crops, averages the
    per-patch losses, back-propagates and takes one AdaGrad step. The loss is
    appended to ``log_path`` as ``iter<TAB>loss``; a checkpoint is written every
    ``checkpoint_interval`` iterations and after the last one. ``callback``
    returning True stops training early.
    """
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    rng = np.random.default_rng(config.seed)
    if weights is None:
        weights = init_weights(config.model, rng)
    state = OptimizerState()
    losses: list[float] = []
    checkpoints: list[Path] = []
    log = open(log_path, "a", encoding="utf-8") if log_path is not None else None
    ckpt_dir = Path(checkpoint_dir) if checkpoint_dir is not None else None

    def checkpoint(it: int) -> None:
        if ckpt_dir is None:
            return
        ckpt_dir.mkdir(parents=True, exist_ok=True)
        path = ckpt_dir / f"checkpoint_{it:07d}.csmd"
        save_checkpoint(weights, path)
        checkpoints.append(path)

    try:
        for it in range(1, config.iterations + 1):
            picks = rng.integers(0, len(dataset), size=config.batch_size)
            patches = [sample_patch(dataset[int(i)], config, rng) for i in picks]
            value = train_step(weights, state, *stack_patches(patches), config, it)
            losses.append(value)
            if log is not None:
                log.write(f"{it}\t{value!r}\n")
                log.flush()
            logger.debug("iter %d loss %.6f", it, value)
            if it % config.checkpoint_interval == 0:
                checkpoint(it)
            if callback is not None and callback(it, value, weights):
                break
        if losses and (not checkpoints or not checkpoints[-1].name.endswith(f"{len(losses):07d}.csmd")):
            checkpoint(len(losses))
    finally:
        if log is not None:
            log.close()
    return TrainResult(weights, state, losses, checkpoints)
