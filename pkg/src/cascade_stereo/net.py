"""Cascaded multi-scale / multi-dimension stereo network.

Two weight-shared encoder-decoder stems (A: two poolings, B: three) produce
unary features for each image. A 1x1 layer fuses them, the fused features form
a concatenation cost volume over ``max_disparity + 1`` levels, a 3D hourglass
regularizes it, and a 2D hourglass conditioned on left features produces the
final ``H x W x (D + 1)`` cost. Disparity is the per-pixel argmin.

Arrays are channels-last; every forward accepts an optional leading batch axis.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from . import ops
from .ops import ConvSpec
from .tensor import ShapeError, Tensor, make_result

PROFILES = ("paper", "tiny")
# He std multiplier for the layer that emits the final cost; a large random
# cost at init swamps the WTA margin that training has to build.
OUTPUT_INIT_SCALE = 0.1


@dataclass(frozen=True)
class ModelConfig:
    """Network hyper-parameters. ``tiny`` quarters every channel count."""

    max_disparity: int = 128
    profile: str = "paper"

    def __post_init__(self):
        if self.max_disparity < 1:
            raise ValueError("max_disparity must be at least 1")
        if self.profile not in PROFILES:
            raise ValueError(f"unknown profile {self.profile!r}; expected one of {PROFILES}")

    @property
    def levels(self) -> int:
        return self.max_disparity + 1

    @property
    def _div(self) -> int:
        return 4 if self.profile == "tiny" else 1

    @property
    def stem_channels(self) -> int:
        return 32 // self._div

    @property
    def fusion_channels(self) -> int:
        return 32 // self._div

    @property
    def agg_channels(self) -> tuple[int, int, int]:
        """Channel widths of the three hourglass resolutions (full, 1/2, 1/4)."""
        return (16 // self._div, 32 // self._div, 64 // self._div)


@dataclass(frozen=True)
class LayerDef:
    name: str
    kind: str  # conv2d | conv3d | upconv2d | upconv3d | pool
    spec: ConvSpec | None = None
    bn_relu: bool = True


def _conv(name, k, s, cin, cout, nd=2, bn_relu=True) -> LayerDef:
    spec = ConvSpec((k,) * nd, (s,) * nd, cin, cout)
    kind = ("up" if s == 2 and name.startswith("up") else "") + ("conv3d" if nd == 3 else "conv2d")
    return LayerDef(name, kind, spec, bn_relu)


def architecture(config: ModelConfig) -> list[LayerDef]:
    """Ordered layer table; names and I/O channels follow the reference tables.

    The last encoder convolution of each stem and the final layer of every
    sub-network are linear (no batch norm, no ReLU).
    """
    c = config.stem_channels
    f = config.fusion_channels
    c1, c2, c3 = config.agg_channels
    levels = config.levels
    pool = lambda name: LayerDef(name, "pool", None, False)  # noqa: E731

    stem_a = [
        _conv("conv_a1", 3, 1, 3, c), _conv("conv_a2", 3, 1, c, c), pool("pool_a1"),
        _conv("conv_a3", 3, 1, c, c), _conv("conv_a4", 3, 1, c, c), pool("pool_a2"),
        _conv("conv_a5", 3, 1, c, c), _conv("conv_a6", 3, 1, c, c),
        _conv("conv_a7", 3, 1, c, c, bn_relu=False),
        _conv("upconv_a1", 3, 2, c, c),
        _conv("upconv_a2", 3, 2, 2 * c, c, bn_relu=False),
    ]
    stem_b = [
        _conv("conv_b1", 3, 1, 3, c), _conv("conv_b2", 3, 1, c, c), pool("pool_b1"),
        _conv("conv_b3", 3, 1, c, c), _conv("conv_b4", 3, 1, c, c), pool("pool_b2"),
        _conv("conv_b5", 3, 1, c, c), _conv("conv_b6", 3, 1, c, c), pool("pool_b3"),
        _conv("conv_b7", 3, 1, c, c), _conv("conv_b8", 3, 1, c, c),
        _conv("conv_b9", 3, 1, c, c, bn_relu=False),
        _conv("upconv_b1", 3, 2, c, c),
        _conv("upconv_b2", 3, 2, 2 * c, c),
        _conv("upconv_b3", 3, 2, 2 * c, c, bn_relu=False),
    ]
    fusion = [
        _conv("conv_1", 1, 1, 2 * c, f, bn_relu=False),
        _conv("conv_2", 1, 1, 2 * c, f, bn_relu=False),
    ]
    agg3d = [
        _conv("conv3d_1", 3, 1, 2 * f, c1, 3), _conv("conv3d_2", 3, 1, c1, c1, 3),
        _conv("conv3d_3", 3, 2, c1, c2, 3), _conv("conv3d_4", 3, 1, c2, c2, 3),
        _conv("conv3d_5", 3, 1, c2, c2, 3), _conv("conv3d_6", 3, 2, c2, c3, 3),
        _conv("conv3d_7", 3, 1, c3, c3, 3), _conv("conv3d_8", 3, 1, c3, c3, 3),
        _conv("upconv3d_1", 3, 2, c3, c2, 3), _conv("conv3d_9", 3, 1, c2, c2, 3),
        _conv("upconv3d_2", 3, 2, c2, 1, 3, bn_relu=False),
    ]
    agg2d = [
        _conv("conv2d_1", 1, 1, f, c1), _conv("conv2d_2", 3, 1, c1 + levels, c1),
        _conv("conv2d_3", 3, 1, c1, c1), _conv("conv2d_4", 3, 2, c1, c2),
        _conv("conv2d_5", 3, 1, c2, c2), _conv("conv2d_6", 3, 1, c2, c2),
        _conv("conv2d_7", 3, 2, c2, c3), _conv("conv2d_8", 3, 1, c3, c3),
        _conv("conv2d_9", 3, 1, c3, c3), _conv("upconv2d_1", 3, 2, c3, c2),
        _conv("conv2d_10", 3, 1, 2 * c2, c2),
        _conv("upconv2d_2", 3, 2, c2, levels, bn_relu=False),
    ]
    return stem_a + stem_b + fusion + agg3d + agg2d


@dataclass
class LayerParams:
    kernel: Tensor
    bias: Tensor
    gamma: Tensor | None = None
    beta: Tensor | None = None
    running_mean: np.ndarray | None = None
    running_var: np.ndarray | None = None

    def named_arrays(self) -> Iterator[tuple[str, np.ndarray]]:
        yield "kernel", self.kernel.data
        yield "bias", self.bias.data
        if self.gamma is not None:
            yield "bn.gamma", self.gamma.data
            yield "bn.beta", self.beta.data
            yield "bn.running_mean", self.running_mean
            yield "bn.running_var", self.running_var


@dataclass
class NetworkWeights:
    """Per-layer parameters keyed by layer name, in architecture order.

    Left and right branches of each stem read the same entries, so weight
    sharing holds by construction.
    """

    config: ModelConfig
    layers: dict[str, LayerParams] = field(default_factory=dict)

    def __getitem__(self, name: str) -> LayerParams:
        return self.layers[name]

    def parameters(self) -> list[tuple[str, Tensor]]:
        """Trainable tensors as ``(qualified name, tensor)`` pairs."""
        out = []
        for name, p in self.layers.items():
            out += [(f"{name}.kernel", p.kernel), (f"{name}.bias", p.bias)]
            if p.gamma is not None:
                out += [(f"{name}.bn.gamma", p.gamma), (f"{name}.bn.beta", p.beta)]
        return out

    def state_dict(self) -> dict[str, np.ndarray]:
        """Every stored array, trainable or not, by qualified name."""
        return {
            f"{name}.{key}": arr
            for name, p in self.layers.items()
            for key, arr in p.named_arrays()
        }

    def zero_grad(self) -> None:
        for _, t in self.parameters():
            t.grad = None


def expected_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    shapes = {}
    for layer in architecture(config):
        if layer.spec is None:
            continue
        cout = layer.spec.out_channels
        shapes[f"{layer.name}.kernel"] = layer.spec.kernel_shape
        shapes[f"{layer.name}.bias"] = (cout,)
        if layer.bn_relu:
            for key in ("gamma", "beta", "running_mean", "running_var"):
                shapes[f"{layer.name}.bn.{key}"] = (cout,)
    return shapes


def init_weights(config: ModelConfig, seed: int | np.random.Generator = 0) -> NetworkWeights:
    """He-normal kernels (std ``sqrt(2 / fan_in)``), zero biases, unit gamma.

    The final cost layer ``upconv2d_2`` uses ``OUTPUT_INIT_SCALE`` times the He std.
    """
    rng = np.random.default_rng(seed)
    weights = NetworkWeights(config)
    for layer in architecture(config):
        if layer.spec is None:
            continue
        spec = layer.spec
        fan_in = int(np.prod(spec.kernel_extent)) * spec.in_channels
        kernel = rng.standard_normal(spec.kernel_shape) * np.sqrt(2.0 / fan_in)
        if layer.name == "upconv2d_2":
            kernel *= OUTPUT_INIT_SCALE
        params = LayerParams(
            kernel=Tensor(kernel, requires_grad=True, name=f"{layer.name}.kernel"),
            bias=Tensor(np.zeros(spec.out_channels), requires_grad=True, name=f"{layer.name}.bias"),
        )
        if layer.bn_relu:
            n = spec.out_channels
            params.gamma = Tensor(np.ones(n), requires_grad=True, name=f"{layer.name}.bn.gamma")
            params.beta = Tensor(np.zeros(n), requires_grad=True, name=f"{layer.name}.bn.beta")
            params.running_mean = np.zeros(n, dtype=np.float32)
            params.running_var = np.ones(n, dtype=np.float32)
        weights.layers[layer.name] = params
    return weights


def weights_from_state(config: ModelConfig, state: dict[str, np.ndarray]) -> NetworkWeights:
    """Rebuild weights from a state dict, checking every name and shape."""
    expected = expected_shapes(config)
    missing = sorted(set(expected) - set(state))
    if missing:
        raise ShapeError(f"missing tensor {missing[0]}")
    extra = sorted(set(state) - set(expected))
    if extra:
        raise ShapeError(f"unexpected tensor {extra[0]}")
    for name, shape in expected.items():
        if tuple(state[name].shape) != shape:
            raise ShapeError(f"tensor {name} has shape {tuple(state[name].shape)}, expected {shape}")
    weights = NetworkWeights(config)
    for layer in architecture(config):
        if layer.spec is None:
            continue
        n = layer.name
        params = LayerParams(
            kernel=Tensor(state[f"{n}.kernel"], requires_grad=True, name=f"{n}.kernel"),
            bias=Tensor(state[f"{n}.bias"], requires_grad=True, name=f"{n}.bias"),
        )
        if layer.bn_relu:
            params.gamma = Tensor(state[f"{n}.bn.gamma"], requires_grad=True, name=f"{n}.bn.gamma")
            params.beta = Tensor(state[f"{n}.bn.beta"], requires_grad=True, name=f"{n}.bn.beta")
            params.running_mean = np.array(state[f"{n}.bn.running_mean"], dtype=np.float32)
            params.running_var = np.array(state[f"{n}.bn.running_var"], dtype=np.float32)
        weights.layers[n] = params
    return weights


# ---------------------------------------------------------------------------
# layer application


class _Runner:
    """Applies named layers and optionally records each output."""

    def __init__(self, weights: NetworkWeights, training: bool, trace: dict | None, prefix: str = ""):
        self.weights = weights
        self.training = training
        self.trace = trace
        self.prefix = prefix
        self.defs = {layer.name: layer for layer in architecture(weights.config)}

    def record(self, name: str, t: Tensor) -> Tensor:
        if self.trace is not None:
            self.trace[self.prefix + name] = t
        return t

    def __call__(self, name: str, x: Tensor, target=None) -> Tensor:
        layer = self.defs[name]
        if layer.kind == "pool":
            return self.record(name, ops.maxpool2x2(x))
        p = self.weights[name]
        stride = layer.spec.stride
        if layer.kind == "conv2d":
            y = ops.conv2d(x, p.kernel, p.bias, stride=stride)
        elif layer.kind == "conv3d":
            y = ops.conv3d(x, p.kernel, p.bias, stride=stride)
        elif layer.kind == "upconv2d":
            y = ops.transposed_conv2d(x, p.kernel, p.bias, target)
        else:
            y = ops.transposed_conv3d(x, p.kernel, p.bias, target)
        if layer.bn_relu:
            y = ops.batchnorm(y, p.gamma, p.beta, p.running_mean, p.running_var, self.training)
            y = ops.relu(y)
        return self.record(name, y)


def _spatial(t: Tensor, nd: int) -> tuple[int, ...]:
    return t.shape[-nd - 1:-1]


def stem_forward(
    image: Tensor,
    weights: NetworkWeights,
    variant: str,
    training: bool = False,
    trace: dict | None = None,
    prefix: str = "",
) -> Tensor:
    """Run stem A or B on an ``(H, W, 3)`` or ``(B, H, W, 3)`` image."""
    h, w = _spatial(image, 2)
    if min(h, w) < 16:
        raise ShapeError(f"stem input must be at least 16x16, got {h}x{w}")
    run = _Runner(weights, training, trace, prefix)
    if variant == "A":
        x = run("conv_a2", run("conv_a1", image))
        skip = run("conv_a4", run("conv_a3", run("pool_a1", x)))
        x = run("conv_a7", run("conv_a6", run("conv_a5", run("pool_a2", skip))))
        x = run("upconv_a1", x, _spatial(skip, 2))
        return run("upconv_a2", ops.concat([x, skip]), (h, w))
    if variant == "B":
        x = run("conv_b2", run("conv_b1", image))
        skip_half = run("conv_b4", run("conv_b3", run("pool_b1", x)))
        skip_quarter = run("conv_b6", run("conv_b5", run("pool_b2", skip_half)))
        x = run("conv_b9", run("conv_b8", run("conv_b7", run("pool_b3", skip_quarter))))
        x = run("upconv_b1", x, _spatial(skip_quarter, 2))
        x = run("upconv_b2", ops.concat([x, skip_quarter]), _spatial(skip_half, 2))
        return run("upconv_b3", ops.concat([x, skip_half]), (h, w))
    raise ValueError(f"variant must be 'A' or 'B', got {variant!r}")


def fuse_unaries(
    feat_a: Tensor, feat_b: Tensor, weights: NetworkWeights, layer: str = "conv_1", trace: dict | None = None,
    prefix: str = "",
) -> Tensor:
    """Concatenate stem A and stem B features and apply the linear 1x1 fusion layer."""
    if feat_a.shape[:-1] != feat_b.shape[:-1]:
        raise ShapeError(f"stem features differ in resolution: {feat_a.shape} vs {feat_b.shape}")
    return _Runner(weights, False, trace, prefix)(layer, ops.concat([feat_a, feat_b]))


def _cost_geometry(left: Tensor, right: Tensor, max_disparity: int, offset: int):
    if left.ndim != right.ndim or left.ndim not in (3, 4):
        raise ShapeError(f"expected (H, W, C) or (B, H, W, C) features, got {left.shape} and {right.shape}")
    if left.shape[:-2] != right.shape[:-2] or left.shape[-1] != right.shape[-1]:
        raise ShapeError(f"left {left.shape} and right {right.shape} differ outside the width axis")
    if offset not in (0, max_disparity):
        raise ValueError(f"offset must be 0 or max_disparity ({max_disparity}), got {offset}")
    w, w_right = left.shape[-2], right.shape[-2]
    if w_right != w + offset:
        raise ShapeError(f"right width {w_right} inconsistent with left width {w} and offset {offset}")
    return w, w_right


def _disparity_slices(w: int, w_right: int, d: int, offset: int) -> tuple[slice, slice]:
    """Left columns x with a valid right column x + offset - d, and those right columns."""
    lo = max(0, d - offset)
    hi = max(lo, min(w, w_right - offset + d))
    return slice(lo, hi), slice(lo + offset - d, hi + offset - d)


def build_cost_volume_concat(left: Tensor, right: Tensor, max_disparity: int, offset: int = 0) -> Tensor:
    """``(D+1, H, W, 2C)`` volume; entry ``(d, y, x)`` is ``left[y, x] ++ right[y, x + offset - d]``.

    Right features outside the image are zero vectors.
    """
    w, w_right = _cost_geometry(left, right, max_disparity, offset)
    lf = left.data.astype(np.float64)[None] if left.ndim == 3 else left.data.astype(np.float64)
    rf = right.data.astype(np.float64)[None] if right.ndim == 3 else right.data.astype(np.float64)
    b, h, _, c = lf.shape
    levels = max_disparity + 1
    vol = np.zeros((b, levels, h, w, 2 * c))
    vol[..., :c] = lf[:, None]
    for d in range(levels):
        xs, rs = _disparity_slices(w, w_right, d, offset)
        vol[:, d, :, xs, c:] = rf[:, :, rs]

    def backward(g):
        gl = g[..., :c].sum(axis=1)
        gr = np.zeros_like(rf)
        for d in range(levels):
            xs, rs = _disparity_slices(w, w_right, d, offset)
            gr[:, :, rs] += g[:, d, :, xs, c:]
        if left.ndim == 3:
            return gl[0], gr[0]
        return gl, gr

    if left.ndim == 3:
        vol = vol[0]
        inner = backward
        backward = lambda g: inner(g[None])  # noqa: E731
    return make_result(vol, (left, right), backward)


def build_cost_volume_dot(left: Tensor, right: Tensor, max_disparity: int, offset: int = 0) -> Tensor:
    """``(D+1, H, W, 1)`` volume of negated inner products, so lower cost means a better match."""
    w, w_right = _cost_geometry(left, right, max_disparity, offset)
    lf = left.data.astype(np.float64)[None] if left.ndim == 3 else left.data.astype(np.float64)
    rf = right.data.astype(np.float64)[None] if right.ndim == 3 else right.data.astype(np.float64)
    b, h, _, _ = lf.shape
    levels = max_disparity + 1
    vol = np.zeros((b, levels, h, w, 1))
    for d in range(levels):
        xs, rs = _disparity_slices(w, w_right, d, offset)
        vol[:, d, :, xs, 0] = -np.einsum("bhwc,bhwc->bhw", lf[:, :, xs], rf[:, :, rs])

    def backward(g):
        g = g if left.ndim == 4 else g[None]
        gl = np.zeros_like(lf)
        gr = np.zeros_like(rf)
        for d in range(levels):
            xs, rs = _disparity_slices(w, w_right, d, offset)
            gd = g[:, d, :, xs, :]
            gl[:, :, xs] -= gd * rf[:, :, rs]
            gr[:, :, rs] -= gd * lf[:, :, xs]
        if left.ndim == 3:
            return gl[0], gr[0]
        return gl, gr

    return make_result(vol[0] if left.ndim == 3 else vol, (left, right), backward)


def agg3d_forward(
    cost_volume: Tensor, weights: NetworkWeights, training: bool = False, trace: dict | None = None
) -> Tensor:
    """3D hourglass over ``(D+1, H, W, C)``; returns the regularized ``(D+1, H, W, 1)`` cost."""
    levels, h, w = _spatial(cost_volume, 3)
    if levels != weights.config.levels:
        raise ShapeError(f"cost volume has {levels} disparity levels, expected {weights.config.levels}")
    if min(h, w) < 8:
        raise ShapeError(f"3D aggregation needs H, W >= 8, got {h}x{w}")
    run = _Runner(weights, training, trace)
    full = run("conv3d_2", run("conv3d_1", cost_volume))
    half = run("conv3d_5", run("conv3d_4", run("conv3d_3", full)))
    x = run("conv3d_8", run("conv3d_7", run("conv3d_6", half)))
    x = run("upconv3d_1", x, _spatial(half, 3))
    x = run("conv3d_9", run.record("upconv3d_1+conv3d_5", ops.add(x, half)))
    return run("upconv3d_2", x, _spatial(full, 3))


def agg2d_forward(
    cost3d: Tensor, left_unary: Tensor, weights: NetworkWeights, training: bool = False, trace: dict | None = None
) -> Tensor:
    """2D hourglass over the transposed cost joined with reduced left features."""
    levels = weights.config.levels
    if cost3d.shape[-1] != 1 or cost3d.shape[-4] != levels:
        raise ShapeError(f"expected a ({levels}, H, W, 1) cost, got {cost3d.shape}")
    if cost3d.shape[-3:-1] != left_unary.shape[-3:-1]:
        raise ShapeError(f"cost {cost3d.shape} and features {left_unary.shape} differ in resolution")
    run = _Runner(weights, training, trace)
    low = run("conv2d_1", left_unary)
    squeezed = ops.reshape(cost3d, cost3d.shape[:-1])
    axes = (1, 2, 0) if squeezed.ndim == 3 else (0, 2, 3, 1)
    transposed = run.record("transpose", ops.permute(squeezed, axes))
    full = run("conv2d_3", run("conv2d_2", ops.concat([low, transposed])))
    half = run("conv2d_6", run("conv2d_5", run("conv2d_4", full)))
    x = run("conv2d_9", run("conv2d_8", run("conv2d_7", half)))
    x = run("upconv2d_1", x, _spatial(half, 2))
    x = run("conv2d_10", ops.concat([x, half]))
    return run("upconv2d_2", x, _spatial(full, 2))


def wta(final_cost) -> np.ndarray:
    """Per-pixel argmin over the last axis; ties resolve to the smallest disparity."""
    data = final_cost.data if isinstance(final_cost, Tensor) else np.asarray(final_cost)
    return np.argmin(data, axis=-1)


@dataclass
class ForwardResult:
    final_cost: Tensor
    disparity: np.ndarray
    trace: dict | None = None


def _right_offset(left: Tensor, right: Tensor, config: ModelConfig) -> int:
    w, w_right = left.shape[-2], right.shape[-2]
    if w_right == w:
        return 0
    if w_right == w + config.max_disparity:
        return config.max_disparity
    raise ShapeError(
        f"right width {w_right} must equal left width {w} or {w} + max_disparity ({config.max_disparity})"
    )


def unary_features(
    left: Tensor, right: Tensor, weights: NetworkWeights, training: bool = False, trace: dict | None = None
) -> tuple[Tensor, Tensor]:
    """Fused left and right unary features (both stems, then ``conv_1`` / ``conv_2``)."""
    feats = []
    for side, image, layer in (("left", left, "conv_1"), ("right", right, "conv_2")):
        a = stem_forward(image, weights, "A", training, trace, f"{side}/")
        b = stem_forward(image, weights, "B", training, trace, f"{side}/")
        feats.append(fuse_unaries(a, b, weights, layer, trace, f"{side}/"))
    return feats[0], feats[1]


def full_forward(
    left, right, weights: NetworkWeights, training: bool = False, trace: dict | None = None
) -> ForwardResult:
    """Images to final cost and WTA disparity.

    The right image must be as wide as the left (inference) or wider by
    ``max_disparity`` (training crop); the cost-volume offset follows.
    """
    config = weights.config
    left = left if isinstance(left, Tensor) else Tensor(left)
    right = right if isinstance(right, Tensor) else Tensor(right)
    offset = _right_offset(left, right, config)
    feat_left, feat_right = unary_features(left, right, weights, training, trace)
    volume = build_cost_volume_concat(feat_left, feat_right, config.max_disparity, offset)
    if trace is not None:
        trace["cost_volume"] = volume
    cost3d = agg3d_forward(volume, weights, training, trace)
    final = agg2d_forward(cost3d, feat_left, weights, training, trace)
    return ForwardResult(final, wta(final), trace)


def matching_forward(left, right, weights: NetworkWeights, training: bool = False) -> ForwardResult:
    """Matching network alone: inner-product cost volume and WTA, no aggregation.

    ``final_cost`` is returned as ``(H, W, D+1)`` like ``full_forward``.
    """
    config = weights.config
    left = left if isinstance(left, Tensor) else Tensor(left)
    right = right if isinstance(right, Tensor) else Tensor(right)
    offset = _right_offset(left, right, config)
    feat_left, feat_right = unary_features(left, right, weights, training)
    volume = build_cost_volume_dot(feat_left, feat_right, config.max_disparity, offset)
    squeezed = ops.reshape(volume, volume.shape[:-1])
    axes = (1, 2, 0) if squeezed.ndim == 3 else (0, 2, 3, 1)
    cost = ops.permute(squeezed, axes)
    return ForwardResult(cost, wta(cost))
