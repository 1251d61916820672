"""Reference layer tables, transcribed literally, and a shape checker against them.

Kept separate from ``net.architecture`` so that one can be checked against
the other. Resolution is a power-of-two divisor applied with ceil rounding
(pooling is ceil mode and stride-2 3x3 convolutions with padding 1 produce
``ceil(n / 2)``), so the expected sizes also hold for sizes not divisible by 8.
"""

from __future__ import annotations

from typing import Mapping, NamedTuple

from .net import ModelConfig


class Row(NamedTuple):
    name: str
    kernel: tuple[int, ...]  # () for parameter-free rows
    stride: int
    cin: int
    cout: int
    divisor: int  # output resolution = input resolution / divisor
    nd: int  # 2 for H x W outputs, 3 for D x H x W outputs


# name, kernel, stride, Ch(I/O), OutRes
STEM_TABLE = [
    Row("conv_a1", (3, 3), 1, 3, 32, 1, 2),
    Row("conv_a2", (3, 3), 1, 32, 32, 1, 2),
    Row("pool_a1", (2, 2), 2, 32, 32, 2, 2),
    Row("conv_a3", (3, 3), 1, 32, 32, 2, 2),
    Row("conv_a4", (3, 3), 1, 32, 32, 2, 2),
    Row("pool_a2", (2, 2), 2, 32, 32, 4, 2),
    Row("conv_a5", (3, 3), 1, 32, 32, 4, 2),
    Row("conv_a6", (3, 3), 1, 32, 32, 4, 2),
    Row("conv_a7", (3, 3), 1, 32, 32, 4, 2),
    Row("upconv_a1", (3, 3), 2, 32, 32, 2, 2),
    Row("upconv_a2", (3, 3), 2, 32, 32, 1, 2),
    Row("conv_b1", (3, 3), 1, 3, 32, 1, 2),
    Row("conv_b2", (3, 3), 1, 32, 32, 1, 2),
    Row("pool_b1", (2, 2), 2, 32, 32, 2, 2),
    Row("conv_b3", (3, 3), 1, 32, 32, 2, 2),
    Row("conv_b4", (3, 3), 1, 32, 32, 2, 2),
    Row("pool_b2", (2, 2), 2, 32, 32, 4, 2),
    Row("conv_b5", (3, 3), 1, 32, 32, 4, 2),
    Row("conv_b6", (3, 3), 1, 32, 32, 4, 2),
    Row("pool_b3", (2, 2), 2, 32, 32, 8, 2),
    Row("conv_b7", (3, 3), 1, 32, 32, 8, 2),
    Row("conv_b8", (3, 3), 1, 32, 32, 8, 2),
    Row("conv_b9", (3, 3), 1, 32, 32, 8, 2),
    Row("upconv_b1", (3, 3), 2, 32, 32, 4, 2),
    Row("upconv_b2", (3, 3), 2, 32, 32, 2, 2),
    Row("upconv_b3", (3, 3), 2, 32, 32, 1, 2),
    Row("conv_1", (1, 1), 1, 64, 32, 1, 2),
    Row("conv_2", (1, 1), 1, 64, 32, 1, 2),
]

AGGREGATION_TABLE = [
    Row("conv3d_1", (3, 3, 3), 1, 64, 16, 1, 3),
    Row("conv3d_2", (3, 3, 3), 1, 16, 16, 1, 3),
    Row("conv3d_3", (3, 3, 3), 2, 16, 32, 2, 3),
    Row("conv3d_4", (3, 3, 3), 1, 32, 32, 2, 3),
    Row("conv3d_5", (3, 3, 3), 1, 32, 32, 2, 3),
    Row("conv3d_6", (3, 3, 3), 2, 32, 64, 4, 3),
    Row("conv3d_7", (3, 3, 3), 1, 64, 64, 4, 3),
    Row("conv3d_8", (3, 3, 3), 1, 64, 64, 4, 3),
    Row("upconv3d_1", (3, 3, 3), 2, 64, 32, 2, 3),
    Row("conv3d_9", (3, 3, 3), 1, 32, 32, 2, 3),
    Row("upconv3d_2", (3, 3, 3), 2, 32, 1, 1, 3),
    Row("conv2d_1", (1, 1), 1, 32, 16, 1, 2),
    Row("transpose", (), 0, 0, 129, 1, 2),
    Row("conv2d_2", (3, 3), 1, 145, 16, 1, 2),
    Row("conv2d_3", (3, 3), 1, 16, 16, 1, 2),
    Row("conv2d_4", (3, 3), 2, 16, 32, 2, 2),
    Row("conv2d_5", (3, 3), 1, 32, 32, 2, 2),
    Row("conv2d_6", (3, 3), 1, 32, 32, 2, 2),
    Row("conv2d_7", (3, 3), 2, 32, 64, 4, 2),
    Row("conv2d_8", (3, 3), 1, 64, 64, 4, 2),
    Row("conv2d_9", (3, 3), 1, 64, 64, 4, 2),
    Row("upconv2d_1", (3, 3), 2, 64, 32, 2, 2),
    Row("conv2d_10", (3, 3), 1, 64, 32, 2, 2),
    Row("upconv2d_2", (3, 3), 2, 32, 129, 1, 2),
]

# Decoder layers whose input is upsampled features concatenated with the
# encoder skip: the table lists 32 input channels, the skip makes it 64.
CONCAT_SKIP_INPUTS = {"upconv_a2": 64, "upconv_b2": 64, "upconv_b3": 64}


def _reduce(n: int, divisor: int) -> int:
    while divisor > 1:
        n = -(-n // 2)
        divisor //= 2
    return n


def _channels(value: int, config: ModelConfig) -> int:
    """Map a reference channel count onto ``config`` (disparity-dependent cells follow D)."""
    if value == 129:
        return config.levels
    if value == 145:
        return 16 + config.levels
    return value


def expected_output_shapes(height: int, width: int, config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Layer name to expected unbatched output shape for a left image of ``height x width``.

    Only defined for the paper profile (its channel counts are the reference ones).
    """
    if config.profile != "paper":
        raise ValueError("the reference tables describe the paper profile only")
    levels = config.levels
    shapes = {}
    for row in STEM_TABLE + AGGREGATION_TABLE:
        spatial = (_reduce(height, row.divisor), _reduce(width, row.divisor))
        if row.nd == 3:
            spatial = (_reduce(levels, row.divisor), *spatial)
        shapes[row.name] = (*spatial, _channels(row.cout, config))
    shapes["cost_volume"] = (levels, height, width, 64)
    return shapes


def expected_kernel_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    if config.profile != "paper":
        raise ValueError("the reference tables describe the paper profile only")
    out = {}
    for row in STEM_TABLE + AGGREGATION_TABLE:
        if not row.kernel or row.name.startswith("pool"):
            continue
        cin = CONCAT_SKIP_INPUTS.get(row.name, _channels(row.cin, config))
        out[row.name] = (*row.kernel, cin, _channels(row.cout, config))
    return out


def compare_shapes(
    actual: Mapping[str, tuple[int, ...]], expected: Mapping[str, tuple[int, ...]]
) -> list[str]:
    """Human-readable mismatches; empty when every expected entry matches exactly."""
    problems = []
    for name, shape in expected.items():
        got = actual.get(name)
        if got is None:
            problems.append(f"{name}: missing")
        elif tuple(got) != tuple(shape):
            problems.append(f"{name}: got {tuple(got)}, expected {tuple(shape)}")
    return problems


class ShapeRecorder(dict):
    """Trace mapping that keeps only shapes, so large activations can be freed."""

    def __setitem__(self, key, tensor):
        super().__setitem__(key, tuple(tensor.shape))


def traced_layer_shapes(trace: Mapping[str, tuple[int, ...]], branch: str = "left") -> dict[str, tuple[int, ...]]:
    """Strip the stem branch prefix from recorded names, keeping one branch."""
    out = {}
    for key, shape in trace.items():
        if "/" in key:
            side, name = key.split("/", 1)
            if side != branch:
                continue
        else:
            name = key
        out[name] = tuple(shape)
    return out
