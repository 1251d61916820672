"""Self-check suite: adjoints vs finite differences, layer-table shapes, loop oracles."""

from __future__ import annotations

import contextlib
import time
from dataclasses import dataclass
from typing import Callable, Iterator

import numpy as np

from . import conformance, metrics, net, ops, oracles, training
from .gradcheck import check_gradients, check_parameters
from .tensor import Tensor, no_grad, storage_dtype

GRAD_TOL = 1e-3


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0


def _away_from_zero(rng, shape, margin=0.05):
    x = rng.standard_normal(shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-12) * margin, x)


def _distinct(rng, shape, spacing=0.01):
    n = int(np.prod(shape))
    return (rng.permutation(n).reshape(shape) - n / 2) * spacing


def gradient_cases(rng: np.random.Generator) -> dict[str, tuple[Callable, list[np.ndarray]]]:
    """Small random problems for every differentiable op, keyed by check name.

    Ops are looked up at call time so ``perturbed_adjoint`` can intercept them.
    """
    r = rng.standard_normal
    rm, rv = np.zeros(3), np.ones(3)
    rm_i, rv_i = rng.random(3), rng.random(3) + 0.5
    gt = rng.integers(0, 7, (3, 4)).astype(float)
    mask = rng.random((3, 4)) > 0.25
    mask[0, 0] = True
    return {
        "conv2d": (lambda x, k, b: ops.conv2d(x, k, b), [r((5, 6, 2)), r((3, 3, 2, 3)), r(3)]),
        "conv2d_stride2": (lambda x, k, b: ops.conv2d(x, k, b, stride=2), [r((2, 7, 6, 2)), r((3, 3, 2, 3)), r(3)]),
        "conv2d_1x1": (lambda x, k, b: ops.conv2d(x, k, b), [r((4, 5, 3)), r((1, 1, 3, 2)), r(2)]),
        "conv3d": (lambda x, k, b: ops.conv3d(x, k, b), [r((3, 4, 5, 2)), r((3, 3, 3, 2, 2)), r(2)]),
        "conv3d_stride2": (lambda x, k, b: ops.conv3d(x, k, b, stride=2), [r((5, 5, 6, 2)), r((3, 3, 3, 2, 3)), r(3)]),
        "transposed_conv2d": (
            lambda x, k, b: ops.transposed_conv2d(x, k, b, (7, 8)), [r((4, 4, 2)), r((3, 3, 2, 3)), r(3)]
        ),
        "transposed_conv3d": (
            lambda x, k, b: ops.transposed_conv3d(x, k, b, (5, 6, 7)), [r((3, 3, 4, 2)), r((3, 3, 3, 2, 3)), r(3)]
        ),
        "maxpool2x2": (lambda x: ops.maxpool2x2(x), [_distinct(rng, (5, 7, 2))]),
        "batchnorm_train": (
            lambda x, g, b: ops.batchnorm(x, g, b, rm.copy(), rv.copy(), True), [r((4, 5, 3)), r(3), r(3)]
        ),
        "batchnorm_infer": (lambda x, g, b: ops.batchnorm(x, g, b, rm_i, rv_i, False), [r((4, 5, 3)), r(3), r(3)]),
        "relu": (lambda x: ops.relu(x), [_away_from_zero(rng, (4, 6))]),
        "softmax": (lambda x: ops.softmax(x, axis=-1), [r((4, 6))]),
        "concat": (lambda a, b: ops.concat([a, b], axis=-1), [r((3, 4, 2)), r((3, 4, 3))]),
        "add": (lambda a, b: ops.add(a, b), [r((3, 4)), r((3, 4))]),
        "permute": (lambda x: ops.permute(x, (1, 2, 0)), [r((3, 4, 5))]),
        "cost_volume_concat": (
            lambda a, b: net.build_cost_volume_concat(a, b, 3, 0), [r((3, 5, 2)), r((3, 5, 2))]
        ),
        "cost_volume_dot": (lambda a, b: net.build_cost_volume_dot(a, b, 3, 3), [r((3, 5, 2)), r((3, 8, 2))]),
        "cross_entropy_loss": (lambda c: training.loss_cross_entropy(c, gt, mask).value, [r((3, 4, 7))]),
    }


def end_to_end_gradient(seed: int = 0, entries_per_tensor: int = 2):
    """Tiny profile, 16x32 images, D=8: per-coordinate check of every parameter tensor.

    Uses a 1e-6 step in float64; larger steps straddle ReLU and max-pool kinks
    somewhere among the ~10^5 units and the difference quotient stops being a
    derivative estimate.
    """
    rng = np.random.default_rng(seed)
    with storage_dtype(np.float64):
        weights = net.init_weights(net.ModelConfig(8, "tiny"), rng)
        left = Tensor(rng.standard_normal((16, 32, 3)))
        right = Tensor(rng.standard_normal((16, 32, 3)))
        gt = rng.integers(0, 9, (16, 32)).astype(float)
        mask = rng.random((16, 32)) > 0.1

        def loss():
            cost = net.full_forward(left, right, weights, training=True).final_cost
            return training.loss_cross_entropy(cost, gt, mask).value

        return check_parameters(loss, weights.parameters(), eps=1e-6, entries_per_tensor=entries_per_tensor)


@contextlib.contextmanager
def perturbed_adjoint(op_name: str, factor: float = 1.1) -> Iterator[None]:
    """Test hook: scale the backward of ``ops.<op_name>`` so gradient checks must fail."""
    original = getattr(ops, op_name)

    def wrapped(*args, **kwargs):
        out = original(*args, **kwargs)
        inner = out._backward
        if inner is not None:
            out._backward = lambda g: tuple(None if x is None else x * factor for x in inner(g))
        return out

    setattr(ops, op_name, wrapped)
    try:
        yield
    finally:
        setattr(ops, op_name, original)


def _timed(name: str, fn: Callable[[], tuple[bool, str]]) -> CheckResult:
    start = time.perf_counter()
    try:
        passed, detail = fn()
    except Exception as exc:  # a crash is a failed check, reported by name
        passed, detail = False, f"{type(exc).__name__}: {exc}"
    return CheckResult(name, passed, detail, time.perf_counter() - start)


def _gradient_checks(seed: int) -> list[CheckResult]:
    results = []
    for name, (fn, inputs) in gradient_cases(np.random.default_rng(seed)).items():
        def run(fn=fn, inputs=inputs):
            res = check_gradients(fn, inputs, eps=1e-3, seed=seed)
            return res.ok(GRAD_TOL), f"max relative error {res.max_rel_error:.2e} ({res.worst})"
        results.append(_timed(f"gradient/{name}", run))

    def e2e():
        res = end_to_end_gradient(seed, entries_per_tensor=1)
        return res.ok(GRAD_TOL), f"max relative error {res.max_rel_error:.2e} ({res.worst}, {res.checked} entries)"

    results.append(_timed("gradient/end_to_end_tiny", e2e))
    return results


def _shape_checks() -> list[CheckResult]:
    def paper_tables():
        config = net.ModelConfig(16, "paper")
        trace = conformance.ShapeRecorder()
        rng = np.random.default_rng(0)
        weights = net.init_weights(config, rng)
        with no_grad():
            net.full_forward(rng.standard_normal((64, 64, 3)), rng.standard_normal((64, 64, 3)), weights, trace=trace)
        actual = conformance.traced_layer_shapes(trace)
        actual["conv_2"] = conformance.traced_layer_shapes(trace, branch="right")["conv_2"]
        problems = conformance.compare_shapes(actual, conformance.expected_output_shapes(64, 64, config))
        kernels = {name: weights[name].kernel.shape for name in weights.layers}
        problems += conformance.compare_shapes(kernels, conformance.expected_kernel_shapes(config))
        return not problems, "; ".join(problems) or "all layer and kernel shapes match"

    def tiny_odd_sizes():
        config = net.ModelConfig(16, "tiny")
        trace = conformance.ShapeRecorder()
        with no_grad():
            res = net.full_forward(np.zeros((58, 58, 3)), np.zeros((58, 58 + 16, 3)), net.init_weights(config), trace=trace)
        shapes = conformance.traced_layer_shapes(trace)
        chain = [shapes[k][0] for k in ("conv3d_2", "conv3d_5", "conv3d_8", "conv3d_9", "upconv3d_2")]
        pools = [shapes[k][0] for k in ("conv_b2", "pool_b1", "pool_b2", "pool_b3")]
        ok = res.final_cost.shape == (58, 58, 17) and chain == [17, 9, 5, 9, 17] and pools == [58, 29, 15, 8]
        return ok, f"final {res.final_cost.shape}, disparity chain {chain}, stem B chain {pools}"

    return [_timed("shapes/paper_tables", paper_tables), _timed("shapes/tiny_odd_sizes", tiny_odd_sizes)]


def _oracle_checks(seed: int) -> list[CheckResult]:
    rng = np.random.default_rng(seed)

    def cost_volumes():
        worst_dot = 0.0
        for _ in range(40):
            h, w = (int(v) for v in rng.integers(1, 9, 2))
            c, d = (int(v) for v in rng.integers(1, 5, 2))
            offset = int(rng.choice([0, d]))
            left = rng.standard_normal((h, w, c)).astype(np.float32)
            right = rng.standard_normal((h, w + offset, c)).astype(np.float32)
            got = net.build_cost_volume_concat(Tensor(left), Tensor(right), d, offset).data
            if not np.array_equal(got, oracles.cost_volume_concat_loops(left, right, d, offset)):
                return False, f"concat volume differs for H={h} W={w} C={c} D={d} offset={offset}"
            dot = net.build_cost_volume_dot(Tensor(left), Tensor(right), d, offset).data
            worst_dot = max(worst_dot, float(np.abs(dot - oracles.cost_volume_dot_loops(left, right, d, offset)).max()))
        return worst_dot <= 1e-6, f"concat exact; dot max abs difference {worst_dot:.1e}"

    def argmin():
        for _ in range(40):
            cost = rng.integers(0, 4, (4, 4, 9)).astype(np.float32)  # many ties
            if not np.array_equal(net.wta(cost), oracles.argmin_loops(cost)):
                return False, "WTA differs from the exhaustive scan"
        return True, "WTA matches the exhaustive scan, ties to the smallest index"

    def metric_loops():
        errors = np.array([[0.0, 2.5], [4.0, 6.0]])
        gt = np.full((2, 2), 10.0)
        hand = metrics.evaluate(gt + errors, gt, {"all": np.ones((2, 2), bool)})["all"]
        if (hand.err_gt2, hand.err_gt3, hand.err_gt5, hand.epe) != (0.75, 0.5, 0.25, 3.125):
            return False, f"hand case gives {hand}"
        worst = 0.0
        for _ in range(100):
            pred = rng.random((8, 8)) * 20
            truth = rng.random((8, 8)) * 20
            mask = rng.random((8, 8)) > 0.3
            rep = metrics.report(pred, truth, mask)
            ref = oracles.metrics_loops(pred, truth, mask)
            got = (rep.err_gt2, rep.err_gt3, rep.err_gt5, rep.epe, rep.d1)
            worst = max(worst, max(abs(a - b) for a, b in zip(got, ref)))
        return worst <= 1e-9, f"max difference from loop oracle {worst:.1e}"

    return [
        _timed("oracle/cost_volumes", cost_volumes),
        _timed("oracle/wta", argmin),
        _timed("oracle/metrics", metric_loops),
    ]


def run_selftest(seed: int = 0, perturb: str | None = None) -> list[CheckResult]:
    """Run every check; ``perturb`` names an op in ``ops`` whose adjoint is deliberately broken."""
    with perturbed_adjoint(perturb) if perturb else contextlib.nullcontext():
        return _gradient_checks(seed) + _shape_checks() + _oracle_checks(seed)
