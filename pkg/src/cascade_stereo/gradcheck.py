"""Central finite-difference checks for the analytic adjoints."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import ops
from .tensor import Tensor, backward, no_grad, storage_dtype


@dataclass
class GradCheckResult:
    max_rel_error: float
    worst: str
    checked: int

    def ok(self, tol: float = 1e-3) -> bool:
        return self.max_rel_error < tol


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """``max|a - n| / max(max|a|, max|n|, floor)`` over the checked entries."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0), floor)
    return float(np.abs(analytic - numeric).max(initial=0.0) / scale)


def check_gradients(
    fn: Callable[..., Tensor],
    inputs: Sequence[np.ndarray],
    eps: float = 1e-3,
    seed: int = 0,
    max_entries: int | None = None,
    names: Sequence[str] | None = None,
) -> GradCheckResult:
    """Compare the tape gradient of ``<r, fn(*inputs)>`` with central differences.

    ``r`` is a fixed random projection so every output entry contributes.
    Runs in float64 storage. With ``max_entries`` only that many randomly
    chosen entries per input are perturbed.
    """
    rng = np.random.default_rng(seed)
    names = list(names) if names is not None else [f"input{i}" for i in range(len(inputs))]
    with storage_dtype(np.float64):
        leaves = [Tensor(np.array(x, dtype=np.float64), requires_grad=True) for x in inputs]
        out = fn(*leaves)
        proj = rng.standard_normal(out.shape)
        backward(ops.weighted_sum(out, proj))

        def objective(values) -> float:
            with no_grad():
                return float((fn(*[Tensor(v) for v in values]).data * proj).sum())

        worst, worst_name, checked = 0.0, "", 0
        for i, leaf in enumerate(leaves):
            values = [np.array(x, dtype=np.float64) for x in inputs]
            flat = values[i].reshape(-1)
            idx = np.arange(flat.size)
            if max_entries is not None and flat.size > max_entries:
                idx = rng.choice(flat.size, size=max_entries, replace=False)
            numeric = np.empty(len(idx))
            for j, k in enumerate(idx):
                orig = flat[k]
                flat[k] = orig + eps
                plus = objective(values)
                flat[k] = orig - eps
                minus = objective(values)
                flat[k] = orig
                numeric[j] = (plus - minus) / (2 * eps)
            analytic = np.zeros(flat.size) if leaf.grad is None else leaf.grad.reshape(-1)
            err = relative_error(analytic[idx], numeric)
            checked += len(idx)
            if err >= worst:
                worst, worst_name = err, names[i]
    return GradCheckResult(worst, worst_name, checked)


def check_directional(
    fn: Callable[[], Tensor],
    params: Sequence[Tensor],
    eps: float = 1e-3,
    seed: int = 0,
) -> float:
    """Relative error between ``grad . v`` and the central difference along random ``v``.

    ``fn`` must rebuild its scalar output from the current ``params`` data.
    """
    rng = np.random.default_rng(seed)
    for p in params:
        p.grad = None
    out = fn()
    backward(out)
    directions = [rng.standard_normal(p.shape) for p in params]
    analytic = sum(float((p.grad.astype(np.float64) * v).sum()) for p, v in zip(params, directions) if p.grad is not None)
    originals = [p.data.copy() for p in params]

    def shifted(sign: float) -> float:
        for p, v, o in zip(params, directions, originals):
            p.data = (o + sign * eps * v).astype(o.dtype)
        with no_grad():
            return fn().item()

    numeric = (shifted(1.0) - shifted(-1.0)) / (2 * eps)
    for p, o in zip(params, originals):
        p.data = o
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-12)


def check_parameters(
    fn: Callable[[], Tensor],
    params: Sequence[tuple[str, Tensor]],
    eps: float = 1e-6,
    entries_per_tensor: int = 2,
    seed: int = 0,
    floor_fraction: float = 1e-5,
    resolution_multiple: float = 1e4,
) -> GradCheckResult:
    """Per-coordinate check of a scalar ``fn()`` on sampled entries of each parameter.

    Relative error is taken per parameter tensor. Some entries (a bias feeding
    batch norm, say) have an exact gradient of zero, so the denominator is
    floored at the larger of ``floor_fraction`` times the largest gradient seen
    and ``resolution_multiple`` times the difference-quotient resolution
    ``spacing(f) / (2 eps)``. With the default multiple, a few rounding steps
    of ``f`` stay far below a 1e-3 tolerance.
    """
    rng = np.random.default_rng(seed)
    for _, p in params:
        p.grad = None
    root = fn()
    resolution = float(np.spacing(abs(root.item()))) / (2 * eps)
    backward(root)
    pairs = []
    for name, p in params:
        flat = p.data.reshape(-1)
        idx = rng.choice(flat.size, size=min(entries_per_tensor, flat.size), replace=False)
        numeric = np.empty(len(idx))
        for j, k in enumerate(idx):
            orig = flat[k]
            values = []
            for sign in (1.0, -1.0):
                flat[k] = orig + sign * eps
                with no_grad():
                    values.append(fn().item())
            flat[k] = orig
            numeric[j] = (values[0] - values[1]) / (2 * eps)
        analytic = np.zeros(flat.size) if p.grad is None else p.grad.reshape(-1).astype(np.float64)
        pairs.append((name, analytic[idx], numeric))
    scale = max(max(np.abs(a).max(), np.abs(n).max()) for _, a, n in pairs)
    floor = max(floor_fraction * scale, resolution_multiple * resolution)
    worst, worst_name, checked = 0.0, "", 0
    for name, a, n in pairs:
        err = relative_error(a, n, floor=floor)
        checked += len(a)
        if err >= worst:
            worst, worst_name = err, name
    return GradCheckResult(worst, worst_name, checked)
