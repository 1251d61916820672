"""Mask-aware disparity error metrics: >k px rates, end-point error and D1."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, fields
from typing import Mapping

import numpy as np


class _Undefined:
    """Result of a metric over an empty mask. Deliberately not a number."""

    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self):
        return "UNDEFINED"

    def __str__(self):
        return "undefined"

    def __bool__(self):
        return False


UNDEFINED = _Undefined()

THRESHOLDS = (2.0, 3.0, 5.0)
D1_ABS = 3.0
D1_REL = 0.05


def _abs_error(pred, gt, mask):
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if not pred.shape == gt.shape == mask.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape}, gt {gt.shape}, mask {mask.shape}")
    return np.abs(pred - gt)[mask], gt[mask]


def error_rate(pred, gt, mask, threshold_px: float):
    """Fraction of masked pixels with ``|pred - gt| > threshold_px``."""
    if threshold_px <= 0:
        raise ValueError("threshold must be positive")
    err, _ = _abs_error(pred, gt, mask)
    if err.size == 0:
        return UNDEFINED
    return float(np.count_nonzero(err > threshold_px)) / err.size


def end_point_error(pred, gt, mask):
    err, _ = _abs_error(pred, gt, mask)
    if err.size == 0:
        return UNDEFINED
    return float(err.mean())


def d1_rate(pred, gt, mask):
    """KITTI-2015 D1: error above both 3 px and 5% of the true disparity."""
    err, ref = _abs_error(pred, gt, mask)
    if err.size == 0:
        return UNDEFINED
    bad = (err > D1_ABS) & (err > D1_REL * np.abs(ref))
    return float(np.count_nonzero(bad)) / err.size


@dataclass(frozen=True)
class EvalReport:
    err_gt2: float
    err_gt3: float
    err_gt5: float
    epe: float
    d1: float
    valid_count: int


def report(pred, gt, mask) -> EvalReport | _Undefined:
    if not np.any(mask):
        return UNDEFINED
    return EvalReport(
        err_gt2=error_rate(pred, gt, mask, 2.0),
        err_gt3=error_rate(pred, gt, mask, 3.0),
        err_gt5=error_rate(pred, gt, mask, 5.0),
        epe=end_point_error(pred, gt, mask),
        d1=d1_rate(pred, gt, mask),
        valid_count=int(np.count_nonzero(mask)),
    )


def evaluate(pred, gt, masks: Mapping[str, np.ndarray]) -> dict[str, EvalReport | _Undefined]:
    """One report per supplied mask; ``non_occluded`` appears only if given.

    Typical keys are ``"all"`` and ``"non_occluded"``.
    """
    return {name: report(pred, gt, mask) for name, mask in masks.items() if mask is not None}


# ---------------------------------------------------------------------------
# report emission

COLUMNS = (
    (">2 px", "err_gt2", "pct"),
    (">3 px", "err_gt3", "pct"),
    (">5 px", "err_gt5", "pct"),
    ("End-Point", "epe", "px"),
    ("D1-all", "d1", "pct"),
    ("pixels", "valid_count", "int"),
)


def _cell(value, kind: str) -> str:
    if value is UNDEFINED:
        return "undefined"
    if kind == "pct":
        return f"{100.0 * value:.2f}%"
    if kind == "px":
        return f"{value:.3f}px"
    return str(value)


def format_table(rows: Mapping[str, EvalReport | _Undefined]) -> str:
    """Aligned plain-text table, one row per labelled report."""
    header = ["", *(c[0] for c in COLUMNS)]
    body = []
    for label, rep in rows.items():
        if rep is UNDEFINED:
            body.append([label, *("undefined" for _ in COLUMNS)])
        else:
            body.append([label, *(_cell(getattr(rep, attr), kind) for _, attr, kind in COLUMNS)])
    widths = [max(len(r[i]) for r in [header, *body]) for i in range(len(header))]
    lines = ["  ".join(cell.rjust(w) if i else cell.ljust(w) for i, (cell, w) in enumerate(zip(r, widths)))
             for r in [header, *body]]
    return "\n".join(lines)


def format_csv(rows: Mapping[str, EvalReport | _Undefined]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    names = [f.name for f in fields(EvalReport)]
    writer.writerow(["label", *names])
    for label, rep in rows.items():
        if rep is UNDEFINED:
            writer.writerow([label, *("undefined" for _ in names)])
        else:
            writer.writerow([label, *(repr(getattr(rep, n)) for n in names)])
    return buf.getvalue()
