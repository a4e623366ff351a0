"""Disparity accuracy metrics and the evaluation report.

D1 and end-point error compare against ground truth over its valid pixels;
the warping error needs no ground truth at all and doubles as the
self-supervised progress signal during training.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import DisparityGT, StereoPair
from .losses import reconstruction_error

D1_THRESHOLDS = ((0.5, False), (1.0, False), (3.0, True))


def _valid_errors(predicted: np.ndarray, gt: DisparityGT) -> tuple[np.ndarray, np.ndarray]:
    if predicted.shape != gt.values.shape:
        raise ValueError(f"prediction shape {predicted.shape} != gt shape {gt.values.shape}")
    if not np.any(gt.valid):
        raise ValueError("no valid ground-truth pixels")
    err = np.abs(predicted.astype(np.float64) - gt.values.astype(np.float64))
    return err, gt.valid


def d1_error(predicted: np.ndarray, gt: DisparityGT, threshold: float, relative: bool = False) -> float:
    """Percentage of valid pixels whose error exceeds ``threshold`` px.

    With ``relative`` the pixel must also be off by more than 5% of the
    true disparity, the usual convention for loose thresholds.
    """
    if threshold <= 0:
        raise ValueError("d1_error: threshold must be positive")
    err, valid = _valid_errors(predicted, gt)
    bad = err > threshold
    if relative:
        bad &= err > 0.05 * gt.values
    return float(100.0 * bad[valid].mean())


def epe(predicted: np.ndarray, gt: DisparityGT) -> float:
    """Mean absolute disparity error over valid pixels."""
    err, valid = _valid_errors(predicted, gt)
    return float(err[valid].mean())


def warping_error(pair: StereoPair, d_left: np.ndarray, d_right: np.ndarray, margin: int = 0) -> float:
    """Mean absolute photometric error of warping each view from the other."""
    return reconstruction_error(pair.left, pair.right, d_left, d_right, margin)


@dataclass
class EvalReport:
    """Aggregate metrics over an evaluation set (pixel-weighted)."""

    pairs: int
    valid_pixels: int
    epe: float
    d1_05: float
    d1_10: float
    d1_30: float
    warp_error: float

    CSV_HEADER = "pairs,valid_pixels,epe,d1_0.5,d1_1.0,d1_3.0,warp_error"

    def to_csv_row(self) -> str:
        return (
            f"{self.pairs},{self.valid_pixels},{self.epe!r},"
            f"{self.d1_05!r},{self.d1_10!r},{self.d1_30!r},{self.warp_error!r}"
        )

    def to_text(self) -> str:
        lines = [
            f"pairs evaluated: {self.pairs}",
            f"valid GT pixels: {self.valid_pixels}",
            f"EPE: {self.epe:.4f} px",
            f"D1(0.5px): {self.d1_05:.2f}%",
            f"D1(1.0px): {self.d1_10:.2f}%",
            f"D1(3.0px): {self.d1_30:.2f}%",
            f"warping error: {self.warp_error:.6f}",
        ]
        return "\n".join(lines)


def evaluate(entries, margin: int = 0) -> EvalReport:
    """Aggregate over (pair, d_left, d_right) triples; gt must be present.

    D1/EPE pool all valid pixels across pairs; the warping error averages
    per-pair values.
    """
    total_valid = 0
    err_sum = 0.0
    bad_counts = [0, 0, 0]
    warp_sum = 0.0
    n = 0
    for pair, d_left, d_right in entries:
        if pair.gt is None:
            raise ValueError("evaluate: pair has no ground truth")
        err, valid = _valid_errors(d_left, pair.gt)
        total_valid += int(valid.sum())
        err_sum += float(err[valid].sum())
        for j, (thr, rel) in enumerate(D1_THRESHOLDS):
            bad = err > thr
            if rel:
                bad &= err > 0.05 * pair.gt.values
            bad_counts[j] += int(bad[valid].sum())
        warp_sum += warping_error(pair, d_left, d_right, margin)
        n += 1
    if n == 0:
        raise ValueError("evaluate: empty evaluation set")
    return EvalReport(
        pairs=n,
        valid_pixels=total_valid,
        epe=err_sum / total_valid,
        d1_05=100.0 * bad_counts[0] / total_valid,
        d1_10=100.0 * bad_counts[1] / total_valid,
        d1_30=100.0 * bad_counts[2] / total_valid,
        warp_error=warp_sum / n,
    )
