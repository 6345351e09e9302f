"""Evaluation metrics over linear radiance rasters."""

import numpy as np


class MetricError(ValueError):
    pass


def _paired(pred, gt):
    a = np.asarray(pred, dtype=np.float64)
    b = np.asarray(gt, dtype=np.float64)
    if a.shape != b.shape:
        raise MetricError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def mae(pred, gt):
    a, b = _paired(pred, gt)
    return float(np.abs(a - b).mean())


def rmse(pred, gt):
    a, b = _paired(pred, gt)
    return float(np.sqrt(((a - b) ** 2).mean()))


def psnr(pred, gt, peak=1.0):
    a, b = _paired(pred, gt)
    mse = ((a - b) ** 2).mean()
    if mse == 0.0:
        return float("inf")
    return float(10.0 * np.log10(peak * peak / mse))


def scale_aligned_log_rmse(pred, gt, floor=1e-6):
    """Log-space RMSE after the per-image optimal global scale.

    Minimizing over a positive rescale of the prediction leaves the standard
    deviation of the log ratio, so this equals sqrt of the scale-invariant
    range loss.
    """
    a, b = _paired(pred, gt)
    d = np.log(np.maximum(a, floor)) - np.log(np.maximum(b, floor))
    return float(np.sqrt(np.mean(d * d) - np.mean(d) ** 2))
