"""LDR/HDR raster types plus tone mapping, calibration and resampling.

Images are row-major (height, width, 3) float arrays: LDR values live in
[0, 1], HDR values in [0, +inf).  All operations are pure; images are treated
as immutable.
"""

from dataclasses import dataclass

import numpy as np
from PIL import Image

# Rec.709 luminance weights
LUMA = np.array([0.2126, 0.7152, 0.0722])

DEFAULT_SIGMA = 0.83  # calibration mask threshold


class RasterError(ValueError):
    pass


class CalibrationError(RasterError):
    """Calibration mask is empty or the masked HDR sum vanishes."""


def _check_raster(values, name):
    arr = np.asarray(values)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise RasterError(f"{name} must be (h, w, 3), got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise RasterError(f"{name} contains non-finite values")
    return np.ascontiguousarray(arr, dtype=np.float32)


@dataclass(frozen=True)
class LdrImage:
    pixels: np.ndarray

    def __post_init__(self):
        arr = _check_raster(self.pixels, "LdrImage")
        if arr.min() < 0.0 or arr.max() > 1.0:
            raise RasterError("LdrImage values must lie in [0, 1]")
        object.__setattr__(self, "pixels", arr)

    @property
    def height(self):
        return self.pixels.shape[0]

    @property
    def width(self):
        return self.pixels.shape[1]


@dataclass(frozen=True)
class HdrImage:
    pixels: np.ndarray

    def __post_init__(self):
        arr = _check_raster(self.pixels, "HdrImage")
        if arr.min() < 0.0:
            raise RasterError("HdrImage values must be >= 0")
        object.__setattr__(self, "pixels", arr)

    @property
    def height(self):
        return self.pixels.shape[0]

    @property
    def width(self):
        return self.pixels.shape[1]


@dataclass(frozen=True)
class CalibMask:
    """Binary (h, w) grid marking pixels that participate in calibration."""

    values: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.values)
        if arr.ndim != 2:
            raise RasterError(f"mask must be 2-D, got shape {arr.shape}")
        if not np.all((arr == 0) | (arr == 1)):
            raise RasterError("mask values must be 0 or 1")
        object.__setattr__(self, "values", np.ascontiguousarray(arr, dtype=np.uint8))

    @property
    def count(self):
        return int(self.values.sum())


def luminance(pixels):
    return np.asarray(pixels, dtype=np.float64) @ LUMA


def reinhard_tonemap(hdr, per_channel=False):
    """Global Reinhard operator: luminance y maps to y / (1 + y).

    The default operates on Rec.709 luminance and rescales channels by the
    luminance ratio; `per_channel=True` applies c/(1+c) channelwise instead.
    Output is clamped to [0, 1] and is monotone in luminance.
    """
    src = np.asarray(hdr.pixels, dtype=np.float64)
    if per_channel:
        out = src / (1.0 + src)
    else:
        y = luminance(src)
        scale = np.where(y > 0.0, 1.0 / (1.0 + y), 0.0)
        out = src * scale[..., None]
    return LdrImage(np.clip(out, 0.0, 1.0))


def expose(hdr, ev=0.0):
    """Exposure preview: clamp(hdr * 2^ev, 0, 1) followed by 1/2.2 gamma."""
    scaled = np.clip(np.asarray(hdr.pixels, dtype=np.float64) * 2.0**ev, 0.0, 1.0)
    return LdrImage(scaled ** (1.0 / 2.2))


def calib_mask(ldr, sigma=DEFAULT_SIGMA):
    """Mask of non-highlight pixels: channel sum strictly below 3*sigma."""
    sums = np.asarray(ldr.pixels, dtype=np.float64).sum(axis=2)
    return CalibMask((sums < 3.0 * sigma).astype(np.uint8))


def calibrate(hdr, ldr, sigma=DEFAULT_SIGMA):
    """Rescale `hdr` so its masked sum equals the LDR's masked sum.

    Returns kappa * hdr with kappa = sum(M*ldr) / sum(M*hdr) over the
    non-highlight mask.  Raises CalibrationError when the mask is empty or
    the masked HDR sum is zero; the caller decides whether to skip the frame
    or fall back to kappa = 1.
    """
    if hdr.pixels.shape != ldr.pixels.shape:
        raise RasterError(
            f"dimension mismatch: hdr {hdr.pixels.shape} vs ldr {ldr.pixels.shape}"
        )
    mask = calib_mask(ldr, sigma)
    m = mask.values[..., None].astype(np.float64)
    if mask.count == 0:
        raise CalibrationError("calibration mask is empty (all pixels bright)")
    hdr_sum = float((m * hdr.pixels.astype(np.float64)).sum())
    if hdr_sum <= 0.0:
        raise CalibrationError("masked HDR sum is zero")
    ldr_sum = float((m * ldr.pixels.astype(np.float64)).sum())
    kappa = ldr_sum / hdr_sum
    return HdrImage(hdr.pixels.astype(np.float64) * kappa)


def rotate_horizontal(img, shift_px):
    """Circular column shift; the pixel multiset is preserved."""
    cls = type(img)
    arr = img.pixels
    shift = int(shift_px) % arr.shape[1]
    if shift == 0:
        return img
    return cls(np.roll(arr, shift, axis=1))


def _resample_weights(old, new):
    """Row-stochastic (new, old) weight matrix: area average down, linear up."""
    w = np.zeros((new, old), dtype=np.float64)
    if new < old:
        r = old / new
        for k in range(new):
            lo, hi = k * r, (k + 1) * r
            s0, s1 = int(np.floor(lo)), int(np.ceil(hi))
            for s in range(s0, min(s1, old)):
                w[k, s] = min(hi, s + 1) - max(lo, s)
        w /= w.sum(axis=1, keepdims=True)
    else:
        pos = (np.arange(new) + 0.5) * old / new - 0.5
        pos = np.clip(pos, 0.0, old - 1.0)
        lo = np.floor(pos).astype(int)
        hi = np.minimum(lo + 1, old - 1)
        frac = pos - lo
        w[np.arange(new), lo] += 1.0 - frac
        w[np.arange(new), hi] += frac
    return w


def resample_area(img, new_h, new_w):
    """Resize with box-filter averaging (downscale) / bilinear (upscale).

    The two modes are chosen per axis, so mixed shrink/grow resizes work; a
    constant image maps to the same constant.
    """
    if new_h < 1 or new_w < 1:
        raise RasterError(f"target dims must be positive, got {new_h}x{new_w}")
    cls = type(img)
    arr = img.pixels.astype(np.float64)
    wh = _resample_weights(arr.shape[0], new_h)
    ww = _resample_weights(arr.shape[1], new_w)
    out = np.einsum("ia,jb,abc->ijc", wh, ww, arr, optimize=True)
    if cls is LdrImage:
        out = np.clip(out, 0.0, 1.0)
    return cls(out)


def save_png(ldr, path):
    """Write an LdrImage as 8-bit PNG via round(255 * v) (linear mapping)."""
    data = np.round(ldr.pixels.astype(np.float64) * 255.0).astype(np.uint8)
    Image.fromarray(data, mode="RGB").save(path, format="PNG")


def load_png(path):
    with Image.open(path) as im:
        data = np.asarray(im.convert("RGB"), dtype=np.float64)
    return LdrImage(data / 255.0)
