"""Spherical geometry of equirectangular panoramas and Fourier position encoding.

Conventions: longitude theta runs along the image width with range (-pi, pi],
latitude phi along the height with range (-pi/2, pi/2]; the unit sphere radius
is fixed at 1.  Angles are sampled at pixel centers, i.e. index + 0.5, which
makes the pixel<->sphere roundtrip exact and keeps the horizontal seam
unambiguous.  Set ``verbatim_axes=True`` to bind the full-turn angle to the
height index instead (the non-standard transposed layout).
"""

import math
from dataclasses import dataclass

import numpy as np

TAU = 2.0 * math.pi

SPE_OCTAVES = 4  # default Fourier octave count L


class DomainError(ValueError):
    """An argument is outside the documented domain of an operation."""


def wrap_longitude(theta):
    """Wrap an angle (scalar or array) into (-pi, pi]."""
    return math.pi - np.mod(math.pi - np.asarray(theta, dtype=np.float64), TAU)


def wrap_latitude(phi):
    """Wrap an angle (scalar or array) into (-pi/2, pi/2]."""
    return math.pi / 2 - np.mod(math.pi / 2 - np.asarray(phi, dtype=np.float64), math.pi)


@dataclass(frozen=True)
class SphereCoord:
    """A point on the unit sphere; angles normalized on construction."""

    theta: float
    phi: float

    def __post_init__(self):
        object.__setattr__(self, "theta", float(wrap_longitude(self.theta)))
        object.__setattr__(self, "phi", float(wrap_latitude(self.phi)))

    @property
    def radius(self):
        return 1.0


def pixel_to_sphere(i, j, h, w, verbatim_axes=False):
    """Map pixel indices (row i, column j) of an h x w panorama to angles.

    Accepts scalars or arrays; fractional indices address positions between
    pixel centers.  Returns a SphereCoord for scalar input, else a pair of
    float64 arrays (theta, phi).
    """
    if h < 1 or w < 1:
        raise DomainError(f"image dims must be positive, got {h}x{w}")
    i_arr = np.asarray(i, dtype=np.float64)
    j_arr = np.asarray(j, dtype=np.float64)
    # fractional coordinates may reach the pixel-edge margin beyond centers
    if (
        np.any(i_arr < -0.5)
        or np.any(i_arr > h - 0.5)
        or np.any(j_arr < -0.5)
        or np.any(j_arr > w - 0.5)
    ):
        raise DomainError(f"pixel index out of range for {h}x{w} image")
    if verbatim_axes:
        theta = (2.0 * (i_arr + 0.5) / h - 1.0) * math.pi
        phi = (2.0 * (j_arr + 0.5) / w - 1.0) * (math.pi / 2.0)
    else:
        theta = (2.0 * (j_arr + 0.5) / w - 1.0) * math.pi
        phi = (2.0 * (i_arr + 0.5) / h - 1.0) * (math.pi / 2.0)
    if np.ndim(i) == 0 and np.ndim(j) == 0:
        return SphereCoord(float(theta), float(phi))
    return theta, phi


def sphere_to_pixel(coord, h, w, verbatim_axes=False):
    """Inverse of :func:`pixel_to_sphere`; returns fractional (i, j).

    Accepts a SphereCoord or a (theta, phi) pair of scalars/arrays.  Angles
    are normalized into range first; the column coordinate wraps modulo w.
    """
    if isinstance(coord, SphereCoord):
        theta, phi = coord.theta, coord.phi
    else:
        theta, phi = coord
    theta = wrap_longitude(theta)
    phi = wrap_latitude(phi)
    if verbatim_axes:
        i = (theta / math.pi + 1.0) * h / 2.0 - 0.5
        j = (phi / (math.pi / 2.0) + 1.0) * w / 2.0 - 0.5
    else:
        j = (theta / math.pi + 1.0) * w / 2.0 - 0.5
        i = (phi / (math.pi / 2.0) + 1.0) * h / 2.0 - 0.5
    j = np.mod(j, w)
    if np.ndim(i) == 0 and np.ndim(j) == 0:
        return float(i), float(j)
    return np.broadcast_arrays(i, j)


def fourier_encode(angle, octaves=SPE_OCTAVES):
    """Encode an angle as [sin(2^0 pi a), cos(2^0 pi a), ..., sin/cos(2^(L-1) pi a)].

    `angle` may be a scalar or an array; the 2L encoding channels are appended
    as a trailing axis.  The encoding is 2-periodic in its argument.
    """
    if octaves < 1:
        raise DomainError(f"octave count must be >= 1, got {octaves}")
    a = np.asarray(angle, dtype=np.float64)
    out = np.empty(a.shape + (2 * octaves,), dtype=np.float64)
    for k in range(octaves):
        arg = (2.0**k) * math.pi * a
        out[..., 2 * k] = np.sin(arg)
        out[..., 2 * k + 1] = np.cos(arg)
    return out


@dataclass(frozen=True)
class SpeGrid:
    """Per-position spherical encodings: channels [theta, phi, g(theta), g(phi)].

    `values` has shape (grid_h, grid_w, 2 + 4L); all Fourier channels lie in
    [-1, 1].
    """

    values: np.ndarray
    octaves: int

    def __post_init__(self):
        expected = 2 + 4 * self.octaves
        if self.values.ndim != 3 or self.values.shape[2] != expected:
            raise DomainError(
                f"SPE grid needs {expected} channels, got shape {self.values.shape}"
            )

    @property
    def channels(self):
        return self.values.shape[2]


def encode_angles(theta, phi, octaves=SPE_OCTAVES):
    """Stack [theta, phi, fourier(theta), fourier(phi)] along a new last axis."""
    theta = np.asarray(theta, dtype=np.float64)
    phi = np.asarray(phi, dtype=np.float64)
    return np.concatenate(
        [
            theta[..., None],
            phi[..., None],
            fourier_encode(theta, octaves),
            fourier_encode(phi, octaves),
        ],
        axis=-1,
    )


def patch_spe(origin, patch_h, patch_w, pano_h, pano_w, grid_h, grid_w,
              octaves=SPE_OCTAVES, verbatim_axes=False):
    """Spherical encodings at the token centers of a panorama patch.

    `origin` is the (row, col) of the patch's top-left pixel; the patch wraps
    horizontally but must fit vertically, and the token grid must divide the
    patch evenly.  Returns an SpeGrid of shape (grid_h, grid_w, 2+4L).
    """
    oi, oj = origin
    if patch_h % grid_h != 0 or patch_w % grid_w != 0:
        raise DomainError(
            f"token grid {grid_h}x{grid_w} does not divide patch {patch_h}x{patch_w}"
        )
    if oi < 0 or oi + patch_h > pano_h:
        raise DomainError("patch exceeds panorama vertically")
    cell_h = patch_h // grid_h
    cell_w = patch_w // grid_w
    ii = oi + (np.arange(grid_h) + 0.5) * cell_h - 0.5
    jj = np.mod(oj + (np.arange(grid_w) + 0.5) * cell_w - 0.5, pano_w)
    i_grid, j_grid = np.meshgrid(ii, jj, indexing="ij")
    theta, phi = pixel_to_sphere(i_grid, j_grid, pano_h, pano_w, verbatim_axes)
    return SpeGrid(encode_angles(theta, phi, octaves), octaves)


def pano_angle_grid(h, w, verbatim_axes=False):
    """(theta, phi) arrays of shape (h, w) at every pixel center."""
    ii, jj = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    return pixel_to_sphere(ii, jj, h, w, verbatim_axes)
