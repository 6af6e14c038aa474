"""Slice-axis acquisition models and cubic-spline resampling along Z."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.interpolate import CubicSpline
from scipy.ndimage import gaussian_filter1d

from .errors import ConfigurationError, DimensionError, RangeError

__all__ = [
    "DegradationSpec",
    "MODES",
    "degrade",
    "upsample_cubic",
    "tricubic_interpolate",
    "upsampled_length",
]

MODES = ("thin_to_thick", "thin_to_thin", "gaussian")
MODE_ALIASES = {"thick": "thin_to_thick", "thin": "thin_to_thin"}

MAX_UPSAMPLE = 8.0


@dataclass(frozen=True)
class DegradationSpec:
    """How a low-resolution acquisition is synthesized from a thin-slice volume.

    ``s`` is the integer slice sampling factor. ``gaussian_sigma`` (in slice
    units) is used, and required, only by the ``gaussian`` mode.
    """

    mode: str = "thin_to_thick"
    s: int = 2
    gaussian_sigma: float | None = None
    noise_sigma: float = 0.0
    noise_seed: int = 0

    def __post_init__(self):
        mode = MODE_ALIASES.get(self.mode, self.mode)
        object.__setattr__(self, "mode", mode)
        if mode not in MODES:
            raise ConfigurationError(f"unknown degradation mode {self.mode!r}")
        if isinstance(self.s, float) and not float(self.s).is_integer():
            raise ConfigurationError(f"synthesis needs an integer sampling factor, got {self.s}")
        object.__setattr__(self, "s", int(self.s))
        if self.s < 2:
            raise ConfigurationError(f"sampling factor must be >= 2, got {self.s}")
        if (mode == "gaussian") != (self.gaussian_sigma is not None):
            raise ConfigurationError("gaussian_sigma is required for, and only for, gaussian mode")
        if self.gaussian_sigma is not None and not self.gaussian_sigma > 0:
            raise ConfigurationError("gaussian_sigma must be > 0")
        if not self.noise_sigma >= 0:
            raise ConfigurationError("noise_sigma must be >= 0")

    def to_dict(self):
        return {
            "mode": self.mode,
            "s": self.s,
            "gaussian_sigma": self.gaussian_sigma,
            "noise_sigma": self.noise_sigma,
            "noise_seed": self.noise_seed,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def degrade(v, spec):
    """Apply the encoder (anti-alias filter, then decimate along Z).

    thin_to_thick averages each non-overlapping slab ``[k*s, k*s + s)`` and
    drops a trailing partial slab; thin_to_thin keeps every s-th slice;
    gaussian smooths along Z before keeping every s-th slice.
    """
    s = spec.s
    zin = v.shape[0]
    if zin < s:
        raise DimensionError(f"volume has {zin} slices, fewer than the sampling factor {s}")
    x = v.data
    if spec.mode == "thin_to_thick":
        nz = zin // s
        slabs = x[: nz * s].astype(np.float64).reshape(nz, s, *x.shape[1:])
        out = slabs.mean(axis=1)
    elif spec.mode == "thin_to_thin":
        out = x[::s]
    else:
        smoothed = gaussian_filter1d(x.astype(np.float64), spec.gaussian_sigma, axis=0, mode="nearest")
        out = smoothed[::s]
    if spec.noise_sigma > 0:
        rng = np.random.default_rng(spec.noise_seed)
        out = out + rng.normal(0.0, spec.noise_sigma, size=out.shape)
    dz, dy, dx = v.spacing
    return v.with_data(out.astype(np.float32), spacing=(dz * s, dy, dx))


def upsampled_length(zin, s):
    # round half up, not banker's rounding
    return int(np.floor(s * zin + 0.5))


def target_coordinates(zin, zout):
    """Input-index positions sampled by the upsampler.

    Cell-centred: output slice j covers the same physical extent as the
    j-th of ``zout`` equal cells spanning the input, so its centre sits at
    ``(j + 0.5) * zin / zout - 0.5``. The first and last few positions fall
    just outside ``[0, zin - 1]`` and are clipped onto it, so the spline is
    never extrapolated.
    """
    t = (np.arange(zout, dtype=np.float64) + 0.5) * (zin / zout) - 0.5
    return np.clip(t, 0.0, zin - 1.0)


def upsample_cubic(v, s):
    """Resample along Z with a cubic spline, yielding ``round(s * Z)`` slices.

    Samples are taken at ``target_coordinates`` (uniform spacing Z / Zout,
    about 1 / s, centred on the input). A slab-averaged slice therefore maps
    back onto the centre of the thin slices it came from. Results are
    clipped to the input's [min, max].
    """
    s = float(s)
    if not 1.0 <= s <= MAX_UPSAMPLE:
        raise RangeError(f"upsampling factor must lie in [1, {MAX_UPSAMPLE:g}], got {s}")
    zin = v.shape[0]
    if zin < 4:
        raise DimensionError(f"cubic spline needs >= 4 slices, got {zin}")
    zout = upsampled_length(zin, s)
    x = v.data.astype(np.float64)
    if zout == zin:
        out = x
    else:
        knots = np.arange(zin, dtype=np.float64)
        out = CubicSpline(knots, x, axis=0, bc_type="not-a-knot")(target_coordinates(zin, zout))
        out = np.clip(out, x.min(), x.max())
    dz, dy, dx = v.spacing
    return v.with_data(out.astype(np.float32), spacing=(dz / s, dy, dx))


def tricubic_interpolate(v, s):
    """Interpolation baseline; through-plane cubic spline only (in-plane is native)."""
    return upsample_cubic(v, s)
