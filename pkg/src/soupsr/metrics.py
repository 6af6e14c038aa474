"""Volume quality metrics and method-vs-method evaluation sweeps."""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy import stats
from scipy.ndimage import correlate1d

from .dataset import center_crop
from .degradation import DegradationSpec, degrade, tricubic_interpolate
from .errors import DimensionError, InsufficientDataError, ShapeError

log = logging.getLogger(__name__)

SSIM_SIGMA = 1.5
SSIM_WINDOW = 11
SSIM_K1, SSIM_K2 = 0.01, 0.03
MIN_SSIM_WINDOW = 3


@dataclass
class MetricRecord:
    volume_id: str
    method: str
    scale: float
    rmse: float | None
    psnr: float | None
    ssim: float | None
    error: str | None = None

    def to_json_dict(self):
        d = asdict(self)
        if d["psnr"] == math.inf:
            d["psnr"] = "inf"
        return d


@dataclass
class SignificanceResult:
    method_a: str
    method_b: str
    scale: float
    metric: str
    p_value: float
    stars: str
    mean_difference: float
    n: int


def _pair(a, b):
    a = np.asarray(getattr(a, "data", a), dtype=np.float64)
    b = np.asarray(getattr(b, "data", b), dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch {a.shape} vs {b.shape}")
    return a, b


def rmse(a, b):
    a, b = _pair(a, b)
    return float(np.sqrt(np.mean((a - b) ** 2)))


def psnr(a, b):
    """20 log10(1 / rmse) for data on [0, 1]; ``inf`` for identical inputs."""
    e = rmse(a, b)
    return math.inf if e == 0 else 20.0 * math.log10(1.0 / e)


def gaussian_window(size, sigma=SSIM_SIGMA):
    r = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(r**2) / (2 * sigma**2))
    return g / g.sum()


def ssim_window_sizes(shape):
    """Per-axis Gaussian window length: 11, shrunk to the largest odd size that fits."""
    sizes = []
    for d in shape:
        w = min(SSIM_WINDOW, d if d % 2 else d - 1)
        if w < MIN_SSIM_WINDOW:
            raise DimensionError(f"axis of length {d} is below the minimum SSIM window {MIN_SSIM_WINDOW}")
        sizes.append(w)
    return sizes


def _filter_valid(x, windows):
    # separable correlation, then keep positions where the whole window fits
    for axis, w in enumerate(windows):
        x = correlate1d(x, w, axis=axis, mode="constant")
        half = (len(w) - 1) // 2
        idx = [slice(None)] * x.ndim
        idx[axis] = slice(half, x.shape[axis] - half)
        x = x[tuple(idx)]
    return x


def ssim(a, b, data_range=1.0):
    """Mean local SSIM under a separable Gaussian window (sigma 1.5, size 11).

    Works on arrays of any rank; axes shorter than 11 use a shorter odd
    window. Only positions where the full window fits are averaged.
    """
    a, b = _pair(a, b)
    windows = [gaussian_window(w) for w in ssim_window_sizes(a.shape)]
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    mu_a = _filter_valid(a, windows)
    mu_b = _filter_valid(b, windows)
    var_a = _filter_valid(a * a, windows) - mu_a**2
    var_b = _filter_valid(b * b, windows) - mu_b**2
    cov = _filter_valid(a * b, windows) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def ssim_slicewise(a, b, data_range=1.0):
    """Mean of 2D SSIM over axial slices (alternative to the volumetric window)."""
    a, b = _pair(a, b)
    return float(np.mean([ssim(a[k], b[k], data_range) for k in range(a.shape[0])]))


def score(recon, truth):
    recon, truth = _pair(recon, truth)
    return rmse(recon, truth), psnr(recon, truth), ssim(recon, truth)


# -- evaluation sweep --------------------------------------------------------

def reconstruct(method, low, s, checkpoints):
    if method == "tricubic":
        return tricubic_interpolate(low, s)
    if method not in checkpoints:
        raise KeyError(f"no checkpoint supplied for method {method!r}")
    from .model import generate

    return generate(checkpoints[method], low, s)


def evaluate_methods(hr, spec_by_scale, methods, ckpt=None):
    """Degrade, reconstruct and score every (volume, scale, method) cell.

    Args:
        hr: normalized ground-truth Volumes.
        spec_by_scale: scale -> DegradationSpec.
        methods: names such as ``tricubic``, ``sr_mse``, ``sr_soup``.
        ckpt: a checkpoint used for every learned method, or a dict
            method -> checkpoint.

    Returns:
        One MetricRecord per cell; a failing method yields a record with
        ``error`` set and empty metrics.
    """
    checkpoints = ckpt if isinstance(ckpt, dict) else {m: ckpt for m in methods if m != "tricubic" and ckpt is not None}
    records = []
    for v in hr:
        for scale in sorted(spec_by_scale):
            spec = spec_by_scale[scale]
            low = degrade(v, spec)
            for method in methods:
                try:
                    rec = reconstruct(method, low, scale, checkpoints)
                    dims = tuple(min(x, y) for x, y in zip(rec.shape, v.shape))
                    e, p, q = score(center_crop(rec.data, dims), center_crop(v.data, dims))
                    records.append(MetricRecord(v.id, method, float(scale), e, p, q))
                except Exception as exc:  # recorded, the sweep continues
                    log.warning("%s failed on %s at s=%g: %s", method, v.id, scale, exc)
                    records.append(MetricRecord(v.id, method, float(scale), None, None, None, f"{type(exc).__name__}: {exc}"))
    return records


def stars_for(p):
    if p < 0.001:
        return "**"
    if p < 0.05:
        return "*"
    return "none"


def paired_significance(records, metric, method_a, method_b, scale, test="ttest"):
    """Two-sided paired test of ``metric`` between two methods at one scale.

    Zero-variance differences are resolved without the test: all zero gives
    p = 1, a constant non-zero difference gives p = 0.
    """
    def by_volume(method):
        return {r.volume_id: getattr(r, metric) for r in records
                if r.method == method and r.scale == float(scale) and r.error is None}

    va, vb = by_volume(method_a), by_volume(method_b)
    common = sorted(set(va) & set(vb))
    if len(common) < 2:
        raise InsufficientDataError(f"need >= 2 paired volumes for {method_a} vs {method_b} at s={scale}, have {len(common)}")
    xa = np.array([va[k] for k in common], dtype=np.float64)
    xb = np.array([vb[k] for k in common], dtype=np.float64)
    if not (np.all(np.isfinite(xa)) and np.all(np.isfinite(xb))):
        raise InsufficientDataError(f"non-finite {metric} values cannot be tested")
    diff = xa - xb
    if np.all(diff == diff[0]):
        p = 1.0 if diff[0] == 0 else 0.0
    elif test == "wilcoxon":
        p = float(stats.wilcoxon(xa, xb).pvalue)
    else:
        p = float(stats.ttest_rel(xa, xb).pvalue)
    if not math.isfinite(p):
        p = 1.0
    return SignificanceResult(method_a, method_b, float(scale), metric, p, stars_for(p), float(diff.mean()), len(common))


def spec_map(scales, mode="thin_to_thick", gaussian_sigma=None, noise_sigma=0.0):
    return {s: DegradationSpec(mode, int(s), gaussian_sigma, noise_sigma) for s in scales}
