"""Pixel, tri-planar perceptual and adversarial losses for the generator.

The perceptual term slices both volumes along each principal axis, feeds
every slice (gray replicated to RGB) through a frozen 2D VGG19 truncated at
the requested layer, and averages squared feature differences.
"""
from __future__ import annotations

import logging
import os
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigurationError, DimensionError, NumericalError, ShapeError

log = logging.getLogger(__name__)

PLANE_AXIS = {"axial": 0, "coronal": 1, "sagittal": 2}
IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)
VGG19_BLOCKS = (2, 2, 4, 4, 4)
WEIGHTS_FILENAME = "vgg19_features.soup"


@dataclass
class PerceptualConfig:
    feature_layer: str = "block5_conv4_preactivation"
    planes: tuple = ("axial", "sagittal", "coronal")
    slice_batch: int = 64
    channel_mode: str = "replicate_gray_to_3"
    weights_path: str | None = None
    min_size: int = 32
    upscale_small: bool = True

    def __post_init__(self):
        self.planes = tuple(self.planes)
        if not self.planes or any(p not in PLANE_AXIS for p in self.planes):
            raise ConfigurationError(f"planes must be a non-empty subset of {tuple(PLANE_AXIS)}")
        if self.slice_batch < 1:
            raise ConfigurationError("slice_batch must be > 0")
        if self.channel_mode != "replicate_gray_to_3":
            raise ConfigurationError(f"unsupported channel_mode {self.channel_mode!r}")
        _parse_layer(self.feature_layer)


@dataclass
class LossWeights:
    lambda_gan: float = 0.01
    mu_mse: float = 0.001

    def __post_init__(self):
        for name in ("lambda_gan", "mu_mse"):
            value = float(getattr(self, name))
            if not (value >= 0 and value < float("inf")):
                raise ConfigurationError(f"{name} must be finite and non-negative")
            setattr(self, name, value)


def _parse_layer(name):
    m = re.fullmatch(r"block([1-5])_conv([1-4])_(preactivation|activation)", name)
    if not m:
        raise ConfigurationError(f"feature layer {name!r} is not of the form blockB_convC_(pre)activation")
    block, conv, when = int(m.group(1)), int(m.group(2)), m.group(3)
    if conv > VGG19_BLOCKS[block - 1]:
        raise ConfigurationError(f"VGG19 block {block} has only {VGG19_BLOCKS[block - 1]} convolutions")
    return block, conv, when == "activation"


def vgg19_layer_index(name):
    """Index into ``torchvision.models.vgg19().features`` of the named output."""
    block, conv, after = _parse_layer(name)
    # each block: (conv, relu) * n followed by a max-pool
    idx = sum(2 * n + 1 for n in VGG19_BLOCKS[: block - 1]) + 2 * (conv - 1)
    return idx + 1 if after else idx


class FeatureExtractor(nn.Module):
    """Frozen VGG19 prefix with gray-to-RGB replication and ImageNet scaling."""

    def __init__(self, feature_layer="block5_conv4_preactivation", min_size=32, upscale_small=True):
        super().__init__()
        from torchvision.models import vgg19

        last = vgg19_layer_index(feature_layer)
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(0)
            full = vgg19(weights=None).features
        self.features = nn.Sequential(*list(full.children())[: last + 1])
        self.feature_layer = feature_layer
        self.min_size = min_size
        self.upscale_small = upscale_small
        self.source = "random-init(seed=0)"
        self.register_buffer("mean", torch.tensor(IMAGENET_MEAN).view(1, 3, 1, 1))
        self.register_buffer("std", torch.tensor(IMAGENET_STD).view(1, 3, 1, 1))
        self.requires_grad_(False)
        self.eval()

    def load_weights(self, tensors, source):
        own = self.features.state_dict()
        missing = [k for k in own if k not in tensors]
        if missing:
            raise ConfigurationError(f"extractor weights from {source} lack {missing[:3]}")
        self.features.load_state_dict({k: tensors[k] for k in own})
        self.source = str(source)

    def prepare(self, images):
        """(N, 1, H, W) in [0, 1] -> normalized (N, 3, H', W'); returns (x, upscaled)."""
        h, w = images.shape[-2:]
        upscaled = h < self.min_size or w < self.min_size
        if upscaled:
            if not self.upscale_small:
                raise DimensionError(f"slice {h}x{w} is below the extractor minimum {self.min_size}")
            size = (max(h, self.min_size), max(w, self.min_size))
            images = F.interpolate(images, size=size, mode="bilinear", align_corners=False)
        x = images.expand(-1, 3, -1, -1)
        return (x - self.mean.to(x.dtype)) / self.std.to(x.dtype), upscaled

    def forward(self, images):
        x, _ = self.prepare(images)
        return self.features(x)


_EXTRACTORS = {}


def _weights_candidates(cfg):
    if cfg.weights_path:
        yield Path(cfg.weights_path)
    cache = os.environ.get("SOUPSR_CACHE")
    if cache:
        yield Path(cache) / WEIGHTS_FILENAME


def load_extractor(cfg=None):
    """Feature extractor for ``cfg``; cached per (layer, weights source).

    Weights come from ``cfg.weights_path`` or ``$SOUPSR_CACHE/vgg19_features.soup``
    (tensor names as in ``torchvision`` VGG19 ``features``). Without either, a
    fixed seeded random initialization is used and a warning is logged.
    """
    from .checkpoint import load_tensor_archive

    cfg = cfg or PerceptualConfig()
    path = next((p for p in _weights_candidates(cfg) if p.exists()), None)
    if cfg.weights_path and path is None:
        raise ConfigurationError(f"perceptual.weights_path {cfg.weights_path} does not exist")
    key = (cfg.feature_layer, cfg.min_size, cfg.upscale_small, None if path is None else str(path.resolve()))
    if key not in _EXTRACTORS:
        ext = FeatureExtractor(cfg.feature_layer, cfg.min_size, cfg.upscale_small)
        if path is not None:
            tensors, _ = load_tensor_archive(path)
            ext.load_weights(tensors, path)
        else:
            log.warning("no VGG19 weights found; perceptual loss uses a fixed random extractor")
        _EXTRACTORS[key] = ext
    return _EXTRACTORS[key]


def export_torchvision_vgg19(path):
    """Write torchvision's pretrained VGG19 ``features`` weights as a .soup archive."""
    from torchvision.models import VGG19_Weights, vgg19

    from .checkpoint import save_tensor_archive

    feats = vgg19(weights=VGG19_Weights.IMAGENET1K_V1).features
    save_tensor_archive(path, feats.state_dict(), {"kind": "vgg19_features", "source": "torchvision IMAGENET1K_V1"})


# -- pixel and perceptual terms ----------------------------------------------

def _as_tensor(a):
    # python scalars and lists keep double precision
    return a if torch.is_tensor(a) else torch.as_tensor(np.asarray(a, dtype=np.float64))


def mse_loss(pred, target):
    pred, target = _as_tensor(pred), _as_tensor(target)
    if pred.shape != target.shape:
        raise ShapeError(f"shape mismatch {tuple(pred.shape)} vs {tuple(target.shape)}")
    return ((pred - target) ** 2).mean()


def _as_batch(v):
    v = _as_tensor(v)
    if v.dim() == 3:
        return v[None]
    if v.dim() == 5 and v.shape[1] == 1:
        return v[:, 0]
    if v.dim() == 4:
        return v
    raise ShapeError(f"expected (Z,Y,X), (N,Z,Y,X) or (N,1,Z,Y,X), got {tuple(v.shape)}")


def plane_slices(vol, plane):
    """(N, Z, Y, X) -> (N * K, 1, H, W) stack of 2D slices along the plane's axis."""
    axis = PLANE_AXIS[plane] + 1
    s = vol.movedim(axis, 1)
    n, k, h, w = s.shape
    return s.reshape(n * k, 1, h, w)


def single_plane_loss(pred, target, plane, extractor, slice_batch=64):
    """Mean over slices of the per-slice mean squared feature difference."""
    p = plane_slices(_as_batch(pred), plane)
    t = plane_slices(_as_batch(target), plane)
    total = p.new_zeros(())
    upscaled = False
    for start in range(0, p.shape[0], slice_batch):
        xp, up = extractor.prepare(p[start : start + slice_batch])
        fp = extractor.features(xp)
        with torch.no_grad():
            xt, _ = extractor.prepare(t[start : start + slice_batch])
            ft = extractor.features(xt)
        upscaled |= up
        if not (torch.isfinite(fp).all() and torch.isfinite(ft).all()):
            raise NumericalError(f"non-finite features on the {plane} plane")
        total = total + ((fp - ft) ** 2).sum()
    per_slice = fp[0].numel()
    return total / (p.shape[0] * per_slice), upscaled


def perceptual_loss_3d(pred, target, cfg=None, extractor=None, details=None):
    """Tri-planar perceptual distance, the unweighted mean over ``cfg.planes``.

    Args:
        pred, target: volumes shaped (Z,Y,X), (N,Z,Y,X) or (N,1,Z,Y,X).
        cfg: PerceptualConfig; defaults to VGG19 block5_conv4 before activation.
        extractor: override the extractor built from ``cfg``.
        details: optional dict that receives per-plane values and whether
            slices were upscaled to the extractor minimum.
    """
    cfg = cfg or PerceptualConfig()
    pred, target = _as_tensor(pred), _as_tensor(target)
    if pred.shape != target.shape:
        raise ShapeError(f"shape mismatch {tuple(pred.shape)} vs {tuple(target.shape)}")
    extractor = extractor or load_extractor(cfg)
    extractor = extractor.to(pred.dtype)
    per_plane = {}
    upscaled = False
    for plane in cfg.planes:
        per_plane[plane], up = single_plane_loss(pred, target, plane, extractor, cfg.slice_batch)
        upscaled |= up
    loss = torch.stack([per_plane[p] for p in cfg.planes]).mean()
    if details is not None:
        details["planes"] = {p: float(v.detach()) for p, v in per_plane.items()}
        details["upscaled"] = upscaled
    return loss


# -- adversarial terms -------------------------------------------------------

def _logits(x):
    t = _as_tensor(x)
    if not t.is_floating_point():
        t = t.double()
    return t.reshape(-1)


def gan_loss_d(logits_real, logits_fake):
    """Discriminator objective: mean -log sigma(real) + mean -log(1 - sigma(fake))."""
    real, fake = _logits(logits_real), _logits(logits_fake)
    return F.softplus(-real).mean() + F.softplus(fake).mean()


def gan_loss_g(logits_fake):
    """Non-saturating generator objective: mean -log sigma(fake)."""
    return F.softplus(-_logits(logits_fake)).mean()


def total_generator_loss(pred, target, logits_fake, w=None, cfg=None, extractor=None):
    """Perceptual + lambda * adversarial + mu * MSE.

    Returns:
        (total, breakdown) where breakdown holds the three weighted addends,
        their sum, and whether perceptual slices were upscaled.
    """
    w = w or LossWeights()
    details = {}
    per = perceptual_loss_3d(pred, target, cfg, extractor, details)
    gan = gan_loss_g(logits_fake).to(per.dtype)
    mse = mse_loss(pred, target).to(per.dtype)
    total = per + w.lambda_gan * gan + w.mu_mse * mse
    breakdown = {
        "perceptual": float(per),
        "gan": float(w.lambda_gan * gan),
        "mse": float(w.mu_mse * mse),
        "total": float(total),
        "upscaled": details["upscaled"],
        "planes": details["planes"],
    }
    return total, breakdown
