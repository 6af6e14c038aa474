"""Multi-scale 3D residual generator, patch discriminator and scale blending.

The generator works on volumes that were already cubic-upsampled along Z.
Every integer scale owns a small entry (pre) and exit (post) module around a
shared backbone; the exit's last convolution starts at zero so an untrained
network reproduces the cubic interpolation exactly.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from torch import nn
from torch.func import functional_call

from .degradation import upsample_cubic, upsampled_length
from .errors import ConfigurationError, DimensionError, NumericalError, RangeError, ShapeError

BLOCK_TYPES = ("plain_residual", "rrdb")


@dataclass
class GeneratorConfig:
    base_channels: int = 64
    n_residual_blocks: int = 8
    block_type: str = "plain_residual"
    scales: tuple = (2, 3, 4, 5, 6)
    growth_channels: int = 32

    def __post_init__(self):
        self.scales = tuple(sorted(int(s) for s in self.scales))
        if not self.scales:
            raise ConfigurationError("generator needs at least one scale")
        if list(self.scales) != list(range(self.scales[0], self.scales[-1] + 1)):
            raise ConfigurationError(f"scales must be consecutive integers, got {self.scales}")
        if self.n_residual_blocks < 1:
            raise ConfigurationError("n_residual_blocks must be >= 1")
        if self.block_type not in BLOCK_TYPES:
            raise ConfigurationError(f"block_type must be one of {BLOCK_TYPES}")

    def to_dict(self):
        d = asdict(self)
        d["scales"] = list(self.scales)
        return d


@dataclass
class DiscriminatorConfig:
    channels: tuple = (32, 64, 128, 256)
    input_patch: int = 32

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        if len(self.channels) < 2:
            raise ConfigurationError("discriminator needs at least 2 stages")

    def to_dict(self):
        return {"channels": list(self.channels), "input_patch": self.input_patch}


def conv3(cin, cout, stride=1):
    return nn.Conv3d(cin, cout, 3, stride=stride, padding=1)


class ResidualBlock(nn.Module):
    def __init__(self, channels):
        super().__init__()
        self.conv1 = conv3(channels, channels)
        self.conv2 = conv3(channels, channels)
        self.act = nn.LeakyReLU(0.2)

    def forward(self, x):
        return x + self.conv2(self.act(self.conv1(x)))


class ResidualDenseBlock(nn.Module):
    def __init__(self, channels, growth):
        super().__init__()
        self.convs = nn.ModuleList(conv3(channels + i * growth, growth) for i in range(4))
        self.fuse = conv3(channels + 4 * growth, channels)
        self.act = nn.LeakyReLU(0.2)

    def forward(self, x):
        feats = [x]
        for conv in self.convs:
            feats.append(self.act(conv(torch.cat(feats, 1))))
        return x + 0.2 * self.fuse(torch.cat(feats, 1))


class RRDB(nn.Module):
    def __init__(self, channels, growth):
        super().__init__()
        self.blocks = nn.Sequential(*(ResidualDenseBlock(channels, growth) for _ in range(3)))

    def forward(self, x):
        return x + 0.2 * self.blocks(x)


class Backbone(nn.Module):
    def __init__(self, cfg):
        super().__init__()
        c = cfg.base_channels
        if cfg.block_type == "rrdb":
            blocks = [RRDB(c, cfg.growth_channels) for _ in range(cfg.n_residual_blocks)]
        else:
            blocks = [ResidualBlock(c) for _ in range(cfg.n_residual_blocks)]
        self.blocks = nn.Sequential(*blocks)
        self.trunk = conv3(c, c)

    def forward(self, x):
        return x + self.trunk(self.blocks(x))


class ScaleEntry(nn.Module):
    def __init__(self, channels):
        super().__init__()
        self.conv = conv3(1, channels)
        self.act = nn.LeakyReLU(0.2)

    def forward(self, x):
        return self.act(self.conv(x))


class ScaleExit(nn.Module):
    def __init__(self, channels):
        super().__init__()
        self.conv1 = conv3(channels, channels)
        self.conv2 = conv3(channels, 1)
        self.act = nn.LeakyReLU(0.2)
        nn.init.zeros_(self.conv2.weight)
        nn.init.zeros_(self.conv2.bias)

    def forward(self, x):
        return self.conv2(self.act(self.conv1(x)))


class MultiScaleGenerator(nn.Module):
    """x -> x + exit_s(backbone(entry_s(x))) for an already-upsampled x."""

    def __init__(self, cfg):
        super().__init__()
        self.config = cfg
        self.backbone = Backbone(cfg)
        self.pre = nn.ModuleDict({str(s): ScaleEntry(cfg.base_channels) for s in cfg.scales})
        self.post = nn.ModuleDict({str(s): ScaleExit(cfg.base_channels) for s in cfg.scales})

    def forward(self, x, scale):
        key = str(int(scale))
        return x + self.post[key](self.backbone(self.pre[key](x)))


def _conv_depth(gen):
    # longest chain of 3x3x3 convs; each adds one voxel of context per side
    cfg = gen.config
    per_block = 2 if cfg.block_type == "plain_residual" else 3 * 5
    return 1 + cfg.n_residual_blocks * per_block + 1 + 2


class Discriminator(nn.Module):
    """Strided 3D conv classifier; returns one logit per patch."""

    def __init__(self, cfg=None):
        super().__init__()
        cfg = cfg or DiscriminatorConfig()
        self.config = cfg
        layers, cin = [], 1
        for c in cfg.channels:
            layers += [conv3(cin, c, stride=2), nn.LeakyReLU(0.2)]
            cin = c
        self.features = nn.Sequential(*layers)
        self.head = nn.Linear(cin, 1)
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    def forward(self, x):
        f = self.features(x).mean(dim=(2, 3, 4))
        return self.head(f).squeeze(1)


def discriminate(d, patch):
    """Logit for a single 32^3 patch (numpy array or tensor)."""
    p = torch.as_tensor(np.asarray(patch) if not torch.is_tensor(patch) else patch)
    n = d.config.input_patch
    if tuple(p.shape) != (n, n, n):
        raise ShapeError(f"discriminator expects a {n}^3 patch, got {tuple(p.shape)}")
    if not torch.isfinite(p).all():
        raise NumericalError("patch contains non-finite values")
    was_training = d.training
    d.eval()
    dtype = next(d.parameters()).dtype
    with torch.no_grad():
        logit = d(p.to(dtype)[None, None])[0]
    d.train(was_training)
    return float(logit)


# -- checkpoint object -------------------------------------------------------

@dataclass
class MultiScaleCheckpoint:
    """Shared backbone tensors plus per-scale entry/exit tensors.

    ``per_scale[s]`` maps ``"pre.<name>"`` / ``"post.<name>"`` to tensors.
    ``extras`` holds optional named tensor groups (discriminator weights,
    optimizer moments) that travel with the checkpoint archive.
    """

    backbone: dict
    per_scale: dict
    config: GeneratorConfig
    stage: str = "mse_pretrained"
    manifest: dict = field(default_factory=dict)
    extras: dict = field(default_factory=dict)

    @classmethod
    def from_generator(cls, gen, stage="mse_pretrained", manifest=None):
        sd = {k: v.detach().clone() for k, v in gen.state_dict().items()}
        backbone = {k[len("backbone."):]: v for k, v in sd.items() if k.startswith("backbone.")}
        per_scale = {}
        for s in gen.config.scales:
            entry = {}
            for part in ("pre", "post"):
                prefix = f"{part}.{s}."
                entry.update({f"{part}.{k[len(prefix):]}": v for k, v in sd.items() if k.startswith(prefix)})
            per_scale[s] = entry
        return cls(backbone, per_scale, gen.config, stage, dict(manifest or {}))

    def state_dict(self):
        sd = {f"backbone.{k}": v for k, v in self.backbone.items()}
        for s, entry in self.per_scale.items():
            for k, v in entry.items():
                part, rest = k.split(".", 1)
                sd[f"{part}.{s}.{rest}"] = v
        return sd

    def build_generator(self):
        gen = MultiScaleGenerator(self.config)
        gen.load_state_dict(self.state_dict())
        gen.eval()
        return gen

    def validate(self):
        missing = [s for s in self.config.scales if s not in self.per_scale]
        if missing:
            raise ConfigurationError(f"checkpoint lacks entry/exit modules for scales {missing}")
        ref = {k: tuple(v.shape) for k, v in self.per_scale[self.config.scales[0]].items()}
        for s, entry in self.per_scale.items():
            if {k: tuple(v.shape) for k, v in entry.items()} != ref:
                raise ConfigurationError(f"scale {s} modules differ in shape from scale {self.config.scales[0]}")
        for name, t in [*self.backbone.items(), *((k, v) for e in self.per_scale.values() for k, v in e.items())]:
            if not torch.isfinite(t).all():
                raise NumericalError(f"checkpoint tensor {name} has non-finite values")


def scale_bracket(ckpt, s):
    """(m, alpha) with s = m + alpha; alpha == 0 when s is a covered integer."""
    scales = ckpt.config.scales
    s = float(s)
    if not scales[0] <= s <= scales[-1]:
        raise RangeError(f"scale {s:g} outside the checkpoint's range [{scales[0]}, {scales[-1]}]")
    m = int(math.floor(s))
    alpha = s - m
    if m == scales[-1]:
        alpha = 0.0
    return m, alpha


def interpolate_params(ckpt, s):
    """Per-scale tensors for scale ``s`` as (1 - a) * theta_m + a * theta_{m+1}.

    Returns:
        (backbone, per_scale_tensors, m, alpha). The backbone dict is the
        checkpoint's own; endpoints are returned without arithmetic.
    """
    m, alpha = scale_bracket(ckpt, s)
    lower = ckpt.per_scale[m]
    if alpha == 0.0:
        return ckpt.backbone, lower, m, 0.0
    upper = ckpt.per_scale[m + 1]
    if alpha == 1.0:
        return ckpt.backbone, upper, m, 1.0
    blended = {k: (1.0 - alpha) * lower[k] + alpha * upper[k] for k in lower}
    return ckpt.backbone, blended, m, alpha


def _override_params(per_scale_tensors, m):
    out = {}
    for k, v in per_scale_tensors.items():
        part, rest = k.split(".", 1)
        out[f"{part}.{m}.{rest}"] = v
    return out


def run_generator(gen, ckpt, x, s):
    """Apply the (possibly blended) generator to an upsampled tensor batch."""
    _, tensors, m, alpha = interpolate_params(ckpt, s)
    if alpha == 0.0:
        return gen(x, m)
    return functional_call(gen, _override_params(tensors, m), (x, m), strict=False)


_GEN_CACHE = {}


def _generator_for(ckpt):
    key = id(ckpt)
    cached = _GEN_CACHE.get(key)
    if cached is None or cached[0] is not ckpt:
        _GEN_CACHE.clear()
        cached = (ckpt, ckpt.build_generator())
        _GEN_CACHE[key] = cached
    return cached[1]


def generate(ckpt, v, s, tile=64):
    """Super-resolve a volume along Z by factor ``s`` in [min scale, max scale].

    The volume is cubic-upsampled first, then corrected by the network. Large
    volumes are processed in Z tiles of ``tile`` output slices with enough
    overlap that each tile sees its full receptive field.
    """
    m, alpha = scale_bracket(ckpt, s)
    if v.shape[0] < 4:
        raise DimensionError(f"generate needs >= 4 slices, got {v.shape[0]}")
    up = upsample_cubic(v, s)
    gen = _generator_for(ckpt)
    dtype = next(gen.parameters()).dtype
    x = torch.from_numpy(np.array(up.data, dtype=np.float32)).to(dtype)
    z = x.shape[0]
    halo = _conv_depth(gen)
    out = torch.empty_like(x)
    step = z if tile is None or tile >= z else tile
    with torch.no_grad():
        for start in range(0, z, step):
            stop = min(z, start + step)
            lo, hi = max(0, start - halo), min(z, stop + halo)
            y = run_generator(gen, ckpt, x[lo:hi][None, None], s)[0, 0]
            out[start:stop] = y[start - lo : start - lo + (stop - start)]
    result = out.numpy().astype(np.float32)
    if not np.all(np.isfinite(result)):
        bad = int((~np.isfinite(result)).sum())
        raise NumericalError(f"generator produced {bad} non-finite voxels", {"scale": s, "m": m, "alpha": alpha})
    assert result.shape[0] == upsampled_length(v.shape[0], s)
    return up.with_data(result)
