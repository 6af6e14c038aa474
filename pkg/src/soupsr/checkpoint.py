"""``.soup`` archives: a zip holding ``manifest.json`` and raw float32 tensors.

Layout::

    manifest.json            {"format": "soup", "version": 1, "tensors": {name: shape}, ...}
    tensors/<name>.bin       little-endian float32, C order

The same container stores generator checkpoints and feature-extractor weights.
"""
from __future__ import annotations

import json
import zipfile
from pathlib import Path

import numpy as np
import torch

from .errors import CorruptionError, DataError
from .model import GeneratorConfig, MultiScaleCheckpoint, MultiScaleGenerator

FORMAT = "soup"
VERSION = 1


def save_tensor_archive(path, tensors, meta=None):
    """Write ``tensors`` (name -> tensor/array) with extra JSON ``meta``."""
    shapes = {}
    blobs = {}
    for name in sorted(tensors):
        arr = tensors[name]
        arr = arr.detach().cpu().numpy() if torch.is_tensor(arr) else np.asarray(arr)
        arr = np.ascontiguousarray(arr, dtype="<f4")
        shapes[name] = list(arr.shape)
        blobs[name] = arr.tobytes()
    manifest = {"format": FORMAT, "version": VERSION, "tensors": shapes, "meta": meta or {}}
    path = Path(path)
    tmp = path.with_name(path.name + ".part")
    # fixed timestamps keep archives byte-identical across runs
    stamp = (1980, 1, 1, 0, 0, 0)
    with zipfile.ZipFile(tmp, "w", compression=zipfile.ZIP_STORED) as zf:
        zf.writestr(zipfile.ZipInfo("manifest.json", stamp), json.dumps(manifest, sort_keys=True, indent=1))
        for name, blob in blobs.items():
            zf.writestr(zipfile.ZipInfo(f"tensors/{name}.bin", stamp), blob)
    tmp.replace(path)


def load_tensor_archive(path):
    """Inverse of `save_tensor_archive`: returns (tensors, meta)."""
    try:
        with zipfile.ZipFile(path) as zf:
            manifest = json.loads(zf.read("manifest.json"))
            if manifest.get("format") != FORMAT or manifest.get("version") != VERSION:
                raise CorruptionError(f"{path}: not a version-{VERSION} soup archive")
            tensors = {}
            for name, shape in manifest["tensors"].items():
                raw = zf.read(f"tensors/{name}.bin")
                if len(raw) != 4 * int(np.prod(shape, dtype=np.int64)):
                    raise CorruptionError(f"{path}: tensor {name} has {len(raw)} bytes for shape {shape}")
                arr = np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float32)
                tensors[name] = torch.from_numpy(arr)
    except (zipfile.BadZipFile, KeyError, json.JSONDecodeError, EOFError, zipfile.LargeZipFile) as exc:
        raise CorruptionError(f"{path}: unreadable archive ({exc})") from exc
    return tensors, manifest["meta"]


def save_checkpoint(ckpt, path):
    tensors = {f"backbone/{k}": v for k, v in ckpt.backbone.items()}
    for s, entry in ckpt.per_scale.items():
        tensors.update({f"scale/{s}/{k}": v for k, v in entry.items()})
    for group, named in ckpt.extras.items():
        tensors.update({f"extra/{group}/{k}": v for k, v in named.items()})
    meta = {
        "kind": "multiscale_generator",
        "stage": ckpt.stage,
        "config": ckpt.config.to_dict(),
        "manifest": ckpt.manifest,
    }
    save_tensor_archive(path, tensors, meta)


def load_checkpoint(path):
    """Read and validate a generator checkpoint against its stored config."""
    if not Path(path).exists():
        raise DataError(f"checkpoint {path} does not exist")
    tensors, meta = load_tensor_archive(path)
    if meta.get("kind") != "multiscale_generator":
        raise CorruptionError(f"{path}: archive does not hold a generator checkpoint")
    config = GeneratorConfig(**meta["config"])
    backbone, per_scale, extras = {}, {}, {}
    for name, t in tensors.items():
        head, rest = name.split("/", 1)
        if head == "backbone":
            backbone[rest] = t
        elif head == "scale":
            s, key = rest.split("/", 1)
            per_scale.setdefault(int(s), {})[key] = t
        elif head == "extra":
            group, key = rest.split("/", 1)
            extras.setdefault(group, {})[key] = t
    ckpt = MultiScaleCheckpoint(backbone, per_scale, config, meta["stage"], meta.get("manifest", {}), extras)

    with torch.device("meta"):
        reference = MultiScaleGenerator(config)
    expected = {k: tuple(v.shape) for k, v in reference.state_dict().items()}
    actual = {k: tuple(v.shape) for k, v in ckpt.state_dict().items()}
    if expected != actual:
        diff = sorted(set(expected.items()) ^ set(actual.items()))[:5]
        raise CorruptionError(f"{path}: tensor table does not match the stored config, e.g. {diff}")
    ckpt.validate()
    return ckpt
