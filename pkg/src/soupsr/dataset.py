"""Paired 32^3 patch corpus: degrade, pre-upsample, tile, shuffle, split 8:1:1.

The manifest only stores patch descriptors. Pixels are recomputed from the
source volumes when a batch is requested.
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .degradation import DegradationSpec, degrade, upsample_cubic
from .errors import ConfigurationError, DataError, RangeError
from .volume_io import load_volume, normalize

log = logging.getLogger(__name__)

PATCH = 32
SPLITS = ("train", "val", "test")
MANIFEST_VERSION = 1


@dataclass
class PatchPair:
    input_patch: np.ndarray
    target_patch: np.ndarray
    volume_id: str
    offset: tuple
    split: str
    scale: int


@dataclass
class DatasetManifest:
    """Descriptors for every patch pair plus what is needed to rebuild them.

    ``entries`` rows are dicts ``{volume_id, scale, offset, split}`` in
    shuffled order. ``sources`` rows hold ``{volume_id, path, sha256, dims}``.
    """

    entries: list
    seed: int
    ratios: tuple
    source_specs: list
    sources: list
    stride: int = PATCH
    split_by: str = "patch"
    skipped: list = field(default_factory=list)
    _volumes: dict = field(default_factory=dict, repr=False, compare=False)
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def split(self, name):
        return [e for e in self.entries if e["split"] == name]

    def split_sizes(self):
        return {name: len(self.split(name)) for name in SPLITS}

    @property
    def scales(self):
        return sorted({e["scale"] for e in self.entries})

    def attach(self, volumes):
        """Register in-memory volumes so pixels can be extracted without disk reads."""
        for v in volumes:
            self._volumes[v.id] = v

    def to_dict(self):
        return {
            "manifest_version": MANIFEST_VERSION,
            "seed": self.seed,
            "ratios": list(self.ratios),
            "stride": self.stride,
            "split_by": self.split_by,
            "patch_size": PATCH,
            "sources": self.sources,
            "source_specs": [
                {"volume_id": vid, "spec": spec.to_dict()} for vid, spec in self.source_specs
            ],
            "skipped": self.skipped,
            "entries": [
                {"volume_id": e["volume_id"], "scale": e["scale"], "offset": list(e["offset"]), "split": e["split"]}
                for e in self.entries
            ],
        }

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":")) + "\n"

    def save(self, path):
        Path(path).write_text(self.to_json())

    @classmethod
    def from_dict(cls, d):
        if d.get("manifest_version") != MANIFEST_VERSION:
            raise DataError(f"unsupported manifest version {d.get('manifest_version')!r}")
        return cls(
            entries=[
                {"volume_id": e["volume_id"], "scale": int(e["scale"]), "offset": tuple(e["offset"]), "split": e["split"]}
                for e in d["entries"]
            ],
            seed=int(d["seed"]),
            ratios=tuple(d["ratios"]),
            source_specs=[(s["volume_id"], DegradationSpec.from_dict(s["spec"])) for s in d["source_specs"]],
            sources=d["sources"],
            stride=int(d.get("stride", PATCH)),
            split_by=d.get("split_by", "patch"),
            skipped=d.get("skipped", []),
        )

    @classmethod
    def load(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text()))


def volume_digest(v):
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(v.data, dtype="<f4").tobytes())
    h.update(json.dumps([list(v.shape), list(v.spacing)]).encode())
    return h.hexdigest()


def split_counts(n, ratios=(0.8, 0.1, 0.1)):
    """Bucket sizes for ``n`` items: round train and val, test takes the rest.

    Gives (1843, 230, 231) for 2304 items and (1, 0, 0) for a single item.
    """
    if not math.isclose(sum(ratios), 1.0, abs_tol=1e-9) or any(r < 0 for r in ratios):
        raise ConfigurationError(f"split ratios must be non-negative and sum to 1, got {ratios}")
    train = min(n, int(math.floor(ratios[0] * n + 0.5)))
    val = min(n - train, int(math.floor(ratios[1] * n + 0.5)))
    return train, val, n - train - val


def center_crop(a, dims):
    starts = [(s - d) // 2 for s, d in zip(a.shape, dims)]
    return a[tuple(slice(st, st + d) for st, d in zip(starts, dims))]


def aligned_pair(v, spec):
    """(network input, ground truth) arrays for one volume, cropped to common dims."""
    low = degrade(v, spec)
    up = upsample_cubic(low, spec.s)
    dims = tuple(min(a, b) for a, b in zip(up.shape, v.shape))
    return center_crop(up.data, dims), center_crop(v.data, dims)


def _tile_offsets(dims, stride):
    axes = [range(0, d - PATCH + 1, stride) for d in dims]
    return [(z, y, x) for z in axes[0] for y in axes[1] for x in axes[2]]


def _low_length(z, spec):
    return z // spec.s if spec.mode == "thin_to_thick" else -(-z // spec.s)


def _aligned_dims(shape, spec):
    z = shape[0]
    zlow = _low_length(z, spec)
    zup = int(math.floor(spec.s * zlow + 0.5))
    return (min(z, zup), shape[1], shape[2])


def build_dataset(volumes, spec, stride=PATCH, seed=0, ratios=(0.8, 0.1, 0.1), split_by="patch", paths=None):
    """Tile every volume into aligned patch pairs and assign splits.

    Args:
        volumes: Volumes (normalized to [0, 1] by the caller, or not).
        spec: one DegradationSpec, or a list of them to build a multi-scale corpus.
        stride: tiling stride in voxels, 1..32.
        seed: drives the shuffle; equal seeds and sources give equal manifests.
        split_by: ``"patch"`` shuffles pairs, ``"volume"`` keeps each volume in one split.
        paths: optional source paths recorded in the manifest.

    Returns:
        DatasetManifest with the volumes attached for pixel extraction.
    """
    specs = list(spec) if isinstance(spec, (list, tuple)) else [spec]
    if not 1 <= stride <= PATCH:
        raise ConfigurationError(f"stride must lie in [1, {PATCH}], got {stride}")
    if split_by not in ("patch", "volume"):
        raise ConfigurationError(f"split_by must be 'patch' or 'volume', got {split_by!r}")
    if len({v.id for v in volumes}) != len(volumes):
        raise ConfigurationError("volume ids must be unique")
    paths = list(paths) if paths is not None else [None] * len(volumes)

    entries, skipped, source_specs, sources = [], [], [], []
    for v, path in zip(volumes, paths):
        sources.append({"volume_id": v.id, "path": None if path is None else str(path),
                        "sha256": volume_digest(v), "dims": list(v.shape)})
        for sp in specs:
            source_specs.append((v.id, sp))
            if v.shape[0] < sp.s or _low_length(v.shape[0], sp) < 4:
                skipped.append({"volume_id": v.id, "scale": sp.s, "reason": "too few slices"})
                log.warning("skipping %s at s=%d: too few slices", v.id, sp.s)
                continue
            offsets = _tile_offsets(_aligned_dims(v.shape, sp), stride)
            if not offsets:
                skipped.append({"volume_id": v.id, "scale": sp.s, "reason": "smaller than one patch"})
                log.warning("skipping %s at s=%d: smaller than one patch after alignment", v.id, sp.s)
                continue
            entries.extend({"volume_id": v.id, "scale": sp.s, "offset": off, "split": None} for off in offsets)
    if not entries:
        raise ConfigurationError("no patches could be extracted from the given volumes")

    rng = np.random.default_rng(seed)
    if split_by == "patch":
        order = rng.permutation(len(entries))
        entries = [entries[i] for i in order]
        n_train, n_val, _ = split_counts(len(entries), ratios)
        for i, e in enumerate(entries):
            e["split"] = "train" if i < n_train else "val" if i < n_train + n_val else "test"
    else:
        ids = [v.id for v in volumes]
        ids = [ids[i] for i in rng.permutation(len(ids))]
        n_train, n_val, _ = split_counts(len(ids), ratios)
        assign = {vid: ("train" if i < n_train else "val" if i < n_train + n_val else "test") for i, vid in enumerate(ids)}
        order = rng.permutation(len(entries))
        entries = [entries[i] for i in order]
        for e in entries:
            e["split"] = assign[e["volume_id"]]

    manifest = DatasetManifest(entries=entries, seed=seed, ratios=tuple(ratios), source_specs=source_specs,
                               sources=sources, stride=stride, split_by=split_by, skipped=skipped)
    manifest.attach(volumes)
    return manifest


def _source_volume(manifest, volume_id):
    if volume_id in manifest._volumes:
        return manifest._volumes[volume_id]
    src = next((s for s in manifest.sources if s["volume_id"] == volume_id), None)
    if src is None or not src.get("path"):
        raise DataError(f"no pixels available for volume {volume_id!r}; attach it or record its path")
    v = normalize(load_volume(src["path"]))
    v = v.with_data(v.data, id=volume_id)
    if volume_digest(v) != src["sha256"]:
        raise DataError(f"source {src['path']} does not match the manifest hash")
    manifest._volumes[volume_id] = v
    return v


def _aligned_arrays(manifest, volume_id, scale):
    key = (volume_id, scale)
    if key not in manifest._cache:
        spec = next(sp for vid, sp in manifest.source_specs if vid == volume_id and sp.s == scale)
        manifest._cache[key] = aligned_pair(_source_volume(manifest, volume_id), spec)
    return manifest._cache[key]


def load_batch(manifest, split, indices):
    """Pixel-populated pairs for ``indices`` into the given split."""
    if split not in SPLITS:
        raise ConfigurationError(f"unknown split {split!r}")
    rows = manifest.split(split)
    out = []
    for i in indices:
        if not 0 <= i < len(rows):
            raise RangeError(f"index {i} outside split {split!r} of size {len(rows)}")
        e = rows[i]
        inp, tgt = _aligned_arrays(manifest, e["volume_id"], e["scale"])
        z, y, x = e["offset"]
        window = (slice(z, z + PATCH), slice(y, y + PATCH), slice(x, x + PATCH))
        out.append(PatchPair(input_patch=inp[window].copy(), target_patch=tgt[window].copy(),
                             volume_id=e["volume_id"], offset=tuple(e["offset"]), split=split, scale=e["scale"]))
    return out
