"""Two-stage training: MSE pre-training, then perceptual + adversarial tuning."""
from __future__ import annotations

import copy
import hashlib
import json
import logging
import math
import tempfile
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .checkpoint import save_checkpoint
from .dataset import load_batch
from .errors import ConfigurationError, NumericalError
from .losses import LossWeights, PerceptualConfig, gan_loss_d, load_extractor, mse_loss, total_generator_loss
from .model import Discriminator, DiscriminatorConfig, MultiScaleCheckpoint, MultiScaleGenerator

log = logging.getLogger(__name__)

STAGES = ("mse", "perceptual_gan")


@dataclass
class TrainConfig:
    lr_init: float = 3e-4
    lr_decay_factor: float = 3.0
    max_decay_cycles: int = 3
    batch_size: int = 4
    stage: str = "mse"
    weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 0
    max_epochs: int = 100
    d_steps_per_g_step: int = 1
    min_rel_improvement: float = 1e-4
    betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    max_steps_per_epoch: int | None = None
    dump_dir: str | None = None

    def __post_init__(self):
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        self.betas = tuple(self.betas)
        if not self.lr_init > 0:
            raise ConfigurationError("lr_init must be > 0")
        if not self.lr_decay_factor > 1:
            raise ConfigurationError("lr_decay_factor must be > 1")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1")
        if self.stage not in STAGES:
            raise ConfigurationError(f"stage must be one of {STAGES}")
        if self.d_steps_per_g_step < 1:
            raise ConfigurationError("d_steps_per_g_step must be >= 1")

    def to_dict(self):
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d


@dataclass
class TrainReport:
    records: list = field(default_factory=list)
    wall_time: float = 0.0
    checkpoint_path: str | None = None

    def to_jsonl(self):
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.records)

    def losses(self, key="train_loss"):
        return [r[key] for r in self.records]


# -- helpers -----------------------------------------------------------------

def params_digest(module_or_tensors):
    """SHA-256 over parameter bytes, for isolation checks."""
    items = module_or_tensors.state_dict().items() if hasattr(module_or_tensors, "state_dict") else module_or_tensors.items()
    h = hashlib.sha256()
    for name, t in sorted(items):
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def make_generator(gcfg, seed):
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return MultiScaleGenerator(gcfg)


def make_discriminator(dcfg, seed):
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed + 1)
        return Discriminator(dcfg)


def epoch_batches(manifest, split, scales, batch_size, seed, epoch, limit=None):
    """Seed-determined list of (scale, indices into split); one scale per batch."""
    rng = np.random.default_rng([seed, epoch])
    rows = manifest.split(split)
    queues = {}
    for s in scales:
        idx = np.array([i for i, e in enumerate(rows) if e["scale"] == s], dtype=np.int64)
        if len(idx):
            queues[s] = list(rng.permutation(idx))
    plan = []
    while queues and (limit is None or len(plan) < limit):
        s = sorted(queues)[int(rng.integers(len(queues)))]
        take, queues[s] = queues[s][:batch_size], queues[s][batch_size:]
        if not queues[s]:
            del queues[s]
        plan.append((s, [int(i) for i in take]))
    return plan


def to_batch(manifest, split, indices):
    pairs = load_batch(manifest, split, indices)
    x = torch.from_numpy(np.stack([p.input_patch for p in pairs]))[:, None]
    y = torch.from_numpy(np.stack([p.target_patch for p in pairs]))[:, None]
    return x, y


def _optimizer(params, tcfg):
    return torch.optim.Adam(params, lr=tcfg.lr_init, betas=tcfg.betas, eps=tcfg.adam_eps)


def _set_lr(opt, lr):
    for group in opt.param_groups:
        group["lr"] = lr


def _optim_tensors(opt, module):
    names = {id(p): n for n, p in module.named_parameters()}
    out = {}
    for p, state in opt.state.items():
        for k, v in state.items():
            out[f"{names[id(p)]}.{k}"] = v.detach().clone().float() if torch.is_tensor(v) else torch.tensor(float(v))
    return out


def _restore_optim(opt, module, tensors):
    for n, p in module.named_parameters():
        if f"{n}.step" in tensors:
            opt.state[p] = {
                "step": tensors[f"{n}.step"].clone(),
                "exp_avg": tensors[f"{n}.exp_avg"].clone().to(p.dtype),
                "exp_avg_sq": tensors[f"{n}.exp_avg_sq"].clone().to(p.dtype),
            }


def _dump_and_raise(tcfg, what, gen, info):
    dump_dir = Path(tcfg.dump_dir or tempfile.mkdtemp(prefix="soupsr-nan-"))
    dump_dir.mkdir(parents=True, exist_ok=True)
    state = {k: v for k, v in gen.state_dict().items()}
    finite = {k: bool(torch.isfinite(v).all()) for k, v in state.items()}
    (dump_dir / "diagnostics.json").write_text(json.dumps({**info, "finite_tensors": finite}, indent=1, default=str))
    torch.save(state, dump_dir / "generator_state.pt")
    raise NumericalError(f"non-finite {what}; state dumped to {dump_dir}", {**info, "dump_dir": str(dump_dir)})


def _check_splits(manifest, scales):
    for split in ("train", "val"):
        if not [e for e in manifest.split(split) if e["scale"] in scales]:
            raise ConfigurationError(f"manifest has no {split} patches at scales {list(scales)}")


def validation_mse(gen, manifest, scales, batch_size):
    """Mean per-patch MSE over the validation split."""
    rows = manifest.split("val")
    total, count = 0.0, 0
    with torch.no_grad():
        for s in scales:
            idx = [i for i, e in enumerate(rows) if e["scale"] == s]
            for start in range(0, len(idx), batch_size):
                x, y = to_batch(manifest, "val", idx[start : start + batch_size])
                pred = gen(x.to(_dtype(gen)), s)
                per = ((pred - y.to(pred.dtype)) ** 2).mean(dim=(1, 2, 3, 4))
                total += float(per.sum())
                count += len(per)
    return total / count


def _dtype(module):
    return next(module.parameters()).dtype


# -- stage 1 -----------------------------------------------------------------

def _state_checkpoint(gen, opt, tcfg, gcfg, stage, scalars, best_state):
    ckpt = MultiScaleCheckpoint.from_generator(gen, stage=stage)
    ckpt.manifest = {"train_config": tcfg.to_dict(), "generator_config": gcfg.to_dict(), "state": scalars,
                     "optimizer": {"name": "adam", "betas": list(tcfg.betas), "eps": tcfg.adam_eps}}
    ckpt.extras["optim"] = _optim_tensors(opt, gen)
    if best_state is not None:
        ckpt.extras["best"] = best_state
    return ckpt


def _history_digest(records):
    return hashlib.sha256(json.dumps(records, sort_keys=True).encode()).hexdigest()


def train_stage1(manifest, gcfg, tcfg, resume=None, state_path=None, on_epoch=None):
    """MSE pre-training with plateau learning-rate decay.

    Args:
        manifest: DatasetManifest with train and val patches.
        gcfg: GeneratorConfig; only scales present in the manifest are trained.
        tcfg: TrainConfig with ``stage == "mse"``.
        resume: a checkpoint previously written to ``state_path`` to continue from.
        state_path: if given, the full training state (weights, Adam moments,
            schedule) is saved here after every epoch.
        on_epoch: optional callback receiving each epoch record.

    Returns:
        (best-validation checkpoint with stage ``mse_pretrained``, TrainReport)
    """
    if tcfg.stage != "mse":
        raise ConfigurationError(f"stage 1 needs stage='mse', got {tcfg.stage!r}")
    scales = [s for s in gcfg.scales if s in manifest.scales]
    _check_splits(manifest, scales)
    t0 = time.perf_counter()

    gen = make_generator(gcfg, tcfg.seed)
    opt = _optimizer(gen.parameters(), tcfg)
    st = {"epoch": 0, "lr": tcfg.lr_init, "decays": 0, "best_val": math.inf, "done": False}
    records, best_state = [], None
    if resume is not None:
        gen.load_state_dict(resume.state_dict())
        _restore_optim(opt, gen, resume.extras.get("optim", {}))
        saved = resume.manifest["state"]
        st.update({k: saved[k] for k in st})
        records = list(saved["history"])
        best_state = {k: v.clone() for k, v in resume.extras.get("best", {}).items()} or None

    while st["epoch"] < tcfg.max_epochs and not st["done"]:
        epoch = st["epoch"]
        _set_lr(opt, st["lr"])
        gen.train()
        plan = epoch_batches(manifest, "train", scales, tcfg.batch_size, tcfg.seed, epoch, tcfg.max_steps_per_epoch)
        losses = []
        for step, (s, idx) in enumerate(plan):
            x, y = to_batch(manifest, "train", idx)
            opt.zero_grad(set_to_none=True)
            loss = mse_loss(gen(x, s), y)
            if not torch.isfinite(loss):
                _dump_and_raise(tcfg, "training loss", gen, {"epoch": epoch, "step": step, "scale": s, "indices": idx})
            loss.backward()
            opt.step()
            losses.append(loss.item())
        gen.eval()
        val = validation_mse(gen, manifest, scales, tcfg.batch_size)
        if not math.isfinite(val):
            _dump_and_raise(tcfg, "validation loss", gen, {"epoch": epoch})
        train_loss = float(np.mean(losses))
        prev_best = st["best_val"]
        improved = val == 0.0 or prev_best == math.inf or val < prev_best * (1.0 - tcfg.min_rel_improvement)
        if val < prev_best:
            st["best_val"] = val
            best_state = {k: v.detach().clone() for k, v in gen.state_dict().items()}
        rec = {"epoch": epoch, "stage": "mse", "lr": st["lr"], "train_loss": train_loss, "val_loss": val,
               "component_breakdown": {"mse": train_loss}, "steps": len(plan)}
        records.append(rec)
        log.info("stage1 epoch %d lr %.3g train %.6g val %.6g", epoch, st["lr"], train_loss, val)
        if not improved:
            if st["decays"] < tcfg.max_decay_cycles:
                st["decays"] += 1
                st["lr"] = st["lr"] / tcfg.lr_decay_factor
            else:
                st["done"] = True
        st["epoch"] = epoch + 1
        if on_epoch:
            on_epoch(rec)
        if state_path is not None:
            save_checkpoint(_state_checkpoint(gen, opt, tcfg, gcfg, "mse_pretrained", {**st, "history": records}, best_state), state_path)

    best = make_generator(gcfg, tcfg.seed)
    best.load_state_dict(best_state if best_state is not None else gen.state_dict())
    ckpt = MultiScaleCheckpoint.from_generator(best, stage="mse_pretrained")
    ckpt.manifest = {"version": 1, "seed": tcfg.seed, "train_config": tcfg.to_dict(),
                     "trained_scales": scales, "best_val_loss": st["best_val"],
                     "history_digest": _history_digest(records), "epochs": len(records),
                     "optimizer": {"name": "adam", "betas": list(tcfg.betas), "eps": tcfg.adam_eps}}
    return ckpt, TrainReport(records, time.perf_counter() - t0)


# -- stage 2 -----------------------------------------------------------------

def discriminator_step(gen, disc, opt_d, x, y, s):
    """One D update on (real = y, fake = G(x)); the generator is untouched."""
    with torch.no_grad():
        fake = gen(x, s)
    opt_d.zero_grad(set_to_none=True)
    loss = gan_loss_d(disc(y), disc(fake))
    loss.backward()
    opt_d.step()
    return loss.item()


def generator_step(gen, disc, opt_g, x, y, s, weights, pcfg, extractor):
    """One G update on the composite loss; D receives no update."""
    disc.requires_grad_(False)
    try:
        opt_g.zero_grad(set_to_none=True)
        pred = gen(x, s)
        total, breakdown = total_generator_loss(pred, y, disc(pred), weights, pcfg, extractor)
        if not torch.isfinite(total):
            return total, breakdown
        total.backward()
        opt_g.step()
    finally:
        disc.requires_grad_(True)
    return total, breakdown


def validation_total(gen, disc, manifest, scales, tcfg, pcfg, extractor):
    rows = manifest.split("val")
    sums = {"perceptual": 0.0, "gan": 0.0, "mse": 0.0, "total": 0.0}
    count = 0
    with torch.no_grad():
        for s in scales:
            idx = [i for i, e in enumerate(rows) if e["scale"] == s]
            for start in range(0, len(idx), tcfg.batch_size):
                chunk = idx[start : start + tcfg.batch_size]
                x, y = to_batch(manifest, "val", chunk)
                pred = gen(x, s)
                _, b = total_generator_loss(pred, y, disc(pred), tcfg.weights, pcfg, extractor)
                for k in sums:
                    sums[k] += b[k] * len(chunk)
                count += len(chunk)
    return {k: v / count for k, v in sums.items()}


def train_stage2(ckpt, manifest, gcfg, dcfg, tcfg, pcfg=None, extractor=None, on_epoch=None):
    """Perceptual-GAN tuning initialized from a stage-1 checkpoint.

    Each step runs ``d_steps_per_g_step`` discriminator updates and then one
    generator update. Returns the best checkpoint by validation total loss;
    its ``extras["discriminator"]`` holds the matching discriminator.
    """
    if ckpt.stage != "mse_pretrained":
        raise ConfigurationError(f"stage 2 starts from an mse_pretrained checkpoint, got {ckpt.stage!r}")
    if tcfg.stage != "perceptual_gan":
        raise ConfigurationError(f"stage 2 needs stage='perceptual_gan', got {tcfg.stage!r}")
    pcfg = pcfg or PerceptualConfig()
    dcfg = dcfg or DiscriminatorConfig()
    extractor = extractor or load_extractor(pcfg)
    scales = [s for s in gcfg.scales if s in manifest.scales]
    _check_splits(manifest, scales)
    t0 = time.perf_counter()

    gen = make_generator(gcfg, tcfg.seed)
    gen.load_state_dict(ckpt.state_dict())
    disc = make_discriminator(dcfg, tcfg.seed)
    opt_g = _optimizer(gen.parameters(), tcfg)
    opt_d = _optimizer(disc.parameters(), tcfg)
    records = []
    best_val, best = math.inf, None

    for epoch in range(tcfg.max_epochs):
        gen.train()
        disc.train()
        plan = epoch_batches(manifest, "train", scales, tcfg.batch_size, tcfg.seed, epoch, tcfg.max_steps_per_epoch)
        sums = {"perceptual": 0.0, "gan": 0.0, "mse": 0.0, "total": 0.0, "d_loss": 0.0}
        for step, (s, idx) in enumerate(plan):
            x, y = to_batch(manifest, "train", idx)
            d_loss = 0.0
            for _ in range(tcfg.d_steps_per_g_step):
                d_loss = discriminator_step(gen, disc, opt_d, x, y, s)
            total, b = generator_step(gen, disc, opt_g, x, y, s, tcfg.weights, pcfg, extractor)
            if not (torch.isfinite(total) and math.isfinite(d_loss)):
                _dump_and_raise(tcfg, "stage-2 loss", gen, {"epoch": epoch, "step": step, "scale": s, "d_loss": d_loss, **b})
            for k in ("perceptual", "gan", "mse", "total"):
                sums[k] += b[k]
            sums["d_loss"] += d_loss
        n = max(1, len(plan))
        means = {k: v / n for k, v in sums.items()}
        gen.eval()
        disc.eval()
        val = validation_total(gen, disc, manifest, scales, tcfg, pcfg, extractor)
        rec = {"epoch": epoch, "stage": "perceptual_gan", "lr": tcfg.lr_init, "train_loss": means["total"],
               "val_loss": val["total"], "component_breakdown": means, "val_breakdown": val, "steps": len(plan)}
        records.append(rec)
        log.info("stage2 epoch %d train %.6g val %.6g", epoch, means["total"], val["total"])
        if val["total"] < best_val or best is None:
            best_val = val["total"]
            best = (copy.deepcopy(gen.state_dict()), copy.deepcopy(disc.state_dict()))
        if on_epoch:
            on_epoch(rec)

    out_gen = make_generator(gcfg, tcfg.seed)
    out_gen.load_state_dict(best[0])
    out = MultiScaleCheckpoint.from_generator(out_gen, stage="perceptual_gan")
    out.extras["discriminator"] = {k: v.clone() for k, v in best[1].items()}
    out.manifest = {"version": 1, "seed": tcfg.seed, "train_config": tcfg.to_dict(), "trained_scales": scales,
                    "discriminator_config": dcfg.to_dict(), "perceptual": {"feature_layer": pcfg.feature_layer,
                    "planes": list(pcfg.planes), "extractor_source": extractor.source},
                    "best_val_loss": best_val, "history_digest": _history_digest(records), "epochs": len(records),
                    "parent": ckpt.manifest.get("history_digest")}
    return out, TrainReport(records, time.perf_counter() - t0)
