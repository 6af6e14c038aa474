"""``soupsr`` command line: degrade, build-dataset, train, infer, evaluate.

Exit codes: 0 success, 1 usage or configuration error, 2 data or I/O error,
3 numerical abort. Every command writes a run manifest (resolved config,
seeds, input hashes, tool version) next to its main output unless
``--run-manifest`` names another path.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

from . import __version__
from .errors import ConfigurationError, NumericalError, SoupError, UsageError

log = logging.getLogger("soupsr")

MODES = {"thick": "thin_to_thick", "thin": "thin_to_thin", "gaussian": "gaussian"}


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad flags; usage problems are exit code 1 here
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


# -- provenance --------------------------------------------------------------

def file_sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def input_hashes(paths):
    out = {}
    for p in paths:
        p = Path(p)
        out[str(p)] = file_sha256(p)
        side = p.with_suffix(".json")
        if p.suffix == ".vol" and side.exists():
            out[str(side)] = file_sha256(side)
    return out


def write_run_manifest(path, command, argv, config, seed, inputs, outputs, extra=None):
    doc = {"tool": "soupsr", "version": __version__, "command": command, "argv": list(argv),
           "config": config, "seed": seed, "inputs": input_hashes(inputs),
           "outputs": [str(p) for p in outputs]}
    if extra:
        doc.update(extra)
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return doc


def _manifest_path(args, default):
    return Path(args.run_manifest) if args.run_manifest else Path(default)


def _sibling(path, suffix):
    p = Path(path)
    return p.parent / (p.name + suffix)


# -- train config ------------------------------------------------------------

def default_train_config():
    from .losses import PerceptualConfig
    from .model import DiscriminatorConfig, GeneratorConfig
    from .trainer import TrainConfig

    return {
        "dataset": None,
        "init_checkpoint": None,
        "resume": None,
        "train": TrainConfig().to_dict(),
        "generator": GeneratorConfig().to_dict(),
        "discriminator": DiscriminatorConfig().to_dict(),
        "perceptual": {**asdict(PerceptualConfig()), "planes": list(PerceptualConfig().planes)},
    }


def _merge(base, update, prefix=""):
    for k, v in update.items():
        key = f"{prefix}{k}"
        if k not in base:
            raise ConfigurationError(f"unknown config key {key!r}")
        if isinstance(base[k], dict) and isinstance(v, dict):
            _merge(base[k], v, key + ".")
        else:
            base[k] = v
    return base


def parse_override(text):
    """``a.b=value`` with value parsed as JSON, else taken as a string."""
    if "=" not in text:
        raise ConfigurationError(f"override {text!r} is not key=value")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value


def apply_override(cfg, key, value):
    node = cfg
    parts = key.split(".")
    for p in parts[:-1]:
        if not isinstance(node.get(p), dict):
            raise ConfigurationError(f"unknown config key {key!r}")
        node = node[p]
    if parts[-1] not in node:
        raise ConfigurationError(f"unknown config key {key!r}")
    node[parts[-1]] = value


def resolve_train_config(path=None, overrides=(), seed=None):
    cfg = default_train_config()
    if path is not None:
        try:
            user = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"{path}: invalid JSON ({exc})") from exc
        _merge(cfg, user)
    for text in overrides:
        apply_override(cfg, *parse_override(text))
    if seed is not None:
        cfg["train"]["seed"] = seed
    return cfg


def build_configs(cfg):
    from .losses import LossWeights, PerceptualConfig
    from .model import DiscriminatorConfig, GeneratorConfig
    from .trainer import TrainConfig

    try:
        t = dict(cfg["train"])
        t["weights"] = LossWeights(**t["weights"])
        return (TrainConfig(**t), GeneratorConfig(**cfg["generator"]),
                DiscriminatorConfig(**cfg["discriminator"]), PerceptualConfig(**cfg["perceptual"]))
    except TypeError as exc:
        raise ConfigurationError(str(exc)) from exc


# -- commands ----------------------------------------------------------------

def cmd_degrade(args, argv):
    from .degradation import DegradationSpec, degrade
    from .volume_io import load_volume, save_volume

    spec = DegradationSpec(MODES[args.mode], args.scale, gaussian_sigma=args.sigma,
                           noise_sigma=args.noise, noise_seed=args.seed)
    save_volume(degrade(load_volume(args.input), spec), args.output)
    write_run_manifest(_manifest_path(args, _sibling(args.output, ".run.json")), "degrade", argv,
                       {"spec": spec.to_dict()}, args.seed, [args.input], [args.output])


def cmd_build_dataset(args, argv):
    from .dataset import build_dataset
    from .degradation import DegradationSpec
    from .volume_io import load_volume, normalize

    specs = [DegradationSpec(MODES[args.mode], s, gaussian_sigma=args.sigma, noise_sigma=args.noise,
                             noise_seed=args.seed) for s in args.scales]
    vols = [normalize(load_volume(p)) for p in args.inputs]
    m = build_dataset(vols, specs, stride=args.stride, seed=args.seed, split_by=args.split_by, paths=args.inputs)
    m.save(args.output)
    log.info("dataset: %s", m.split_sizes())
    write_run_manifest(_manifest_path(args, _sibling(args.output, ".run.json")), "build-dataset", argv,
                       {"specs": [s.to_dict() for s in specs], "stride": args.stride, "split_by": args.split_by},
                       args.seed, args.inputs, [args.output], {"split_sizes": m.split_sizes()})


def cmd_train(args, argv):
    from .checkpoint import load_checkpoint, save_checkpoint
    from .dataset import DatasetManifest
    from .losses import load_extractor
    from .trainer import train_stage1, train_stage2

    cfg = resolve_train_config(args.config, args.set or (), args.seed)
    tcfg, gcfg, dcfg, pcfg = build_configs(cfg)
    if not cfg["dataset"]:
        raise ConfigurationError("config key 'dataset' (manifest path) is required")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n")
    manifest = DatasetManifest.load(cfg["dataset"])
    inputs = [cfg["dataset"]] + [s["path"] for s in manifest.sources if s.get("path")]
    report_path = out / "report.jsonl"
    report_path.write_text("")

    def on_epoch(rec):
        with open(report_path, "a") as f:
            f.write(json.dumps(rec, sort_keys=True) + "\n")

    if tcfg.stage == "mse":
        resume = load_checkpoint(cfg["resume"]) if cfg["resume"] else None
        if resume is not None:
            inputs.append(cfg["resume"])
        ckpt, rep = train_stage1(manifest, gcfg, tcfg, resume=resume, state_path=out / "state.soup", on_epoch=on_epoch)
    else:
        if not cfg["init_checkpoint"]:
            raise ConfigurationError("stage perceptual_gan needs 'init_checkpoint' (a stage-1 .soup)")
        init = load_checkpoint(cfg["init_checkpoint"])
        inputs.append(cfg["init_checkpoint"])
        ckpt, rep = train_stage2(init, manifest, gcfg, dcfg, tcfg, pcfg, load_extractor(pcfg), on_epoch=on_epoch)
    ckpt.manifest = {**ckpt.manifest, "config": cfg}
    save_checkpoint(ckpt, out / "model.soup")
    # rewrite in full so a resumed run still lists every epoch once
    report_path.write_text(rep.to_jsonl())
    write_run_manifest(_manifest_path(args, out / "run.json"), "train", argv, cfg, tcfg.seed, inputs,
                       [out / "model.soup", report_path], {"epochs": len(rep.records)})


def cmd_infer(args, argv):
    from .checkpoint import load_checkpoint
    from .model import generate, scale_bracket
    from .volume_io import denormalize, load_volume, normalize, save_volume

    ckpt = load_checkpoint(args.ckpt)
    m, alpha = scale_bracket(ckpt, args.scale)
    v = load_volume(args.input)
    out = generate(ckpt, normalize(v), args.scale, tile=args.tile)
    save_volume(denormalize(out), args.output)
    if alpha == 0.0:
        interp = {"path": "direct", "scale": m}
    else:
        interp = {"path": "interpolated", "m": m, "alpha": alpha, "endpoints": [m, m + 1]}
    write_run_manifest(_manifest_path(args, _sibling(args.output, ".run.json")), "infer", argv,
                       {"scale": args.scale, "tile": args.tile, "checkpoint_stage": ckpt.stage}, None,
                       [args.ckpt, args.input], [args.output], {"interpolation": interp})


def _parse_ckpt_arg(text):
    name, sep, path = text.partition("=")
    return (name, path) if sep else ("sr", text)


def cmd_evaluate(args, argv):
    from .checkpoint import load_checkpoint
    from .metrics import evaluate_methods, spec_map
    from .report import write_report
    from .volume_io import load_volume, normalize

    ckpts = {}
    for text in args.ckpt or ():
        name, path = _parse_ckpt_arg(text)
        if name in ckpts or name == "tricubic":
            raise ConfigurationError(f"duplicate method name {name!r}")
        ckpts[name] = load_checkpoint(path)
    methods = ["tricubic"] + list(ckpts)
    vols = [normalize(load_volume(p)) for p in args.inputs]
    specs = spec_map(args.scales, MODES[args.mode], args.sigma, args.noise)
    records = evaluate_methods(vols, specs, methods, ckpts)
    paths = write_report(records, args.out, plot_format=args.plot_format, test=args.test, plot=not args.no_plot)
    inputs = list(args.inputs) + [_parse_ckpt_arg(t)[1] for t in args.ckpt or ()]
    config = {"scales": list(args.scales), "mode": MODES[args.mode], "sigma": args.sigma, "noise": args.noise,
              "methods": methods, "test": args.test, "metric_scope": "whole_volume"}
    write_run_manifest(_manifest_path(args, Path(args.out) / "run.json"), "evaluate", argv, config, None,
                       inputs, list(paths.values()), {"n_records": len(records),
                       "n_errors": sum(r.error is not None for r in records)})


# -- parser ------------------------------------------------------------------

def build_parser():
    p = _Parser(prog="soupsr", description="Through-plane super-resolution for 3D volumes.")
    p.add_argument("--version", action="version", version=f"soupsr {__version__}")
    p.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    p.add_argument("--run-manifest", help="where to write the run manifest JSON")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def degradation_flags(sp, scale_flag):
        sp.add_argument("--mode", choices=sorted(MODES), default="thick")
        scale_flag(sp)
        sp.add_argument("--sigma", type=float, default=None, help="Gaussian profile sigma (mode gaussian)")
        sp.add_argument("--noise", type=float, default=0.0, help="additive noise sigma")

    d = sub.add_parser("degrade", help="simulate a low through-plane resolution volume")
    degradation_flags(d, lambda sp: sp.add_argument("--scale", type=int, required=True))
    d.add_argument("--seed", type=int, default=0, help="noise seed")
    d.add_argument("input")
    d.add_argument("output")

    b = sub.add_parser("build-dataset", help="tile volumes into a patch manifest")
    degradation_flags(b, lambda sp: sp.add_argument("--scales", type=int, nargs="+", required=True))
    b.add_argument("--stride", type=int, default=32)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--split-by", choices=["patch", "volume"], default="patch")
    b.add_argument("--out", dest="output", required=True, help="manifest JSON path")
    b.add_argument("inputs", nargs="+")

    t = sub.add_parser("train", help="run a training stage from a JSON config")
    t.add_argument("--config")
    t.add_argument("--set", action="append", metavar="KEY=VALUE", help="dotted config override, repeatable")
    t.add_argument("--seed", type=int, default=None)
    t.add_argument("--out", required=True, help="output directory")

    i = sub.add_parser("infer", help="super-resolve one volume")
    i.add_argument("--ckpt", required=True)
    i.add_argument("--scale", type=float, required=True)
    i.add_argument("--tile", type=int, default=64)
    i.add_argument("input")
    i.add_argument("output")

    e = sub.add_parser("evaluate", help="score tricubic and checkpoints over scales")
    degradation_flags(e, lambda sp: sp.add_argument("--scales", type=int, nargs="+", default=[2, 3, 4, 5, 6]))
    e.add_argument("--ckpt", action="append", metavar="[NAME=]PATH", help="learned method, repeatable")
    e.add_argument("--test", choices=["ttest", "wilcoxon"], default="ttest")
    e.add_argument("--plot-format", choices=["png", "svg"], default="png")
    e.add_argument("--no-plot", action="store_true")
    e.add_argument("--out", required=True, help="output directory")
    e.add_argument("inputs", nargs="+")
    return p


COMMANDS = {"degrade": cmd_degrade, "build-dataset": cmd_build_dataset, "train": cmd_train,
            "infer": cmd_infer, "evaluate": cmd_evaluate}


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"soupsr: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    logging.basicConfig(level=args.log_level, stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")
    try:
        COMMANDS[args.command](args, argv)
    except NumericalError as exc:
        print(f"soupsr: numerical abort: {exc}", file=sys.stderr)
        return exc.exit_code
    except SoupError as exc:
        print(f"soupsr: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"soupsr: I/O error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
