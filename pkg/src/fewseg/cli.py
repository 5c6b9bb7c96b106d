"""Command line entry point: train, eval, ablate, sweep-rate, synth.

Configuration comes from an optional YAML file (``--config``) layered over
built-in defaults; command-line flags override both. Everything is validated
before any data is generated or any model is built.
"""

from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import json
import logging
import os
import subprocess
import sys
import time
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .backbone import PROFILES, EncoderConfig
from .errors import ConfigError, FewSegError, GeometryMismatch, InvalidCombination
from .hf_adapter import HfaConfig
from .metrics import evaluate
from .model import ModelConfig, SegModel, build_model
from .ms_adapter import MsfaConfig
from .pipeline import gen_synthetic, load_dataset, preprocess_image, sample_exemplars, write_corpus
from .prompts import check_rate
from .training import TrainConfig, fixed_math, train

log = logging.getLogger("fewseg")

OUTPUT_ENV = "FEWSEG_OUTPUT_ROOT"
DEFAULT_OUTPUT_ROOT = "runs"

DEFAULTS = {
    "profile": "toy",
    "output_root": None,
    "encoder": {},
    "model": {
        "use_hfa": True,
        "use_msfa": True,
        "use_selector": True,
        "selector_bias": True,
        "freeze_decoder": False,
        "hfa_tau": HfaConfig().tau,
        "hfa_hidden_dim": HfaConfig().hidden_dim,
        "msfa_channel_reduction": MsfaConfig().channel_reduction,
        "msfa_per_layer": False,
    },
    "train": TrainConfig().to_dict(),
    "data": {"synthetic": True, "root": None, "count": 45, "seed": None, "window": 256},
}
ENCODER_KEYS = {f.name for f in fields(EncoderConfig)}

# argparse dest -> (section, key); section None means top level
FLAG_MAP = {
    "seed": ("train", "seed"),
    "prompt_setting": ("train", "prompt_setting"),
    "bbox_rate": ("train", "bbox_rate"),
    "exemplars": ("train", "exemplars"),
    "lr": ("train", "lr"),
    "lr_gamma": ("train", "lr_gamma"),
    "weight_decay": ("train", "weight_decay"),
    "epochs": ("train", "epochs"),
    "patience": ("train", "patience"),
    "freeze_decoder": ("model", "freeze_decoder"),
    "no_selector_bias": ("model", "selector_bias"),
    "hfa_tau": ("model", "hfa_tau"),
    "msfa_per_layer": ("model", "msfa_per_layer"),
    "profile": (None, "profile"),
    "output_root": (None, "output_root"),
    "data": ("data", "root"),
    "synthetic": ("data", "synthetic"),
    "count": ("data", "count"),
}

ABLATION_DEFAULT = ("hfa", "msfa", "hfa,msfa", "hfa,msfa,selector", "hfa,msfa,selector,bias")
TOGGLES = ("hfa", "msfa", "selector", "bias")


# ---------------------------------------------------------------- configuration


def _merge(base: dict, update: dict, where: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in (update or {}).items():
        path = f"{where}{key}"
        known = key in ENCODER_KEYS if where == "encoder." else key in out
        if not known:
            raise ConfigError(f"unknown config key {path!r}")
        if where != "encoder." and isinstance(out[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {path!r} must be a mapping")
            out[key] = _merge(out[key], value, f"{path}.")
        else:
            out[key] = value
    return out


def resolve_config(args) -> dict:
    """Defaults < config file < flags. Returns the plain resolved dictionary."""
    cfg = copy.deepcopy(DEFAULTS)
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise FileNotFoundError(f"config file not found: {path}")
        loaded = yaml.safe_load(path.read_text()) or {}
        if not isinstance(loaded, dict):
            raise ConfigError("config file must contain a mapping")
        cfg = _merge(cfg, loaded)
    for dest, (section, key) in FLAG_MAP.items():
        value = getattr(args, dest, None)
        if value is None:
            continue
        if dest == "no_selector_bias":
            value = not value
        if section is None:
            cfg[key] = value
        else:
            cfg[section][key] = value
    if cfg["data"]["root"] is not None and getattr(args, "synthetic", None) is None:
        cfg["data"]["synthetic"] = False
    return cfg


def build_configs(cfg: dict) -> tuple[ModelConfig, TrainConfig]:
    """Turn the resolved dictionary into validated config objects."""
    if cfg["profile"] not in PROFILES:
        raise ConfigError(f"unknown profile {cfg['profile']!r}; choose from {sorted(PROFILES)}")
    enc = EncoderConfig(**{**asdict(PROFILES[cfg["profile"]]), **cfg["encoder"]})
    m = cfg["model"]
    tcfg = TrainConfig(**cfg["train"])
    mcfg = ModelConfig(
        encoder=enc,
        hfa=HfaConfig(tau=float(m["hfa_tau"]), hidden_dim=int(m["hfa_hidden_dim"])),
        msfa=MsfaConfig(channel_reduction=int(m["msfa_channel_reduction"]), per_layer=bool(m["msfa_per_layer"])),
        use_hfa=bool(m["use_hfa"]),
        use_msfa=bool(m["use_msfa"]),
        use_selector=bool(m["use_selector"]),
        selector_bias=bool(m["selector_bias"]),
        freeze_decoder=bool(m["freeze_decoder"]),
        seed=tcfg.seed,
    )
    d = cfg["data"]
    if not d["synthetic"] and not d["root"]:
        raise ConfigError("no data source: pass --data ROOT or --synthetic")
    if d["synthetic"] and enc.input_size < 32:
        raise ConfigError("synthetic data needs input_size >= 32")
    if int(d["count"]) < 1:
        raise ConfigError("data.count must be >= 1")
    return mcfg, tcfg


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True, default=str).encode()).hexdigest()[:10]


def output_root(cfg: dict) -> Path:
    return Path(cfg.get("output_root") or os.environ.get(OUTPUT_ENV) or DEFAULT_OUTPUT_ROOT)


def make_run_dir(cfg: dict, kind: str) -> Path:
    root = output_root(cfg)
    stamp = time.strftime("%Y%m%d-%H%M%S")
    base = root / f"{kind}-{config_hash(cfg)}-{stamp}"
    path, i = base, 1
    while path.exists():
        path = Path(f"{base}-{i}")
        i += 1
    path.mkdir(parents=True)
    return path


def code_version() -> str:
    try:
        out = subprocess.run(["git", "rev-parse", "--short", "HEAD"], cwd=Path(__file__).parent,
                             capture_output=True, text=True, timeout=5)
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}+g{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def _write_yaml(path: Path, data: dict) -> None:
    path.write_text(yaml.safe_dump(data, sort_keys=True, default_flow_style=False))


# ---------------------------------------------------------------- data


def load_samples(cfg: dict, input_size: int) -> list:
    d = cfg["data"]
    if d["synthetic"]:
        seed = d["seed"] if d["seed"] is not None else cfg["train"]["seed"]
        return [preprocess_image(s) for s in gen_synthetic(int(d["count"]), input_size, seed)]
    return load_dataset(d["root"], window=int(d["window"]))


def split_exemplars(cfg: dict, samples: list):
    t = cfg["train"]
    return sample_exemplars(samples, int(t["exemplars"]), int(t["seed"]))


def eval_set(cfg: dict, samples: list) -> list:
    """Held-out samples: the non-exemplar groups for synthetic data, everything for a dataset root."""
    if cfg["data"]["synthetic"]:
        return split_exemplars(cfg, samples).eval_samples
    return samples


# ---------------------------------------------------------------- commands


def run_training(cfg: dict, mcfg: ModelConfig, tcfg: TrainConfig, run_dir: Path):
    samples = load_samples(cfg, mcfg.encoder.input_size)
    ex = split_exemplars(cfg, samples)
    with fixed_math():
        model = build_model(mcfg)
        _, record = train(model, ex, tcfg)
    ckpt = model.save(run_dir / "model.ckpt", extra={"train": tcfg.to_dict()})
    record.write_csv(run_dir / "epochs.csv")
    report = evaluate(model, ex.eval_samples, tcfg.prompt_setting, tcfg.bbox_rate) if ex.eval_samples else None
    if report is not None:
        report.write_csv(run_dir / "metrics.csv")
        report.write_summary(run_dir / "summary.json")
    _write_yaml(run_dir / "config.yaml", cfg)
    _write_yaml(run_dir / "manifest.yaml", {
        "code_version": code_version(),
        "config_hash": config_hash(cfg),
        "train_config": tcfg.to_dict(),
        "model_config": mcfg.to_dict(),
        "lr_schedule": f"lr * {tcfg.lr_gamma} ** (epoch // {tcfg.decay_step}); "
                       f"weight_decay {tcfg.weight_decay} is the Adam coefficient",
        "exemplar_volumes": ex.volumes,
        "n_train": record.n_train,
        "n_val": record.n_val,
        "weak_validation": record.weak_validation,
        "best_epoch": record.best_epoch,
        "best_val_dice": None if record.best_epoch is None else record.best_val_dice,
        "stop_reason": record.stop_reason,
        "frozen_hash_before": record.frozen_hash_before,
        "frozen_hash_after": record.frozen_hash_after,
        "checkpoint": ckpt.name,
        "heldout": None if report is None else report.aggregate(),
    })
    return model, record, report


def cmd_train(args, cfg) -> int:
    mcfg, tcfg = build_configs(cfg)
    run_dir = make_run_dir(cfg, "train")
    _, record, report = run_training(cfg, mcfg, tcfg, run_dir)
    msg = f"{run_dir} stop={record.stop_reason} best_epoch={record.best_epoch}"
    if report is not None:
        msg += " heldout_dice={dice:.2f}".format(**report.aggregate())
    print(msg)
    return 0


def _load_checkpoint(path, mcfg: ModelConfig) -> SegModel:
    """Load with the checkpoint's own component toggles after checking encoder geometry."""
    from .checkpoint import read_manifest

    saved = ModelConfig.from_dict(read_manifest(path)["geometry"]["model"])
    if saved.encoder.geometry() != mcfg.encoder.geometry():
        raise GeometryMismatch(f"checkpoint encoder {saved.encoder.geometry()} vs config {mcfg.encoder.geometry()}")
    return SegModel.load(path)


def cmd_eval(args, cfg) -> int:
    mcfg, tcfg = build_configs(cfg)
    setting = args.setting or tcfg.prompt_setting
    rate = check_rate(args.rate if args.rate is not None else tcfg.bbox_rate)
    model = _load_checkpoint(args.checkpoint, mcfg)
    data = eval_set(cfg, load_samples(cfg, mcfg.encoder.input_size))
    report = evaluate(model, data, setting, rate)
    run_dir = make_run_dir(cfg, "eval")
    report.write_csv(run_dir / "metrics.csv")
    report.write_summary(run_dir / "summary.json")
    _write_yaml(run_dir / "config.yaml", {**cfg, "checkpoint": str(args.checkpoint)})
    print("{} dice={dice:.2f} hd95={hd95:.2f} miou={miou:.2f}".format(run_dir, **report.aggregate()))
    return 0


def parse_variant(text: str) -> dict:
    parts = [p.strip().lower() for p in text.replace("+", ",").split(",") if p.strip()]
    unknown = sorted(set(parts) - set(TOGGLES))
    if unknown:
        raise ConfigError(f"unknown ablation toggle(s) {unknown}; valid: {list(TOGGLES)}")
    on = set(parts)
    if "selector" in on and not {"hfa", "msfa"} <= on:
        raise InvalidCombination(f"variant {text!r}: selector requires both hfa and msfa")
    if "bias" in on and "selector" not in on:
        raise InvalidCombination(f"variant {text!r}: bias requires the selector")
    if not on & {"hfa", "msfa"}:
        raise InvalidCombination(f"variant {text!r}: at least one adapter is required")
    return {"use_hfa": "hfa" in on, "use_msfa": "msfa" in on, "use_selector": "selector" in on,
            "selector_bias": "bias" in on}


def cmd_ablate(args, cfg) -> int:
    variants = args.variant or list(ABLATION_DEFAULT)
    toggles = {v: parse_variant(v) for v in variants}
    seeds = list(range(int(cfg["train"]["seed"]), int(cfg["train"]["seed"]) + args.seeds))
    plans = []
    for v, tg in toggles.items():
        for seed in seeds:
            c = copy.deepcopy(cfg)
            c["model"].update(tg)
            c["train"]["seed"] = seed
            plans.append((v, seed, c, *build_configs(c)))
    run_dir = make_run_dir(cfg, "ablate")
    rows = []
    for v, seed, c, mcfg, tcfg in plans:
        sub = run_dir / f"{v.replace(',', '+')}-seed{seed}"
        sub.mkdir()
        _, record, report = run_training(c, mcfg, tcfg, sub)
        agg = report.aggregate() if report is not None else {"dice": float("nan"), "hd95": float("nan"),
                                                               "miou": float("nan")}
        rows.append({"variant": v, "seed": seed, "best_epoch": record.best_epoch, **agg})
        log.info("ablate %s seed %d dice %.2f", v, seed, agg["dice"])
    with open(run_dir / "ablation.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["variant", "seed", "best_epoch", "dice", "hd95", "miou"])
        w.writeheader()
        w.writerows(rows)
    summary = []
    for v in toggles:
        sel = [r for r in rows if r["variant"] == v]
        summary.append({"variant": v, **{k: float(np.mean([r[k] for r in sel])) for k in ("dice", "hd95", "miou")}})
    with open(run_dir / "ablation_summary.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["variant", "dice", "hd95", "miou"])
        w.writeheader()
        w.writerows(summary)
    _write_yaml(run_dir / "config.yaml", {**cfg, "variants": list(toggles), "seeds": seeds})
    print(run_dir)
    for s in summary:
        print("{variant:<24} dice={dice:6.2f} hd95={hd95:6.2f} miou={miou:6.2f}".format(**s))
    return 0


def parse_rates(text: str) -> list[float]:
    try:
        raw = [float(r) for r in text.split(",") if r.strip()]
    except ValueError as exc:
        raise ConfigError(f"bad rate list {text!r}") from exc
    if not raw:
        raise ConfigError("empty rate list")
    for r in raw:
        check_rate(r)
    rates = sorted(set(raw), reverse=True)
    if len(rates) != len(raw):
        log.warning("duplicate rates removed: %s -> %s", raw, rates)
    return rates


def plot_metric(rates, values, metric: str, path: Path) -> Path:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(4, 3), dpi=100)
    ax.plot(rates, values, marker="o")
    ax.set_xlabel("bbox rate")
    ax.set_ylabel(metric)
    ax.invert_xaxis()
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, format="png")
    plt.close(fig)
    return path


def cmd_sweep_rate(args, cfg) -> int:
    rates = parse_rates(args.rates)
    mcfg, tcfg = build_configs(cfg)
    setting = args.setting or tcfg.prompt_setting
    model = _load_checkpoint(args.checkpoint, mcfg)
    data = eval_set(cfg, load_samples(cfg, mcfg.encoder.input_size))
    rows = []
    for r in rates:
        agg = evaluate(model, data, setting, r).aggregate()
        rows.append({"rate": r, **agg})
    run_dir = make_run_dir(cfg, "sweep")
    with open(run_dir / "sweep.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["rate", "dice", "hd95", "miou"])
        w.writeheader()
        w.writerows(rows)
    for metric in ("dice", "hd95", "miou"):
        plot_metric(rates, [r[metric] for r in rows], metric, run_dir / f"{metric}_vs_rate.png")
    _write_yaml(run_dir / "config.yaml", {**cfg, "checkpoint": str(args.checkpoint), "rates": rates})
    print(run_dir)
    return 0


def cmd_synth(args, cfg) -> int:
    if args.count < 0:
        raise ConfigError("count must be >= 0")
    if args.size < 32:
        raise ConfigError(f"synthetic size must be >= 32, got {args.size}")
    seed = int(cfg["train"]["seed"])
    out = Path(args.out) if args.out else output_root(cfg) / f"synth-{args.count}-{args.size}-{seed}"
    samples = gen_synthetic(args.count, args.size, seed)
    path = write_corpus(samples, out, extra={"dataset": "synthetic", "size": args.size, "seed": seed})
    print(path.parent)
    return 0


# ---------------------------------------------------------------- parser


def _common_flags() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    g = p.add_argument_group("shared options")
    g.add_argument("--config", help="YAML run configuration")
    g.add_argument("--seed", type=int)
    g.add_argument("--prompt-setting", choices=list("ABCD"))
    g.add_argument("--bbox-rate", type=float)
    g.add_argument("--exemplars", type=int)
    g.add_argument("--freeze-decoder", action="store_true", default=None)
    g.add_argument("--no-selector-bias", action="store_true", default=None)
    g.add_argument("--hfa-tau", type=float)
    g.add_argument("--msfa-per-layer", action="store_true", default=None)
    g.add_argument("--lr", type=float)
    g.add_argument("--lr-gamma", type=float)
    g.add_argument("--weight-decay", type=float)
    g.add_argument("--epochs", type=int)
    g.add_argument("--patience", type=int)
    g.add_argument("--profile", help=f"encoder profile ({', '.join(PROFILES)})")
    g.add_argument("--output-root", help=f"output directory root (env {OUTPUT_ENV}, default {DEFAULT_OUTPUT_ROOT!r})")
    g.add_argument("--data", help="dataset root holding manifest.json")
    g.add_argument("--synthetic", action="store_true", default=None, help="use the seeded synthetic corpus")
    g.add_argument("-v", "--verbose", action="store_true")
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common_flags()
    parser = argparse.ArgumentParser(prog="fewseg", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", parents=[common], help="train adapters and decoder on exemplars")
    p.add_argument("--count", type=int, help="synthetic corpus size")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--setting", choices=list("ABCD"), help="prompt setting (defaults to the train setting)")
    p.add_argument("--rate", type=float, help="bbox rate (defaults to --bbox-rate)")
    p.add_argument("--count", type=int)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", parents=[common], help="train and compare component variants")
    p.add_argument("--variant", action="append",
                   help="comma-separated toggles from hfa,msfa,selector,bias (repeatable)")
    p.add_argument("--seeds", type=int, default=1, help="number of consecutive seeds per variant")
    p.add_argument("--count", type=int)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("sweep-rate", parents=[common], help="evaluate a checkpoint across bbox rates")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--rates", default="1.0,0.95,0.9,0.85,0.8,0.75,0.7")
    p.add_argument("--setting", choices=list("ABCD"))
    p.add_argument("--count", type=int)
    p.set_defaults(func=cmd_sweep_rate)

    p = sub.add_parser("synth", parents=[common], help="write a synthetic corpus to disk")
    p.add_argument("--count", type=int, default=100)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--out")
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = resolve_config(args)
        return args.func(args, cfg)
    except (FewSegError, ValueError, TypeError, FileNotFoundError, yaml.YAMLError) as exc:
        msg = " ".join(str(exc).split())
        print(f"error: {type(exc).__name__}: {msg}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
