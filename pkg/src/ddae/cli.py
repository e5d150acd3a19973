"""Command-line interface.

Subcommands cover the whole workflow: ``gen-data`` (synthetic cohort),
``train`` (fit the diffusion autoencoder), ``harmonize`` / ``combat``
(site-effect removal), ``eval`` (metric report for an original/harmonized
pair) and ``embed`` (2-D latent scatter).  Settings come from an optional
YAML config mirrored on :func:`default_config`; command-line flags win
over the config file.  Every command runs single-threaded, derives its
randomness from one seed, and drops a ``run_metadata.json`` (config hash,
seed, library versions -- deliberately no timestamps) next to its outputs
so identical invocations produce identical bytes.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import platform
import sys
from pathlib import Path

import numpy as np
import torch
import yaml

from . import __version__
from .combat import combat_harmonize_dataset
from .data import load_dataset
from .evalsuite import embed_latents_2d, evaluate
from .harmonize import HarmonizationJob, failure_count, harmonize_dataset
from .model import ModelConfig, load_checkpoint, to_model_range
from .phantoms import CohortSpec, SiteEffectSpec, generate_cohort, interpolated_site_specs
from .sampling import SamplerConfig
from .training import TrainConfig, train


def default_config() -> dict:
    """The full config tree with its defaults; YAML files use this shape."""
    return {
        "seed": 0,
        "device": "cpu",
        "paths": {
            "data": None,
            "out": None,
            "checkpoint": None,
            "original": None,
            "harmonized": None,
            "resume": None,
        },
        "cohort": {
            "n_per_site": 200,
            "sites": 3,  # a count (effects interpolated) or a {name: effect} mapping
            "resolution": 32,
            "age_range": [20.0, 80.0],
            "sex_ratio": 0.5,
        },
        "train": {
            "epochs": 30,
            "batch_size": 32,
            "learning_rate": 1.0e-4,
            "schedule_T": 200,
            "beta_start": 1.0e-4,
            "beta_end": 0.02,
            "aux_mode": "both",
            "aux_weight": 0.1,
            "grl_scale": 1.0,
            "model": {
                "resolution": 32,
                "latent_dim": 64,
                "base_channels": 32,
                "channel_mults": [1, 2, 4],
                "blocks_per_level": 1,
                "known_hidden": 128,
                "time_embed_dim": 128,
                "site_encoding": "scalar",
                "head_hidden": [128, 32],
                "head_dropout": 0.5,
            },
        },
        "sampler": {
            "num_steps": 20,
            "step_schedule": None,
        },
        "harmonize": {
            "target_site": None,
            "batch_size": 32,
        },
        "probe": {
            "epochs": 300,
            "patience": 30,
            "learning_rate": 1.0e-4,
        },
        "eval": {
            "seeds": [0, 1, 2, 3, 4],
            "test_fraction": 0.3,
            "split_seed": 2024,
            "reference_site": None,
        },
    }


def _merge(base: dict, override: dict, prefix: str = "") -> None:
    """Recursively apply ``override`` onto ``base``, rejecting unknown keys."""
    for key, value in override.items():
        path = f"{prefix}{key}"
        if key not in base:
            raise ValueError(f"unknown config key: {path}")
        if isinstance(base[key], dict) and key != "sites":
            if not isinstance(value, dict):
                raise ValueError(f"config key {path} must be a mapping, got {type(value).__name__}")
            _merge(base[key], value, prefix=f"{path}.")
        else:
            base[key] = value


def load_config(path: str | Path | None) -> dict:
    config = default_config()
    if path is not None:
        text = Path(path).read_text()
        loaded = yaml.safe_load(text)
        if loaded is None:
            loaded = {}
        if not isinstance(loaded, dict):
            raise ValueError(f"config file {path} must contain a mapping at the top level")
        _merge(config, loaded)
    return config


def config_hash(config: dict) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True).encode()).hexdigest()


def write_run_metadata(out_dir: Path, command: str, config: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    metadata = {
        "command": command,
        "config_hash": config_hash(config),
        "seed": config["seed"],
        "versions": {
            "python": platform.python_version(),
            "numpy": np.__version__,
            "torch": torch.__version__,
            "ddae": __version__,
        },
    }
    with open(out_dir / "run_metadata.json", "w") as fh:
        json.dump(metadata, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _apply_common_flags(config: dict, args: argparse.Namespace) -> None:
    if args.seed is not None:
        config["seed"] = args.seed
    if args.out is not None:
        config["paths"]["out"] = args.out
    if args.device is not None:
        config["device"] = args.device
    if config["device"] != "cpu":
        raise ValueError(f"this build supports --device cpu only, got {config['device']!r}")


def _resolve(config: dict, key: str, flag_value, required_as: str | None = None):
    value = flag_value if flag_value is not None else config["paths"][key]
    if value is None and required_as is not None:
        raise ValueError(f"missing {required_as} (or paths.{key} in the config)")
    return value


def _out_dir(config: dict, fallback: str) -> Path:
    out = config["paths"]["out"]
    return Path(out) if out is not None else Path(fallback)


def _site_specs(sites) -> dict[str, SiteEffectSpec]:
    if isinstance(sites, int):
        return interpolated_site_specs(sites)
    if isinstance(sites, dict):
        specs = {}
        for name, params in sites.items():
            try:
                specs[name] = SiteEffectSpec(**dict(params))
            except TypeError as exc:
                raise ValueError(f"bad site effect for cohort.sites.{name}: {exc}") from None
        return specs
    raise ValueError(f"cohort.sites must be a count or a mapping, got {type(sites).__name__}")


def _train_config(config: dict, out_dir: Path | None) -> TrainConfig:
    section = dict(config["train"])
    model_section = dict(section.pop("model"))
    model_section["channel_mults"] = tuple(model_section["channel_mults"])
    model_section["head_hidden"] = tuple(model_section["head_hidden"])
    return TrainConfig(
        **section,
        seed=config["seed"],
        model=ModelConfig(**model_section),
        checkpoint_path=str(out_dir / "checkpoint.pt") if out_dir else None,
        history_path=str(out_dir / "history.csv") if out_dir else None,
    )


def _sampler_config(config: dict) -> SamplerConfig:
    section = config["sampler"]
    schedule = section["step_schedule"]
    return SamplerConfig(
        num_steps=section["num_steps"],
        step_schedule=tuple(schedule) if schedule is not None else None,
    )


def cmd_gen_data(args: argparse.Namespace) -> int:
    config = load_config(args.config)
    _apply_common_flags(config, args)
    section = config["cohort"]
    if args.sites is not None:
        section["sites"] = args.sites
    if args.n is not None:
        section["n_per_site"] = args.n
    if args.resolution is not None:
        section["resolution"] = args.resolution

    spec = CohortSpec(
        n_per_site=section["n_per_site"],
        sites=_site_specs(section["sites"]),
        age_range=tuple(section["age_range"]),
        sex_ratio=section["sex_ratio"],
        resolution=section["resolution"],
        seed=config["seed"],
    )
    out_dir = _out_dir(config, "dataset")
    dataset = generate_cohort(spec, out_dir)
    write_run_metadata(out_dir, "gen-data", config)
    print(f"wrote {len(dataset)} images across {len(spec.sites)} sites to {out_dir}")
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    config = load_config(args.config)
    _apply_common_flags(config, args)
    if args.epochs is not None:
        config["train"]["epochs"] = args.epochs
    data_dir = _resolve(config, "data", args.data, required_as="--data")
    resume = _resolve(config, "resume", args.resume)

    torch.set_num_threads(1)
    dataset = load_dataset(data_dir)
    out_dir = _out_dir(config, "runs/train")
    train_config = _train_config(config, out_dir)
    initial = load_checkpoint(resume) if resume is not None else None
    model, history = train(train_config, dataset, model=initial)
    write_run_metadata(out_dir, "train", config)
    final = history[-1]
    print(
        f"trained {train_config.epochs} epoch(s) on {len(dataset)} images; "
        f"final loss {final['total']:.4f} (diffusion {final['diffusion_loss']:.4f}); "
        f"checkpoint at {out_dir / 'checkpoint.pt'}"
    )
    return 0


def cmd_harmonize(args: argparse.Namespace) -> int:
    config = load_config(args.config)
    _apply_common_flags(config, args)
    if args.target_site is not None:
        config["harmonize"]["target_site"] = args.target_site
    if args.steps is not None:
        config["sampler"]["num_steps"] = args.steps
    data_dir = _resolve(config, "data", args.data, required_as="--data")
    checkpoint = _resolve(config, "checkpoint", args.checkpoint, required_as="--checkpoint")

    torch.set_num_threads(1)
    model = load_checkpoint(checkpoint)
    dataset = load_dataset(data_dir)
    out_dir = _out_dir(config, "runs/harmonized")
    job = HarmonizationJob(
        dataset=dataset,
        model=model,
        target_site=config["harmonize"]["target_site"],
        sampler=_sampler_config(config),
        output_dir=out_dir,
        source_root=data_dir,
        batch_size=config["harmonize"]["batch_size"],
    )
    harmonized, manifest = harmonize_dataset(job)
    write_run_metadata(out_dir, "harmonize", config)
    failures = failure_count(manifest)
    target = manifest[0]["site_target"] if manifest else job.target_site
    print(
        f"harmonized {len(harmonized)}/{len(dataset)} images to site {target!r} at {out_dir}"
        + (f"; {failures} failure(s), see manifest.csv" if failures else "")
    )
    return 1 if failures else 0


def cmd_combat(args: argparse.Namespace) -> int:
    config = load_config(args.config)
    _apply_common_flags(config, args)
    data_dir = _resolve(config, "data", args.data, required_as="--data")

    dataset = load_dataset(data_dir)
    out_dir = _out_dir(config, "runs/combat")
    harmonized, _ = combat_harmonize_dataset(dataset, out_dir, source_root=data_dir)
    write_run_metadata(out_dir, "combat", config)
    print(f"combat-adjusted {len(harmonized)} images at {out_dir}")
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    config = load_config(args.config)
    _apply_common_flags(config, args)
    section = config["eval"]
    if args.seeds is not None:
        section["seeds"] = [int(s) for s in args.seeds.split(",") if s]
    if args.reference_site is not None:
        section["reference_site"] = args.reference_site
    if args.probe_epochs is not None:
        config["probe"]["epochs"] = args.probe_epochs
    original_dir = _resolve(config, "original", args.original, required_as="--original")
    harmonized_dir = _resolve(config, "harmonized", args.harmonized, required_as="--harmonized")

    torch.set_num_threads(1)
    original = load_dataset(original_dir)
    harmonized = load_dataset(harmonized_dir)
    out_dir = _out_dir(config, "runs/eval")
    report = evaluate(
        original,
        harmonized,
        seeds=section["seeds"],
        reference_site=section["reference_site"],
        test_fraction=section["test_fraction"],
        split_seed=section["split_seed"],
        probe_epochs=config["probe"]["epochs"],
        probe_patience=config["probe"]["patience"],
        probe_lr=config["probe"]["learning_rate"],
        out_dir=out_dir,
    )
    write_run_metadata(out_dir, "eval", config)
    print(report.text_table())
    return 0


def cmd_embed(args: argparse.Namespace) -> int:
    config = load_config(args.config)
    _apply_common_flags(config, args)
    data_dir = _resolve(config, "data", args.data, required_as="--data")
    checkpoint = _resolve(config, "checkpoint", args.checkpoint, required_as="--checkpoint")

    torch.set_num_threads(1)
    model = load_checkpoint(checkpoint)
    dataset = load_dataset(data_dir).sorted_by_id()
    with torch.no_grad():
        z_kappa = model.encode_known(model.conditions(dataset.records))
        x0 = to_model_range(torch.from_numpy(np.ascontiguousarray(dataset.images)))
        z_upsilon = model.encode_unknown(x0)
    latents = torch.cat([z_kappa, z_upsilon], dim=1).numpy()
    out_dir = _out_dir(config, "runs/embed")
    out_dir.mkdir(parents=True, exist_ok=True)
    embed_latents_2d(
        latents,
        sites=dataset.sites(),
        ids=dataset.ids,
        out_png=out_dir / "embedding.png",
        out_csv=out_dir / "embedding.csv",
    )
    write_run_metadata(out_dir, "embed", config)
    print(f"embedded {len(dataset)} latent codes; scatter and coordinates at {out_dir}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML config file; flags override its values")
    common.add_argument("--seed", type=int, help="master seed (default 0)")
    common.add_argument("--out", help="output directory")
    common.add_argument("--device", help="compute device (only 'cpu' is supported)")

    parser = argparse.ArgumentParser(
        prog="ddae",
        description="Train and apply a disentangling diffusion autoencoder for multi-site image harmonization.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", parents=[common], help="generate a synthetic multi-site cohort")
    p.add_argument("--sites", type=int, help="number of sites (effects interpolated)")
    p.add_argument("--n", type=int, help="images per site")
    p.add_argument("--resolution", type=int, help="image side length in pixels")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", parents=[common], help="train the harmonization model")
    p.add_argument("--data", help="dataset directory (images/ + covariates.csv)")
    p.add_argument("--epochs", type=int, help="training epochs")
    p.add_argument("--resume", help="checkpoint to continue training from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("harmonize", parents=[common], help="map a dataset onto one site")
    p.add_argument("--data", help="dataset directory")
    p.add_argument("--checkpoint", help="trained checkpoint")
    p.add_argument("--target-site", help="site to map onto (default: largest site)")
    p.add_argument("--steps", type=int, help="sampler steps for encode/decode")
    p.set_defaults(func=cmd_harmonize)

    p = sub.add_parser("combat", parents=[common], help="location/scale baseline harmonization")
    p.add_argument("--data", help="dataset directory")
    p.set_defaults(func=cmd_combat)

    p = sub.add_parser("eval", parents=[common], help="metric report for an original/harmonized pair")
    p.add_argument("--original", help="original dataset directory")
    p.add_argument("--harmonized", help="harmonized dataset directory")
    p.add_argument("--seeds", help="comma-separated probe seeds (default 0,1,2,3,4)")
    p.add_argument("--reference-site", help="reference site for distribution distances")
    p.add_argument("--probe-epochs", type=int, help="probe training epochs")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("embed", parents=[common], help="2-D scatter of the latent codes")
    p.add_argument("--data", help="dataset directory")
    p.add_argument("--checkpoint", help="trained checkpoint")
    p.set_defaults(func=cmd_embed)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:  # one-line cause, nonzero exit
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
