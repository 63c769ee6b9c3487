"""Experiment entry point: config resolution, build, dispatch, outputs.

Exit codes: 0 success, 1 configuration error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import json
import subprocess
import sys
import time
from pathlib import Path

from .baselines import (
    run_alignfed_lite,
    run_fedproto,
    run_fedtgp_lite,
    run_local_only,
)
from .config import ExperimentConfig, parse_config
from .data import (
    Dataset,
    PartitionSpec,
    carve_balanced_holdout,
    dirichlet_partition,
    generate_hierarchical_dataset,
    load_dataset,
)
from .errors import ConfigError, SimulatorError
from .metrics import RunResult, write_outputs
from .models import ArchitectureSpec, assign_architectures, init_model
from .protocol import LocalOnlyStrategy, run_fedtsp, run_pfl_finetune, run_protocol
from .rng import RngStream
from .text import build_frozen_encoder, build_prompt_bank, load_embedding_bank


def _git_describe() -> str:
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty"],
            capture_output=True, text=True, timeout=5,
        )
        if out.returncode == 0:
            return out.stdout.strip()
    except OSError:
        pass
    return "untracked"


def build_dataset(config: ExperimentConfig) -> Dataset:
    if config.dataset_path:
        return load_dataset(config.dataset_path)
    return generate_hierarchical_dataset(
        config.superclusters,
        config.classes_per_super,
        config.samples_per_class,
        config.input_dim,
        config.sigma_class,
        config.sigma_super,
        config.seed,
    )


def build_clients(config: ExperimentConfig, dataset: Dataset):
    holdout, rest = carve_balanced_holdout(dataset, config.holdout_per_class, config.seed)
    clients = dirichlet_partition(
        rest, PartitionSpec(config.alpha, config.num_clients, config.seed)
    )
    return holdout, clients


def build_models(config: ExperimentConfig, input_dim: int, num_classes: int):
    family = [
        ArchitectureSpec(tuple(widths), config.activation, config.feature_dim)
        for widths in config.architectures
    ]
    specs = assign_architectures(config.num_clients, family)
    if config.mode in ("gfl", "pfl"):
        shared = init_model(
            specs[0], input_dim, num_classes, RngStream(config.seed, "model-init", client=0)
        )
        return [shared.clone() for _ in range(config.num_clients)]
    return [
        init_model(spec, input_dim, num_classes, RngStream(config.seed, "model-init", client=i))
        for i, spec in enumerate(specs)
    ]


def _build_text_stack(config: ExperimentConfig, dataset: Dataset):
    if config.embedding_path:
        bank, embed_dim = load_embedding_bank(
            config.embedding_path, dataset.class_names,
            config.prompts_per_class, config.prompt_len,
        )
        encoder = build_frozen_encoder(
            embed_dim, config.feature_dim, config.encoder_hidden,
            config.vocab_size, config.seed, with_embedding_table=False,
        )
        return bank, encoder
    if dataset.descriptions is None:
        raise ConfigError(
            "dataset carries no class descriptions; supply embedding_path or "
            "use the generated benchmark"
        )
    encoder = build_frozen_encoder(
        config.embed_dim, config.feature_dim, config.encoder_hidden,
        config.vocab_size, config.seed,
    )
    bank = build_prompt_bank(
        dataset.class_names, dataset.descriptions,
        config.prompts_per_class, config.prompt_len, encoder,
    )
    return bank, encoder


def execute(config: ExperimentConfig) -> RunResult:
    """Build data/models/prompts and dispatch the selected method."""
    dataset = build_dataset(config)
    holdout, clients = build_clients(config, dataset)
    models = build_models(config, dataset.input_dim, dataset.num_classes)
    args = (config, clients, models, holdout)
    kwargs = {"hierarchy": dataset.hierarchy, "class_names": dataset.class_names}

    if config.method == "fedtsp":
        bank, encoder = _build_text_stack(config, dataset)
        result = run_fedtsp(*args[:4], bank, encoder, **kwargs)
    elif config.method == "local":
        result = run_local_only(*args, **kwargs)
    elif config.method == "fedproto":
        result = run_fedproto(*args, **kwargs)
    elif config.method == "fedtgp":
        result = run_fedtgp_lite(*args, **kwargs)
    elif config.method == "alignfed":
        result = run_alignfed_lite(*args, **kwargs)
    elif config.method == "fedavg":
        result = run_protocol(config, clients, models, holdout, LocalOnlyStrategy(config), **kwargs)
    else:  # pragma: no cover - config validation rejects earlier
        raise ConfigError(f"unknown method {config.method!r}")

    if config.mode == "pfl":
        result.personalization = run_pfl_finetune(
            result, clients, config.finetune_epochs, config.finetune_lr
        )
    return result


def write_manifest(config: ExperimentConfig, config_path: str | None, out_dir: Path) -> Path:
    manifest = {
        "config_path": config_path,
        "config": config.to_dict(),
        "git": _git_describe(),
        "started_at": time.strftime("%Y-%m-%dT%H:%M:%S", time.gmtime()),
        "output_dir": str(out_dir),
    }
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2), encoding="utf-8")
    return path


def run(config: ExperimentConfig, out_dir: str | Path, config_path: str | None = None,
        figures: bool = True) -> RunResult:
    """Full pipeline: manifest, experiment, delimited outputs, figures."""
    out = Path(out_dir)
    write_manifest(config, config_path, out)
    result = execute(config)
    write_outputs(result, out)
    bank = result.extras.get("prompt_bank")
    if bank is not None:
        (out / "prompt_prefixes.json").write_text(bank.prefixes_to_json(), encoding="utf-8")
    if figures:
        from .report import render_figures

        render_figures(result, out)
    return result


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="protofed",
        description="Prototype-based federated learning simulator",
    )
    parser.add_argument("--config", default=None, help="JSON config file (defaults if omitted)")
    parser.add_argument(
        "--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
        help="override a config key (repeatable)",
    )
    parser.add_argument("--out", default=None, help="output directory (default runs/<method>_seed<seed>)")
    parser.add_argument("--method", default=None, help="override the method field")
    parser.add_argument("--seed", type=int, default=None, help="override the seed field")
    parser.add_argument("--threads", type=int, default=None,
                        help="parallel client training threads (results are identical)")
    parser.add_argument("--no-figures", action="store_true", help="skip figure rendering")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        overrides = list(args.overrides)
        if args.method is not None:
            overrides.append(f"method={args.method}")
        if args.seed is not None:
            overrides.append(f"seed={args.seed}")
        if args.threads is not None:
            overrides.append(f"threads={args.threads}")
        config = parse_config(args.config, overrides)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    out_dir = args.out or f"runs/{config.method}_seed{config.seed}"
    try:
        result = run(config, out_dir, args.config, figures=not args.no_figures)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except SimulatorError as exc:
        print(f"error ({type(exc).__name__}): {exc}", file=sys.stderr)
        return 2
    best = result.best_mean_local_top1
    print(
        f"{config.method} ({config.mode}): {config.rounds} rounds, "
        f"best mean local top-1 = {best:.4f} at round {result.best_round}; "
        f"outputs in {out_dir}"
    )
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
