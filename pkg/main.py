# main.py
"""Command-line entry point: train, eval, ablate, heatmap, gen-data."""
import functools
import sys
from pathlib import Path

import click
import pandas as pd
from loguru import logger
from pydantic import ValidationError

from config import (DEFAULT_CONFIG_PATH, LOG_LEVEL, ConfigError, TrainConfig, config_from_mapping, load_config,
                    output_root)
from detector import CheckpointError, load_checkpoint, model_from_checkpoint, strip_nra
from heatmap import REGION_PREFIXES, build_heatmap, diagonal_block_stats, write_heatmap
from toy_benchmark import save_dataset
from trainer import (build_experiment, evaluate_model, generate_datasets, load_vocabulary, read_grid,
                     run_ablation_grid, train)

EXIT_VALIDATION = 1
EXIT_RUNTIME = 2
SPLIT_METRICS = {
    "base": ("base_acc", "AP50_base_toy"),
    "novel": ("novel_acc", "AP50_novel_toy"),
    "all": ("novel_acc", "base_acc", "AP50_novel_toy", "AP50_base_toy"),
}


def handle_errors(fn):
    """Maps configuration problems to exit 1 and everything else that fails to exit 2."""
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except (ConfigError, ValidationError) as exc:
            logger.error(f"[{fn.__name__}] invalid configuration: {exc}")
            click.echo(f"error: {exc}", err=True)
            sys.exit(EXIT_VALIDATION)
        except (CheckpointError, FileNotFoundError, RuntimeError, ValueError) as exc:
            logger.error(f"[{fn.__name__}] {exc}")
            click.echo(f"error: {exc}", err=True)
            sys.exit(EXIT_RUNTIME)
    return wrapper


def resolve_config(config_path, seed=None) -> TrainConfig:
    cfg = load_config(config_path)
    if seed is not None:
        cfg = config_from_mapping({"seed": str(seed)}, base=cfg)
    return cfg


def experiment_from_checkpoint(checkpoint, without_nra: bool = False):
    payload = load_checkpoint(checkpoint)
    if without_nra:
        payload = strip_nra(payload)
    model, cfg = model_from_checkpoint(payload)
    return build_experiment(cfg, model=model)


@click.group()
@click.option("--log-level", default=LOG_LEVEL, show_default=True, help="loguru level for stderr.")
def cli(log_level):
    """Neighbor-region attention alignment on a toy open-vocabulary detection benchmark."""
    logger.remove()
    logger.add(sys.stderr, level=log_level.upper())


@cli.command("train")
@click.option("--config", "config_path", default=str(DEFAULT_CONFIG_PATH), show_default=True)
@click.option("--seed", type=int, default=None, help="Overrides the seed in the config.")
@click.option("--out", "out_dir", type=click.Path(), default=None, help="Defaults to $NRAA_OUTPUT_ROOT/train.")
@click.option("--steps", type=int, default=None, help="Overrides the number of steps.")
@click.option("--checkpoint", "resume", type=click.Path(), default=None, help="Resume from this checkpoint.")
@handle_errors
def cmd_train(config_path, seed, out_dir, steps, resume):
    """Trains a model and writes checkpoint.pt and losses.csv."""
    cfg = resolve_config(config_path, seed)
    if steps is not None:
        cfg = config_from_mapping({"steps": str(steps)}, base=cfg)
    out_dir = Path(out_dir) if out_dir else output_root() / "train"
    exp = build_experiment(cfg)
    state = train(exp, out_dir, resume=resume, progress=sys.stderr.isatty())
    click.echo(f"trained to step {state.step}; checkpoint {out_dir / 'checkpoint.pt'}")


@cli.command("eval")
@click.option("--checkpoint", type=click.Path(), required=True)
@click.option("--split", type=click.Choice(["base", "novel", "all"]), default="all", show_default=True)
@click.option("--out", "out_dir", type=click.Path(), default=None, help="Also write metrics.csv and detections.txt.")
@click.option("--strip-nra", is_flag=True, help="Drop the NRA weights before evaluating.")
@handle_errors
def cmd_eval(checkpoint, split, out_dir, strip_nra):
    """Evaluates a checkpoint on the toy test split."""
    exp = experiment_from_checkpoint(checkpoint, without_nra=strip_nra)
    detections_out = None
    if out_dir:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        detections_out = Path(out_dir) / "detections.txt"
    metrics = evaluate_model(exp.model, exp.encoders, exp.vocab, exp.test_set, exp.cfg, detections_out)
    selected = {k: metrics[k] for k in SPLIT_METRICS[split]}
    for key, value in selected.items():
        click.echo(f"{key}={value:.6f}")
    if out_dir:
        pd.DataFrame([selected]).to_csv(Path(out_dir) / "metrics.csv", index=False, float_format="%.6f")


@cli.command("ablate")
@click.option("--grid", "grid_path", type=click.Path(), required=True)
@click.option("--config", "config_path", default=str(DEFAULT_CONFIG_PATH), show_default=True)
@click.option("--seed", type=int, default=None)
@click.option("--budget", type=int, default=None, help="Steps per row; defaults to the config's steps.")
@click.option("--out", "out_path", type=click.Path(), default=None,
              help="Results CSV; defaults to $NRAA_OUTPUT_ROOT/ablation/<grid>.csv.")
@handle_errors
def cmd_ablate(grid_path, config_path, seed, budget, out_path):
    """Trains and evaluates every row of a grid file under the same seed and budget."""
    base = resolve_config(config_path, seed)
    rows = read_grid(grid_path)
    table = run_ablation_grid(rows, budget or base.steps, base, progress=sys.stderr.isatty())
    out_path = Path(out_path) if out_path else output_root() / "ablation" / f"{Path(grid_path).stem}.csv"
    out_path.parent.mkdir(parents=True, exist_ok=True)
    table.to_csv(out_path, index=False, float_format="%.6f")
    failed = int((table["status"] != "ok").sum())
    click.echo(f"{len(table)} rows, {failed} failed -> {out_path}")
    if failed:
        sys.exit(EXIT_RUNTIME)


@cli.command("heatmap")
@click.option("--checkpoint", type=click.Path(), required=True)
@click.option("--scene", type=int, default=0, show_default=True, help="Test-split image id.")
@click.option("--proposal", type=int, default=0, show_default=True, help="Index into the scene's top-k proposals.")
@click.option("--layer", type=int, default=0, show_default=True)
@click.option("--sample", "sample_id", type=int, default=0, show_default=True)
@click.option("--out", "out_dir", type=click.Path(), default=None, help="Defaults to $NRAA_OUTPUT_ROOT/heatmaps.")
@handle_errors
def cmd_heatmap(checkpoint, scene, proposal, layer, sample_id, out_dir):
    """Exports the NRA attention matrix for one proposal as CSV, segment sidecar and PNG."""
    exp = experiment_from_checkpoint(checkpoint)
    export = build_heatmap(exp.model, exp.test_set.scene(scene), proposal, exp.cfg, layer, sample_id)
    out_dir = Path(out_dir) if out_dir else output_root() / "heatmaps"
    paths = write_heatmap(export, out_dir, f"scene{scene}_proposal{proposal}_layer{layer}")
    if len([s for s in export.segments if s[0].startswith(REGION_PREFIXES)]) > 1:
        diag, off = diagonal_block_stats(export.weights, export.segments)
        click.echo(f"diagonal={diag:.6f} off_diagonal={off:.6f}")
    click.echo(f"{export.weights.shape[0]}x{export.weights.shape[0]} -> {paths['csv']}")


@cli.command("gen-data")
@click.option("--config", "config_path", default=str(DEFAULT_CONFIG_PATH), show_default=True)
@click.option("--seed", type=int, default=None)
@click.option("--out", "out_dir", type=click.Path(), default=None, help="Defaults to $NRAA_OUTPUT_ROOT/data.")
@handle_errors
def cmd_gen_data(config_path, seed, out_dir):
    """Writes the toy train and test splits to disk."""
    cfg = resolve_config(config_path, seed)
    out_dir = Path(out_dir) if out_dir else output_root() / "data"
    train_set, test_set = generate_datasets(cfg, load_vocabulary(cfg), progress=sys.stderr.isatty())
    for dataset in (train_set, test_set):
        save_dataset(dataset, out_dir / dataset.split)
        click.echo(f"{dataset.split}: {len(dataset)} scenes -> {out_dir / dataset.split}")


if __name__ == "__main__":
    cli()
