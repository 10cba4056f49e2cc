"""
Interpretable Feature Extractor Lab
Command-Line Entry Point

Subcommands:
1. train      - train a model on Catch (value or actor-critic regime)
2. eval       - greedy evaluation; mean return and attention concentration as JSON
3. visualize  - attention overlays for every step of a few episodes
4. audit      - displacement / overlap report for a conv stack, as JSON
5. compare    - IFE mask next to the CNN baseline mask on the same observations

Library errors become a non-zero exit through ``handle_errors``; config errors
are reported as usage errors so the usage text is shown. Exit status is 0 only
when the requested artifact was written in full.

Usage:
    python app.py train --config configs/catch_desk.json --out runs/dqn
    python app.py audit --stack 8x4 --input 84x84
"""

import functools
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path
from typing import List, Optional

import click

from catch_env import make_env, variant_config, write_trajectory_csv
from checkpoint import Checkpoint, load_checkpoint
from config import load_run_config, parse_override
from ife_net import forward, init_params
from models import (
    Colormap,
    ConfigError,
    EnvConfig,
    EnvVariant,
    IFEError,
    NormMode,
    OverlayConfig,
    Profile,
    Regime,
    ShapeError,
)
from spatial_audit import audit_report, stack_from_cli
from trainer import evaluate, train
from visualize import FORMATS, PPM, frame_name, hstack, render_attention, write_images

logger = logging.getLogger(__name__)

RULE = "=" * 60

# ============================================================================
# Error handling
# ============================================================================


def handle_errors(func):
    """
    Map library errors onto click's exit handling.

    ConfigError -> usage error (exit 2, usage text printed);
    any other IFEError -> "Error: ..." on stderr and exit 1.
    """

    @functools.wraps(func)
    def wrapper(*args, **kwargs):
        try:
            return func(*args, **kwargs)
        except ConfigError as exc:
            raise click.UsageError(str(exc), ctx=click.get_current_context(silent=True)) from exc
        except IFEError as exc:
            logger.debug("command failed", exc_info=True)
            raise click.ClickException(str(exc)) from exc

    return wrapper


def _configure_logging(verbose: bool) -> None:
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.WARNING,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
        force=True,
    )


# ============================================================================
# Shared helpers
# ============================================================================


def _overrides(pairs) -> dict:
    values = {}
    for pair in pairs:
        values.update(parse_override(pair))
    return values


def _env_for(ckpt: Checkpoint, env_variant: str, seed: int):
    """Rebuild the wrapped env a checkpoint was trained on, in the requested flavour."""
    extra = ckpt.extra
    model = ckpt.params.config
    env_cfg = EnvConfig(**extra["env"]) if "env" in extra else EnvConfig()
    train_cfg = extra.get("train", {})
    frameskip = int(train_cfg.get("frameskip", 1))
    framestack = int(train_cfg.get("framestack", model.in_channels))
    env_cfg = variant_config(env_cfg, env_variant)
    if (env_cfg.frame_height, env_cfg.frame_width) != (model.input_h, model.input_w):
        raise ShapeError(
            "checkpoint env", "H x W", (model.input_h, model.input_w), (env_cfg.frame_height, env_cfg.frame_width)
        )
    return make_env(env_cfg, frameskip, framestack, seed=seed)


def _overlay_config(darken: float, norm: str, colormap: str) -> OverlayConfig:
    return OverlayConfig(darken_factor=darken, normalization=norm, colormap=colormap).validate()


def overlay_options(func):
    func = click.option("--darken", type=float, default=0.25, show_default=True, help="Darken factor d in [0, 1].")(func)
    func = click.option(
        "--norm", type=click.Choice(NormMode.ALL), default=NormMode.MAX, show_default=True, help="Mask normalisation."
    )(func)
    func = click.option(
        "--colormap", type=click.Choice(Colormap.ALL), default=Colormap.GRAYSCALE, show_default=True
    )(func)
    func = click.option("--format", "fmt", type=click.Choice(FORMATS), default=PPM, show_default=True)(func)
    func = click.option("--workers", type=int, default=4, show_default=True, help="Parallel frame writers.")(func)
    return func


checkpoint_path = click.Path(exists=True, dir_okay=False, path_type=Path)

# ============================================================================
# Commands
# ============================================================================


@click.group()
@click.option("-v", "--verbose", is_flag=True, help="Debug logging on stderr.")
def cli(verbose: bool):
    """Interpretable feature extractor lab: train, evaluate, visualize and audit."""
    _configure_logging(verbose)


@cli.command("train")
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False, path_type=Path), required=True)
@click.option("--profile", type=click.Choice(Profile.ALL), default=Profile.DESK, show_default=True)
@click.option("--regime", type=click.Choice(Regime.ALL), default=Regime.DQN, show_default=True)
@click.option("--seed", type=int, default=None, help="Overrides the config seed.")
@click.option("--set", "sets", multiple=True, metavar="KEY=VALUE", help="Dotted config override (repeatable).")
@click.option("--out", "out_dir", type=click.Path(file_okay=False, path_type=Path), required=True)
@handle_errors
def train_command(config_path, profile, regime, seed, sets, out_dir):
    """Train on Catch and write stats.csv, checkpoints and final.ife to --out."""
    run = load_run_config(config_path, profile, regime, seed, _overrides(sets))
    hp = run.train

    click.echo(RULE)
    click.echo(f"Training {run.model.variant} / {hp.regime} ({run.profile} profile, seed {run.seed})")
    click.echo(f"  env      {run.env.grid_w}x{run.env.grid_h} cells, {run.env.frame_width}x{run.env.frame_height} px")
    click.echo(f"  frames   {hp.total_frames:,} (frameskip {hp.frameskip}, framestack {hp.framestack})")
    click.echo(RULE)

    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.json").write_text(json.dumps(run.to_dict(), indent=2, sort_keys=True))

    def env_factory(env_seed: int):
        return make_env(run.env, hp.frameskip, hp.framestack, seed=env_seed)

    def model_factory(init_seed: int):
        return init_params(run.model, init_seed)

    result = train(
        env_factory,
        model_factory,
        hp,
        run.seed,
        out_dir=out_dir,
        progress=click.echo,
        checkpoint_extra={"env": asdict(run.env), "train": asdict(hp), "profile": run.profile},
    )

    click.echo(RULE)
    click.echo(f"Episodes: {len(result.stats.episodes)}   frames: {result.stats.frames:,}")
    click.echo(f"Mean return (last 100): {result.stats.mean_return():+.3f}")
    click.echo(f"Checkpoint: {result.checkpoint_path}")
    click.echo(RULE)


@cli.command("eval")
@click.option("--checkpoint", "ckpt_path", type=checkpoint_path, required=True)
@click.option("--episodes", type=click.IntRange(min=1), default=100, show_default=True)
@click.option("--env", "env_variant", type=click.Choice(EnvVariant.ALL), default=EnvVariant.PLAIN, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--trajectory", type=click.Path(dir_okay=False, path_type=Path), help="Write a step CSV here.")
@handle_errors
def eval_command(ckpt_path, episodes, env_variant, seed, trajectory):
    """Greedy evaluation; prints a JSON report on stdout."""
    ckpt = load_checkpoint(ckpt_path)
    env = _env_for(ckpt, env_variant, seed)
    rows: Optional[List] = [] if trajectory is not None else None
    report = evaluate(ckpt.params, env, episodes, seed=seed, trajectory=rows)
    if trajectory is not None:
        write_trajectory_csv(trajectory, rows)

    payload = report.to_dict()
    payload.pop("returns")
    payload.update(env=env_variant, variant=ckpt.params.config.variant, checkpoint=str(ckpt_path))
    click.echo(json.dumps(payload, indent=2, sort_keys=True))


@cli.command("visualize")
@click.option("--checkpoint", "ckpt_path", type=checkpoint_path, required=True)
@click.option("--episodes", type=click.IntRange(min=1), default=1, show_default=True)
@click.option("--out", "out_dir", type=click.Path(file_okay=False, path_type=Path), required=True)
@click.option("--env", "env_variant", type=click.Choice(EnvVariant.ALL), default=EnvVariant.PLAIN, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@overlay_options
@handle_errors
def visualize_command(ckpt_path, episodes, out_dir, env_variant, seed, darken, norm, colormap, fmt, workers):
    """Write one attention-overlay frame per step."""
    cfg = _overlay_config(darken, norm, colormap)
    ckpt = load_checkpoint(ckpt_path)
    env = _env_for(ckpt, env_variant, seed)
    jobs = []

    def on_frame(episode, step, obs, mask, _state):
        jobs.append((render_attention(obs[-1], mask, cfg), out_dir / frame_name(episode, step)))

    evaluate(ckpt.params, env, episodes, seed=seed, on_frame=on_frame)
    paths = write_images(jobs, fmt, workers)
    click.echo(f"Wrote {len(paths)} frames to {out_dir}")


@cli.command("audit")
@click.option("--stack", required=True, help='Conv stack as "KxS,KxS,...", e.g. "8x4,4x2".')
@click.option("--input", "size", required=True, help='Input size as "WxH", e.g. "84x84".')
@handle_errors
def audit_command(stack, size):
    """Displacement and overlap report for a conv stack (JSON on stdout)."""
    try:
        spec = stack_from_cli(stack, size)
    except IFEError as exc:
        raise click.UsageError(str(exc)) from exc
    click.echo(json.dumps(audit_report(spec), indent=2, sort_keys=True))


@cli.command("compare")
@click.option("--checkpoint-a", "ckpt_a", type=checkpoint_path, required=True, help="IFE checkpoint (drives the policy).")
@click.option("--checkpoint-b", "ckpt_b", type=checkpoint_path, required=True, help="Baseline checkpoint.")
@click.option("--out", "out_dir", type=click.Path(file_okay=False, path_type=Path), required=True)
@click.option("--episodes", type=click.IntRange(min=1), default=1, show_default=True)
@click.option("--env", "env_variant", type=click.Choice(EnvVariant.ALL), default=EnvVariant.PLAIN, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@overlay_options
@handle_errors
def compare_command(ckpt_a, ckpt_b, out_dir, episodes, env_variant, seed, darken, norm, colormap, fmt, workers):
    """Side-by-side overlays of two models on the same observation sequence."""
    cfg = _overlay_config(darken, norm, colormap)
    first = load_checkpoint(ckpt_a)
    second = load_checkpoint(ckpt_b)
    a_cfg, b_cfg = first.params.config, second.params.config
    if (a_cfg.in_channels, a_cfg.input_h, a_cfg.input_w) != (b_cfg.in_channels, b_cfg.input_h, b_cfg.input_w):
        raise ShapeError(
            "compare",
            "C x H x W",
            (a_cfg.in_channels, a_cfg.input_h, a_cfg.input_w),
            (b_cfg.in_channels, b_cfg.input_h, b_cfg.input_w),
        )
    env = _env_for(first, env_variant, seed)
    jobs = []

    def on_frame(episode, step, obs, mask, _state):
        frame = obs[-1]
        other = forward(second.params, obs).mask
        image = hstack([render_attention(frame, mask, cfg), render_attention(frame, other, cfg)])
        jobs.append((image, out_dir / frame_name(episode, step)))

    evaluate(first.params, env, episodes, seed=seed, on_frame=on_frame)
    paths = write_images(jobs, fmt, workers)
    click.echo(f"Wrote {len(paths)} comparison frames ({a_cfg.variant} | {b_cfg.variant}) to {out_dir}")


# ============================================================================
# APPLICATION ENTRY POINT
# ============================================================================


def main(argv: Optional[List[str]] = None) -> int:
    """Run the CLI and return its exit code instead of exiting."""
    try:
        code = cli.main(args=argv, prog_name="ife-lab", standalone_mode=False)
    except click.ClickException as exc:
        exc.show()
        return exc.exit_code
    except click.exceptions.Abort:
        click.echo("Aborted!", err=True)
        return 1
    return code if isinstance(code, int) else 0


if __name__ == "__main__":
    sys.exit(main())
