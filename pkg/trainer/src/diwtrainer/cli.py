"""Trainer command line."""

from __future__ import annotations

import json

import click

from .ppo import TrainConfig, TrainSchedule, train


@click.group()
def main():
    """PPO trainer for the direct-ink-writing environment server."""


@main.command("train")
@click.option("--slices", default="square,triangle,circle",
              show_default=True, help="Comma-separated slice specs.")
@click.option("--total-obs", type=int, default=200_000, show_default=True)
@click.option("--batch-size", type=int, default=10_000, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out-dir", type=click.Path(), required=True)
@click.option("--env-config", default=None,
              help="JSON episode/observation config forwarded on reset.")
@click.option("--server-cmd", default=None,
              help="Override the environment server command line.")
def cmd_train(slices, total_obs, batch_size, seed, out_dir, env_config,
              server_cmd):
    """Train a policy and export checkpoints in the shared format."""
    config = TrainConfig(
        slices=slices.split(","),
        env_config=json.loads(env_config) if env_config else None,
        schedule=TrainSchedule(total_obs=total_obs, batch_size=batch_size),
        out_dir=out_dir, seed=seed,
        server_cmd=server_cmd.split() if server_cmd else None)
    final = train(config)
    click.echo(json.dumps({"checkpoint": final}))


if __name__ == "__main__":  # pragma: no cover
    main()
