"""Command-line entry points: train, eval, play, replay, gradcheck, scene.

Environment variables prefixed LAPTEAM_ override environment-config fields
(e.g. LAPTEAM_TIME_LIMIT_STEPS=500, LAPTEAM_OBS_MODE=image,
LAPTEAM_WEIGHTS_SUCCESS=20); the full key table is in the README.
"""

from __future__ import annotations

import json
import math
import os
import sys
from dataclasses import asdict, replace
from pathlib import Path

import click
import numpy as np

from .env import CholecEnv, EnvConfig, RewardWeights, config_hash

ENV_PREFIX = "LAPTEAM_"


def _coerce(value: str, like):
    if isinstance(like, bool):
        return value.lower() in ("1", "true", "yes", "on")
    if isinstance(like, int):
        return int(value)
    if isinstance(like, float):
        return float(value)
    if isinstance(like, tuple):
        parts = [p.strip() for p in value.split(",")]
        return tuple(type(like[0])(p) for p in parts)
    return value


def apply_env_overrides(config: EnvConfig, environ=None) -> EnvConfig:
    environ = os.environ if environ is None else environ
    fields = asdict(config)
    weight_fields = fields.pop("weights")
    updates, weight_updates = {}, {}
    for key, raw in environ.items():
        if not key.startswith(ENV_PREFIX):
            continue
        name = key[len(ENV_PREFIX):].lower()
        if name.startswith("weights_"):
            wname = name[len("weights_"):]
            if wname not in weight_fields:
                raise click.ClickException(f"unknown weight override {key}")
            weight_updates[wname] = _coerce(raw, weight_fields[wname])
        elif name in fields:
            updates[name] = _coerce(raw, fields[name])
        else:
            raise click.ClickException(
                f"unknown config override {key} (no field {name!r})")
    if weight_updates:
        updates["weights"] = replace(config.weights, **weight_updates)
    return replace(config, **updates) if updates else config


def load_env_config(path, obs_mode=None, seed=None) -> EnvConfig:
    if path:
        try:
            config = EnvConfig.from_json(Path(path).read_text())
        except FileNotFoundError:
            raise click.ClickException(f"config file not found: {path}")
        except Exception as exc:
            raise click.ClickException(f"unreadable config {path}: {exc}")
    else:
        config = EnvConfig()
    config = apply_env_overrides(config)
    if obs_mode:
        config = replace(config, obs_mode=obs_mode)
    if seed is not None:
        config = replace(config, seed=seed)
    return config


def parse_team(team: str, checkpoint_gripper, checkpoint_cauter, greedy):
    """Parse "<gripper>,<cauter>" with parts policy|noop|human|script=<path>."""
    from .evaluation import ControllerSpec, TeamSpec
    parts = [p.strip() for p in team.split(",")]
    if len(parts) != 2:
        raise click.ClickException(
            f"--team needs two comma-separated parts, got {team!r}")
    checkpoints = {"gripper": checkpoint_gripper, "cauter": checkpoint_cauter}
    specs = {}
    for instrument, part in zip(("gripper", "cauter"), parts):
        if part == "noop":
            specs[instrument] = ControllerSpec("noop")
        elif part == "human":
            specs[instrument] = ControllerSpec("human")
        elif part == "policy":
            ckpt = checkpoints[instrument]
            if not ckpt:
                raise click.ClickException(
                    f"--team {part} for {instrument} needs "
                    f"--checkpoint-{instrument}")
            specs[instrument] = ControllerSpec("policy", checkpoint=ckpt,
                                               greedy=greedy)
        elif part.startswith("script="):
            path = part[len("script="):]
            try:
                actions = json.loads(Path(path).read_text())
            except Exception as exc:
                raise click.ClickException(f"unreadable script {path}: {exc}")
            specs[instrument] = ControllerSpec("scripted",
                                               actions=tuple(actions))
        else:
            raise click.ClickException(
                f"unknown team part {part!r} "
                "(expected policy|noop|human|script=<path>)")
    return TeamSpec(gripper=specs["gripper"], cauter=specs["cauter"])


@click.group()
def main():
    """Cooperative laparoscopy sandbox: training, evaluation and live play."""


@main.command()
@click.option("--config", "config_path", type=click.Path(), default=None,
              help="Environment config JSON.")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--steps", type=int, default=2_000_000, show_default=True,
              help="Environment-step budget (rounded up to whole iterations).")
@click.option("--out", "out_dir", type=click.Path(), default="runs/train",
              show_default=True)
@click.option("--obs-mode", type=click.Choice(["features", "image"]),
              default=None)
@click.option("--checkpoint-every", type=int, default=100, show_default=True,
              help="Iterations between checkpoints.")
def train(config_path, seed, steps, out_dir, obs_mode, checkpoint_every):
    """Train both agents with independent PPO; writes checkpoints + CSV."""
    from .ppo import IppoTrainer, PpoConfig

    env_config = load_env_config(config_path, obs_mode=obs_mode, seed=seed)
    ppo_config = PpoConfig()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "env_config.json").write_text(env_config.to_json())
    trainer = IppoTrainer(env_config, ppo_config, seed=seed,
                          telemetry_path=out / "telemetry.csv")
    trainer.save(out / "checkpoint_initial.npz")
    iterations = math.ceil(steps / ppo_config.batch_steps)
    click.echo(f"training for {iterations} iterations "
               f"({iterations * ppo_config.batch_steps} env steps) "
               f"-> {out}")
    for k in range(iterations):
        stats = trainer.train_iteration()
        click.echo(
            f"iter {stats.iteration}: steps={stats.env_steps_total} "
            f"return={stats.mean_return:.3f} "
            f"reached={stats.outcome_fractions.get('ReachedGoal', 0.0):.2f} "
            f"lost={stats.outcome_fractions.get('LostGrasp', 0.0):.2f}")
        if checkpoint_every and (k + 1) % checkpoint_every == 0:
            trainer.save(out / f"checkpoint_{stats.iteration:06d}.npz")
    trainer.save(out / "checkpoint_final.npz")
    click.echo(f"done; final checkpoint at {out / 'checkpoint_final.npz'}")


@main.command("eval")
@click.option("--config", "config_path", type=click.Path(), default=None)
@click.option("--seed", type=int, default=0, show_default=True,
              help="First episode seed.")
@click.option("--episodes", type=int, default=10, show_default=True)
@click.option("--team", default="policy,policy", show_default=True)
@click.option("--checkpoint-gripper", type=click.Path(), default=None)
@click.option("--checkpoint-cauter", type=click.Path(), default=None)
@click.option("--greedy", is_flag=True, help="Argmax instead of sampling.")
@click.option("--record/--no-record", default=True, show_default=True)
@click.option("--workers", type=int, default=1, show_default=True)
@click.option("--out", "out_dir", type=click.Path(), default="runs/eval",
              show_default=True)
@click.option("--obs-mode", type=click.Choice(["features", "image"]),
              default=None)
def eval_cmd(config_path, seed, episodes, team, checkpoint_gripper,
             checkpoint_cauter, greedy, record, workers, out_dir, obs_mode):
    """Evaluate a team over sequential seeds and write the metrics report."""
    from .evaluation import evaluate, write_report

    env_config = load_env_config(config_path, obs_mode=obs_mode)
    team_spec = parse_team(team, checkpoint_gripper, checkpoint_cauter, greedy)
    try:
        report, replays = evaluate(env_config, team_spec, episodes,
                                   seed_base=seed, record=record,
                                   n_workers=workers)
    except Exception as exc:
        raise click.ClickException(f"evaluation failed: {exc}")
    paths = write_report(report, replays, out_dir)
    click.echo(f"config {report.config_hash}  episodes {episodes} "
               f"(seeds {seed}..{seed + episodes - 1})")
    for label, mean, std in report.table_rows():
        click.echo(f"  {label:<16} {mean:9.3f} +/- {std:.3f}")
    click.echo(f"report: {paths['table']}")


@main.command()
@click.option("--config", "config_path", type=click.Path(), default=None)
@click.option("--port", type=int, default=8700, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--team", default="human,policy", show_default=True)
@click.option("--checkpoint-gripper", type=click.Path(), default=None)
@click.option("--checkpoint-cauter", type=click.Path(), default=None)
@click.option("--greedy", is_flag=True)
@click.option("--switch-control", is_flag=True,
              help="Single operator, button-switched instrument control.")
@click.option("--episodes", type=int, default=0, show_default=True,
              help="Stop after N episodes (0 = unlimited).")
@click.option("--lockstep", is_flag=True,
              help="Advance only on client messages (testing/replay).")
def play(config_path, port, seed, team, checkpoint_gripper, checkpoint_cauter,
         greedy, switch_control, episodes, lockstep):
    """Start the live session gateway (websocket + HTTP on PORT)."""
    from .evaluation import TeamSpec
    from .session import SessionConfig, SessionConfigError, serve

    env_config = load_env_config(config_path)
    team_spec = parse_team(team, checkpoint_gripper, checkpoint_cauter, greedy)
    if switch_control:
        team_spec = TeamSpec(team_spec.gripper, team_spec.cauter,
                             switch_control=True)
    try:
        session_config = SessionConfig(
            team=team_spec, env_config=env_config, port=port, seed_base=seed,
            max_session_episodes=episodes, lockstep=lockstep)
        click.echo(f"session gateway on ws://127.0.0.1:{port}/session")
        serve(session_config)
    except SessionConfigError as exc:
        raise click.ClickException(str(exc))
    except OSError as exc:
        raise click.ClickException(f"cannot bind port {port}: {exc}")


@main.command()
@click.argument("replay_file", type=click.Path(exists=True))
@click.option("--config", "config_path", type=click.Path(), default=None)
@click.option("--frames", "frames_dir", type=click.Path(), default=None,
              help="Also re-render each step as PPM images into this dir.")
def replay(replay_file, config_path, frames_dir):
    """Re-run a replay log and verify every recorded state digest."""
    from .evaluation import ReplayLog, ReplayMismatchError, ScriptedController
    from .render import render_scene

    env_config = load_env_config(config_path)
    try:
        log = ReplayLog.from_json(Path(replay_file).read_text())
    except Exception as exc:
        raise click.ClickException(f"unreadable replay {replay_file}: {exc}")
    if config_hash(env_config) != log.config_hash:
        raise click.ClickException(
            f"config hash {config_hash(env_config)} does not match the "
            f"recording's {log.config_hash}; pass the original --config")
    env = CholecEnv(env_config)
    env.reset(log.episode_seed)
    gripper = ScriptedController([a[0] for a in log.actions])
    cauter = ScriptedController([a[1] for a in log.actions])
    out = Path(frames_dir) if frames_dir else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
    for k, expected in enumerate(log.digests):
        env.step((gripper.act(env, None, k), cauter.act(env, None, k)))
        got = env.digest()
        if got != expected:
            raise click.ClickException(
                f"digest mismatch at step {k}: {got} != {expected}")
        if out:
            image = render_scene(env.state, env.scene, env.config)
            _write_ppm(out / f"frame_{k:05d}.ppm", image)
    click.echo(f"replay ok: {len(log.digests)} steps, "
               f"outcome {env.state.outcome.value if env.state.outcome else '-'}")


def _write_ppm(path, image) -> None:
    height, width = image.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6 {width} {height} 255\n".encode())
        fh.write(image.astype(np.uint8).tobytes())


@main.command()
@click.option("--mode", type=click.Choice(["features", "conv"]),
              default="features", show_default=True)
@click.option("--eps", type=float, default=1e-5, show_default=True)
def gradcheck(mode, eps):
    """Finite-difference verification of the policy-net gradients."""
    from .verify import gradcheck_policy_net

    error = gradcheck_policy_net(mode, eps=eps)
    click.echo(f"max relative error: {error:.3e} (mode={mode}, eps={eps})")
    if not error < 1e-4:
        raise click.ClickException("gradient check failed (>= 1e-4)")


@main.command()
@click.option("--out", "out_path", type=click.Path(), default=None,
              help="Write the default scene to this JSON file.")
@click.option("--check", "check_path", type=click.Path(), default=None,
              help="Load and validate an existing scene file.")
def scene(out_path, check_path):
    """Generate or validate reproducible scene geometry files."""
    from .scene import SceneFormatError, build_default_scene, load_scene, save_scene

    if not out_path and not check_path:
        raise click.ClickException("pass --out and/or --check")
    if out_path:
        save_scene(build_default_scene(), out_path)
        click.echo(f"wrote default scene to {out_path}")
    if check_path:
        try:
            loaded = load_scene(check_path)
        except SceneFormatError as exc:
            raise click.ClickException(str(exc))
        click.echo(f"scene ok: {loaded.gb_rest_vertices.shape[0]} vertices, "
                   f"{loaded.gb_triangles.shape[0]} triangles, "
                   f"{len(loaded.target_positions)} targets")


if __name__ == "__main__":
    main()
