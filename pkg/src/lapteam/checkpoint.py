"""Versioned binary checkpoints for training state.

An npz container holds the architecture descriptors, per-agent parameter
and optimizer-moment arrays, counters and config snapshots, plus a pickled
lane blob (environment states, recurrent states, rng states) so a resumed
run reproduces the uninterrupted one bit for bit.  Loading validates the
container version and the architecture descriptor before touching any net.
"""

from __future__ import annotations

import io
import json
import pickle
from dataclasses import asdict

import numpy as np

CHECKPOINT_VERSION = 1


class CheckpointError(RuntimeError):
    """Unreadable, mismatched or incomplete checkpoint."""


def _net_arrays(trainer):
    arrays = {}
    for agent, net in trainer.nets.items():
        for name, tensor in net.params.items():
            arrays[f"{agent}.param.{name}"] = tensor.values
        adam = trainer.adam[agent]
        for name, m, v in zip(net.params.keys(), adam.m, adam.v):
            arrays[f"{agent}.adam_m.{name}"] = m
            arrays[f"{agent}.adam_v.{name}"] = v
    return arrays


def save_checkpoint(path, trainer) -> None:
    meta = {
        "version": CHECKPOINT_VERSION,
        "iteration": trainer.iteration,
        "env_steps_total": trainer.env_steps_total,
        "episode_counter": trainer._episode_counter,
        "seed": trainer.seed,
        "arch": {agent: net.spec.descriptor()
                 for agent, net in trainer.nets.items()},
        "adam_steps": {agent: trainer.adam[agent].step
                       for agent in trainer.nets},
        "env_config": trainer.env_config.to_json(),
        "ppo_config": asdict(trainer.config),
        "rng": {
            "sample": {a: trainer.sample_rng[a].bit_generator.state
                       for a in trainer.nets},
            "perm": trainer.perm_rng.bit_generator.state,
        },
    }
    lanes = {
        "env_states": [env.state for env in trainer.envs],
        "ray_points": [env._ray_points for env in trainer.envs],
        "obs": trainer._lane_obs,
        "prev": trainer._lane_prev,
        "rec": trainer._lane_state,
        "ep_step": trainer._lane_ep_step,
        "ep_return": trainer._lane_ep_return,
    }
    blob = np.frombuffer(pickle.dumps(lanes), dtype=np.uint8)
    arrays = _net_arrays(trainer)
    buffer = io.BytesIO()
    np.savez(buffer, meta=json.dumps(meta), lanes=blob, **arrays)
    with open(path, "wb") as fh:
        fh.write(buffer.getvalue())


def read_checkpoint(path) -> tuple[dict, dict]:
    """Returns (meta dict, array dict).  Validates the container version."""
    try:
        with np.load(path, allow_pickle=False) as data:
            arrays = {k: data[k] for k in data.files}
    except Exception as exc:
        raise CheckpointError(f"unreadable checkpoint {path}: {exc}") from exc
    if "meta" not in arrays:
        raise CheckpointError(f"{path} is not a lapteam checkpoint")
    meta = json.loads(str(arrays.pop("meta")))
    if meta.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"checkpoint version {meta.get('version')!r} unsupported "
            f"(expected {CHECKPOINT_VERSION})")
    return meta, arrays


def load_weights(path, agent: str):
    """Architecture spec and parameter arrays for one agent (evaluation)."""
    from .nets import ArchSpec
    meta, arrays = read_checkpoint(path)
    if agent not in meta["arch"]:
        raise CheckpointError(f"agent {agent!r} not in checkpoint")
    spec = ArchSpec.from_descriptor(meta["arch"][agent])
    prefix = f"{agent}.param."
    weights = {k[len(prefix):]: arrays[k] for k in arrays if k.startswith(prefix)}
    return spec, weights, meta


def load_policy_net(path, agent: str):
    """Build the stored net for one agent, validating the architecture."""
    from .nets import PolicyValueNet
    spec, weights, meta = load_weights(path, agent)
    net = PolicyValueNet(spec, agent, seed=meta.get("seed", 0))
    try:
        net.set_weights(weights)
    except Exception as exc:
        raise CheckpointError(f"architecture mismatch for {agent}: {exc}") from exc
    return net, meta


def restore_trainer(path, scene=None):
    """Rebuild a trainer mid-run; subsequent trajectories are bit-identical
    to the uninterrupted run under the same seeds."""
    from .env import EnvConfig
    from .nets import ArchSpec
    from .ppo import IppoTrainer, PpoConfig

    meta, arrays = read_checkpoint(path)
    env_config = EnvConfig.from_json(meta["env_config"])
    ppo_kwargs = dict(meta["ppo_config"])
    ppo_kwargs["adam_betas"] = tuple(ppo_kwargs["adam_betas"])
    ppo_config = PpoConfig(**ppo_kwargs)
    arch = ArchSpec.from_descriptor(meta["arch"]["gripper"])
    trainer = IppoTrainer(env_config, ppo_config, seed=meta["seed"],
                          scene=scene, arch=arch)

    for agent, net in trainer.nets.items():
        stored = ArchSpec.from_descriptor(meta["arch"][agent])
        if stored != net.spec:
            raise CheckpointError(f"architecture mismatch for {agent}")
        prefix = f"{agent}.param."
        weights = {k[len(prefix):]: arrays[k]
                   for k in arrays if k.startswith(prefix)}
        net.set_weights(weights)
        adam = trainer.adam[agent]
        adam.step = meta["adam_steps"][agent]
        adam.m = [arrays[f"{agent}.adam_m.{name}"].copy()
                  for name in net.params.keys()]
        adam.v = [arrays[f"{agent}.adam_v.{name}"].copy()
                  for name in net.params.keys()]
        trainer.sample_rng[agent].bit_generator.state = meta["rng"]["sample"][agent]
    trainer.perm_rng.bit_generator.state = meta["rng"]["perm"]

    trainer.iteration = meta["iteration"]
    trainer.env_steps_total = meta["env_steps_total"]
    trainer._episode_counter = meta["episode_counter"]

    lanes = pickle.loads(arrays["lanes"].tobytes())
    for env, state, rays in zip(trainer.envs, lanes["env_states"],
                                lanes["ray_points"]):
        env.state = state
        env._ray_points = rays
    trainer._lane_obs = list(lanes["obs"])
    trainer._lane_prev = lanes["prev"]
    trainer._lane_state = lanes["rec"]
    trainer._lane_ep_step = lanes["ep_step"]
    trainer._lane_ep_return = lanes["ep_return"]
    return trainer
