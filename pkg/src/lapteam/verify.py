"""Gradient verification entry points.

Builds reduced policy-value nets (small enough for finite differences) and
checks the analytic gradients of the full PPO surrogate on a synthetic
batch against central differences in float64.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .nets import ArchSpec, PolicyValueNet, grad_check
from .ppo import AgentRollout, PpoConfig, agent_surrogate

GRADCHECK_FEATURE_SPEC = ArchSpec(mode="features", feature_dim=25,
                                  hidden_dims=(24, 24), lstm_size=16)
GRADCHECK_CONV_SPEC = ArchSpec(mode="image", image_size=(8, 8),
                               conv_channels=(3, 4), fc_pre_lstm=8,
                               image_lstm_size=6, fc_post_lstm=8)


def synthetic_rollout(spec: ArchSpec, t_len=4, n_lanes=2, seed=0) -> AgentRollout:
    """Random but well-scaled PPO minibatch for gradient checks."""
    rng = np.random.default_rng(seed)
    if spec.mode == "features":
        obs = rng.uniform(-1, 1, (t_len, n_lanes, spec.feature_dim))
    else:
        w, h = spec.image_size
        obs = rng.uniform(0, 1, (t_len, n_lanes, h, w, 3))
    actions = rng.integers(0, 9, (t_len, n_lanes))
    prev = np.vstack([np.full((1, n_lanes), -1, dtype=np.int64),
                      actions[:-1]])
    dones = np.zeros((t_len, n_lanes), dtype=bool)
    dones[t_len // 2, 0] = True          # exercise the in-unroll state reset
    advantages = rng.standard_normal((t_len, n_lanes))
    size = spec.recurrent_size()
    return AgentRollout(
        observations=obs.astype(np.float32),
        actions=actions.astype(np.int64),
        prev_actions=prev.astype(np.int64),
        behavior_logp=np.log(np.full((t_len, n_lanes), 1.0 / 9.0,
                                     dtype=np.float32))
        + rng.uniform(-0.2, 0.2, (t_len, n_lanes)).astype(np.float32),
        values=rng.standard_normal((t_len, n_lanes)),
        rewards=np.zeros((t_len, n_lanes)),
        dones=dones,
        truncations=np.zeros((t_len, n_lanes), dtype=bool),
        bootstrap_values=np.zeros((t_len, n_lanes)),
        init_h=np.zeros((n_lanes, size), dtype=np.float32),
        init_c=np.zeros((n_lanes, size), dtype=np.float32),
        advantages=advantages,
        targets=rng.standard_normal((t_len, n_lanes)))


def gradcheck_policy_net(mode: str = "features", eps: float = 1e-5,
                         seed: int = 0) -> float:
    """Max relative gradient error of the PPO surrogate on a reduced net.

    The check net gets healthy-magnitude random parameters (the training
    initializer's 0.01-scaled head would push many true gradients below
    what central differences can resolve in float64).
    """
    spec = GRADCHECK_FEATURE_SPEC if mode == "features" else GRADCHECK_CONV_SPEC
    net = PolicyValueNet(spec, "gripper", seed=seed, dtype=np.float64)
    rng = np.random.default_rng(seed + 1)
    for tensor in net.parameters():
        tensor.values = rng.uniform(-0.5, 0.5, tensor.values.shape)
    rollout = synthetic_rollout(spec, seed=seed)
    lanes = np.arange(rollout.observations.shape[1])
    config = PpoConfig()

    def loss_builder(n):
        loss, _ = agent_surrogate(n, rollout, lanes, config)
        return loss

    return grad_check(net, loss_builder, eps=eps)
