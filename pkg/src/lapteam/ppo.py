"""Independent PPO for the two instrument agents.

Each agent owns its network, optimizer state and advantage estimates; the
other agent is just part of its environment.  Rollouts are collected
time-major across parallel environment lanes with recurrent state carried
within episodes; updates run clipped-surrogate PPO with TD(lambda) value
targets over whole-lane minibatches so recurrent handling is exact.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .env import CholecEnv, EnvConfig, Outcome
from .nets import ArchSpec, PolicyValueNet, action_onehot, sample_action

AGENTS = ("gripper", "cauter")


class TrainingDivergedError(RuntimeError):
    """Non-finite loss; iteration aborted with a diagnostic dump."""


@dataclass(frozen=True)
class PpoConfig:
    gamma: float = 0.99
    gae_lambda: float = 0.8
    learning_rate: float = 3e-4
    clip_ratio: float = 0.1
    epochs_per_iteration: int = 4
    minibatches_per_epoch: int = 4
    entropy_coef: float = 0.01
    value_coef: float = 0.5
    grad_clip_norm: float = 1.0
    batch_steps: int = 2560
    n_parallel_envs: int = 16
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    shared_reward: bool = False     # ablation: both agents get the summed reward

    def __post_init__(self):
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError("gamma must lie in (0, 1]")
        if not 0.0 <= self.gae_lambda <= 1.0:
            raise ValueError("gae_lambda must lie in [0, 1]")
        if self.batch_steps % self.n_parallel_envs != 0:
            raise ValueError("batch_steps must divide evenly across envs")
        if self.n_parallel_envs % self.minibatches_per_epoch != 0:
            raise ValueError("env lanes must split evenly into minibatches")

    @property
    def unroll_length(self) -> int:
        return self.batch_steps // self.n_parallel_envs


# -- advantage estimation -----------------------------------------------------

def compute_gae(rewards, values, dones, truncations, bootstrap_values,
                gamma, lam):
    """Backward GAE recursion over (time, lane) arrays.

    ``dones`` marks episode ends of any kind; ``truncations`` marks the
    subset cut by the time limit.  ``bootstrap_values[t, n]`` supplies
    V(s_{t+1}) where the trajectory was cut (truncation rows and the final
    row of still-running lanes); true terminals bootstrap zero.  Credit
    never flows across an episode end.
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    dones = np.asarray(dones, dtype=bool)
    truncations = np.asarray(truncations, dtype=bool)
    bootstrap_values = np.asarray(bootstrap_values, dtype=np.float64)
    if not (rewards.shape == values.shape == dones.shape
            == truncations.shape == bootstrap_values.shape):
        raise ValueError("GAE inputs must share the (time, lane) shape")
    t_len, n_lanes = rewards.shape
    advantages = np.zeros((t_len, n_lanes), dtype=np.float64)
    carry = np.zeros(n_lanes, dtype=np.float64)
    for t in range(t_len - 1, -1, -1):
        terminal = dones[t] & ~truncations[t]
        if t == t_len - 1:
            v_next = np.where(terminal, 0.0, bootstrap_values[t])
        else:
            v_next = np.where(
                terminal, 0.0,
                np.where(dones[t], bootstrap_values[t], values[t + 1]))
        delta = rewards[t] + gamma * v_next - values[t]
        carry = delta + gamma * lam * (~dones[t]) * carry
        advantages[t] = carry
    return advantages


def value_targets(advantages, values):
    """TD(lambda) regression targets; identity target = advantage + value."""
    advantages = np.asarray(advantages, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    if advantages.shape != values.shape:
        raise ValueError("advantages and values must align")
    return advantages + values


def normalize_advantages(advantages):
    """Zero-mean unit-std over the whole iteration batch (float64)."""
    flat = np.asarray(advantages, dtype=np.float64)
    mean = flat.mean()
    std = flat.std()
    if std < 1e-12:
        raise TrainingDivergedError("degenerate advantage batch (zero std)")
    return (advantages - mean) / std


# -- optimizer ----------------------------------------------------------------

@dataclass
class AdamState:
    m: list
    v: list
    step: int = 0

    @staticmethod
    def for_net(net: PolicyValueNet) -> "AdamState":
        return AdamState(m=[np.zeros_like(t.values) for t in net.parameters()],
                         v=[np.zeros_like(t.values) for t in net.parameters()])


def adam_step(net: PolicyValueNet, grads, state: AdamState, config: PpoConfig):
    b1, b2 = config.adam_betas
    state.step += 1
    t = state.step
    lr = config.learning_rate
    for p, g, m, v in zip(net.parameters(), grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1 ** t)
        v_hat = v / (1.0 - b2 ** t)
        p.values -= (lr * m_hat / (np.sqrt(v_hat) + config.adam_eps)).astype(
            p.values.dtype)


def clip_gradients(grads, max_norm):
    """Global-norm clipping; returns (grads, pre-clip norm)."""
    total = 0.0
    for g in grads:
        total += float(np.sum(g.astype(np.float64) ** 2))
    norm = float(np.sqrt(total))
    if norm > max_norm:
        scale = max_norm / norm
        grads = [g * np.asarray(scale, dtype=g.dtype) for g in grads]
    return grads, norm


# -- rollout storage ----------------------------------------------------------

@dataclass
class AgentRollout:
    """Time-major trajectories of one agent for one iteration."""

    observations: np.ndarray     # (T, N, ...)
    actions: np.ndarray          # (T, N) int64
    prev_actions: np.ndarray     # (T, N) int64, -1 at episode starts
    behavior_logp: np.ndarray    # (T, N) float32
    values: np.ndarray           # (T, N) float64
    rewards: np.ndarray          # (T, N) float64
    dones: np.ndarray            # (T, N) bool
    truncations: np.ndarray      # (T, N) bool
    bootstrap_values: np.ndarray  # (T, N) float64
    init_h: np.ndarray           # (N, hidden)
    init_c: np.ndarray           # (N, hidden)
    advantages: np.ndarray | None = None
    targets: np.ndarray | None = None


@dataclass
class RolloutBatch:
    gripper: AgentRollout
    cauter: AgentRollout
    episode_returns: dict
    episode_outcomes: list


@dataclass
class TrainStats:
    iteration: int
    env_steps_total: int
    episodes: int
    mean_return: float
    return_gripper: float
    return_cauter: float
    outcome_fractions: dict
    policy_loss: float
    value_loss: float
    entropy: float
    clip_fraction: float
    grad_norm: float
    per_agent: dict

    CSV_HEADER = (
        "iteration,env_steps,episodes,return_mean,return_gripper,"
        "return_cauter,frac_reached_goal,frac_lost_grasp,frac_ran_out_of_time,"
        "policy_loss,value_loss,entropy,clip_fraction,grad_norm")

    def csv_row(self) -> str:
        f = self.outcome_fractions
        cells = [self.iteration, self.env_steps_total, self.episodes,
                 self.mean_return, self.return_gripper, self.return_cauter,
                 f.get("ReachedGoal", 0.0), f.get("LostGrasp", 0.0),
                 f.get("RanOutOfTime", 0.0), self.policy_loss,
                 self.value_loss, self.entropy, self.clip_fraction,
                 self.grad_norm]
        return ",".join(repr(c) if isinstance(c, float) else str(c)
                        for c in cells)


def append_telemetry(path, stats: TrainStats) -> None:
    path = Path(path)
    new = not path.exists()
    with path.open("a") as fh:
        if new:
            fh.write(TrainStats.CSV_HEADER + "\n")
        fh.write(stats.csv_row() + "\n")


# -- PPO objective ------------------------------------------------------------

def agent_surrogate(net: PolicyValueNet, rollout: AgentRollout, lanes,
                    config: PpoConfig):
    """Clipped-surrogate loss graph for one agent over whole-lane unrolls.

    Returns (total loss Tensor, stats dict).  Recurrent state starts from
    the stored segment-initial state and is zeroed across episode
    boundaries inside the unroll.
    """
    t_len = rollout.observations.shape[0]
    dtype = net.dtype
    h = Tensor(rollout.init_h[lanes].astype(dtype))
    c = Tensor(rollout.init_c[lanes].astype(dtype))
    logps, entropies, values = [], [], []
    for t in range(t_len):
        if t > 0:
            keep = (~rollout.dones[t - 1, lanes]).astype(dtype)[:, None]
            h = ad.mul(h, Tensor(keep))
            c = ad.mul(c, Tensor(keep))
        logits, v, (h, c) = net.forward(
            rollout.observations[t, lanes],
            action_onehot(rollout.prev_actions[t, lanes]), (h, c))
        lsm = ad.log_softmax(logits)
        logps.append(ad.gather_rows(lsm, rollout.actions[t, lanes]))
        entropies.append(ad.mul(ad.tsum(ad.mul(ad.exp(lsm), lsm), axis=-1),
                               Tensor(np.asarray(-1.0, dtype=dtype))))
        values.append(v)

    new_logp = ad.concat(logps, axis=0)
    entropy_mean = ad.tmean(ad.concat(entropies, axis=0))
    value_pred = ad.concat(values, axis=0)

    old_logp = rollout.behavior_logp[:, lanes].reshape(-1).astype(dtype)
    adv = rollout.advantages[:, lanes].reshape(-1).astype(dtype)
    targets = rollout.targets[:, lanes].reshape(-1).astype(dtype)

    ratio = ad.exp(ad.sub(new_logp, Tensor(old_logp)))
    eps = config.clip_ratio
    unclipped = ad.mul(ratio, Tensor(adv))
    clipped = ad.mul(ad.clip(ratio, 1.0 - eps, 1.0 + eps), Tensor(adv))
    policy_loss = ad.mul(ad.tmean(ad.minimum(unclipped, clipped)),
                         Tensor(np.asarray(-1.0, dtype=dtype)))
    value_loss = ad.tmean(ad.square(ad.sub(value_pred, Tensor(targets))))

    total = ad.sub(
        ad.add(policy_loss,
               ad.mul(value_loss, Tensor(np.asarray(config.value_coef, dtype=dtype)))),
        ad.mul(entropy_mean, Tensor(np.asarray(config.entropy_coef, dtype=dtype))))

    rv = ratio.values
    stats = {
        "policy_loss": float(policy_loss.values),
        "value_loss": float(value_loss.values),
        "entropy": float(entropy_mean.values),
        "clip_fraction": float(np.mean((rv < 1.0 - eps) | (rv > 1.0 + eps))),
    }
    return total, stats


def ppo_losses(nets: dict, batch: RolloutBatch, lanes, config: PpoConfig):
    """Per-agent surrogate losses on one minibatch of lanes.

    The two agents share no parameters, so the summed objective decomposes;
    each agent's loss tensor is returned for an independent backward pass
    alongside the combined stats.
    """
    losses, stats = {}, {}
    for agent, rollout in (("gripper", batch.gripper), ("cauter", batch.cauter)):
        loss, agent_stats = agent_surrogate(nets[agent], rollout, lanes, config)
        if not np.isfinite(loss.values):
            raise TrainingDivergedError(
                f"non-finite {agent} loss: {agent_stats}")
        losses[agent] = loss
        stats[agent] = agent_stats
    combined = {key: stats["gripper"][key] + stats["cauter"][key]
                for key in ("policy_loss", "value_loss")}
    combined["entropy"] = (stats["gripper"]["entropy"]
                           + stats["cauter"]["entropy"]) / 2.0
    combined["clip_fraction"] = (stats["gripper"]["clip_fraction"]
                                 + stats["cauter"]["clip_fraction"]) / 2.0
    return losses, stats, combined


# -- trainer -------------------------------------------------------------------

class IppoTrainer:
    """Owns the parallel envs, both agents and the optimization loop."""

    def __init__(self, env_config: EnvConfig, ppo_config: PpoConfig,
                 seed: int = 0, scene=None, telemetry_path=None,
                 arch: ArchSpec | None = None, loss_scales=(1.0, 1.0)):
        self.env_config = env_config
        self.config = ppo_config
        self.seed = seed
        self.telemetry_path = telemetry_path
        self.loss_scales = dict(zip(AGENTS, loss_scales))
        if arch is None:
            if env_config.obs_mode == "features":
                from .env import N_FEATURES
                arch = ArchSpec(mode="features", feature_dim=N_FEATURES)
            else:
                arch = ArchSpec(mode="image", image_size=env_config.image_size)
        self.arch = arch
        self.nets = {a: PolicyValueNet(arch, a, seed=seed) for a in AGENTS}
        self.adam = {a: AdamState.for_net(self.nets[a]) for a in AGENTS}
        self.sample_rng = {
            a: np.random.default_rng(np.random.SeedSequence([seed, 77, i]))
            for i, a in enumerate(AGENTS)}
        self.perm_rng = np.random.default_rng(np.random.SeedSequence([seed, 99]))

        n = ppo_config.n_parallel_envs
        self.envs = [CholecEnv(env_config, scene=scene) for _ in range(n)]
        self.iteration = 0
        self.env_steps_total = 0
        self._episode_counter = 0
        self._lane_obs = [None] * n
        self._lane_prev = {a: -np.ones(n, dtype=np.int64) for a in AGENTS}
        self._lane_state = {a: self.nets[a].initial_state(n) for a in AGENTS}
        self._lane_ep_step = np.zeros(n, dtype=np.int64)
        self._lane_ep_return = {a: np.zeros(n) for a in AGENTS}
        for lane in range(n):
            self._reset_lane(lane)

    # -- lane management --------------------------------------------------

    def _next_episode_seed(self) -> int:
        seed = self._episode_counter
        self._episode_counter += 1
        return seed

    def _reset_lane(self, lane: int) -> None:
        obs = self.envs[lane].reset(self._next_episode_seed())
        self._lane_obs[lane] = obs
        self._lane_ep_step[lane] = 0
        for agent in AGENTS:
            self._lane_prev[agent][lane] = -1
            h, c = self._lane_state[agent]
            h[lane] = 0.0
            c[lane] = 0.0
            self._lane_ep_return[agent][lane] = 0.0

    # -- rollout collection -------------------------------------------------

    def collect_rollout(self) -> RolloutBatch:
        cfg = self.config
        n, t_len = cfg.n_parallel_envs, cfg.unroll_length
        obs_shape = np.asarray(self._lane_obs[0]).shape
        store = {}
        for agent in AGENTS:
            h, c = self._lane_state[agent]
            store[agent] = AgentRollout(
                observations=np.zeros((t_len, n) + obs_shape, dtype=np.float32),
                actions=np.zeros((t_len, n), dtype=np.int64),
                prev_actions=np.zeros((t_len, n), dtype=np.int64),
                behavior_logp=np.zeros((t_len, n), dtype=np.float32),
                values=np.zeros((t_len, n), dtype=np.float64),
                rewards=np.zeros((t_len, n), dtype=np.float64),
                dones=np.zeros((t_len, n), dtype=bool),
                truncations=np.zeros((t_len, n), dtype=bool),
                bootstrap_values=np.zeros((t_len, n), dtype=np.float64),
                init_h=h.copy(), init_c=c.copy())
        episode_returns = {a: [] for a in AGENTS}
        outcomes = []

        for t in range(t_len):
            obs_batch = np.stack(self._lane_obs)
            step_actions = {}
            for agent in AGENTS:
                net = self.nets[agent]
                roll = store[agent]
                state = self._lane_state[agent]
                prev = self._lane_prev[agent]
                logits, value, (h_new, c_new) = net.forward(
                    obs_batch, action_onehot(prev), state)
                lsm32 = ad.log_softmax(logits).values
                actions, _, _ = sample_action(logits, self.sample_rng[agent])
                roll.observations[t] = obs_batch
                roll.prev_actions[t] = prev
                roll.actions[t] = actions
                roll.behavior_logp[t] = lsm32[np.arange(n), actions]
                roll.values[t] = value.values.astype(np.float64)
                self._lane_state[agent] = (h_new.values.copy(),
                                           c_new.values.copy())
                step_actions[agent] = actions

            for lane in range(n):
                result = self.envs[lane].step(
                    (int(step_actions["gripper"][lane]),
                     int(step_actions["cauter"][lane])))
                self.env_steps_total += 1
                rewards = {"gripper": result.reward_gripper,
                           "cauter": result.reward_cauter}
                if cfg.shared_reward:
                    shared = rewards["gripper"] + rewards["cauter"]
                    rewards = {a: shared for a in AGENTS}
                discount = cfg.gamma ** self._lane_ep_step[lane]
                for agent in AGENTS:
                    store[agent].rewards[t, lane] = rewards[agent]
                    store[agent].dones[t, lane] = result.done
                    self._lane_prev[agent][lane] = step_actions[agent][lane]
                    self._lane_ep_return[agent][lane] += discount * rewards[agent]
                self._lane_ep_step[lane] += 1
                self._lane_obs[lane] = result.observation

                if result.done:
                    outcomes.append(result.outcome)
                    for agent in AGENTS:
                        episode_returns[agent].append(
                            self._lane_ep_return[agent][lane])
                    if result.truncated:
                        self._bootstrap(store, t, lane, result.observation,
                                        truncation=True)
                    self._reset_lane(lane)

        # Segment-end bootstrap for lanes still mid-episode.
        last = t_len - 1
        running = ~np.stack([store["gripper"].dones[last]])[0]
        if running.any():
            obs_batch = np.stack(self._lane_obs)
            for agent in AGENTS:
                net = self.nets[agent]
                _, value, _ = net.forward(
                    obs_batch, action_onehot(self._lane_prev[agent]),
                    self._lane_state[agent])
                roll = store[agent]
                roll.bootstrap_values[last, running] = \
                    value.values.astype(np.float64)[running]

        return RolloutBatch(gripper=store["gripper"], cauter=store["cauter"],
                            episode_returns=episode_returns,
                            episode_outcomes=outcomes)

    def _bootstrap(self, store, t, lane, final_obs, truncation):
        """Value of the post-step observation for a time-limit cut."""
        for agent in AGENTS:
            net = self.nets[agent]
            h, c = self._lane_state[agent]
            _, value, _ = net.forward(
                final_obs[None], action_onehot([self._lane_prev[agent][lane]]),
                (h[lane:lane + 1], c[lane:lane + 1]))
            roll = store[agent]
            roll.truncations[t, lane] = truncation
            roll.bootstrap_values[t, lane] = float(value.values[0])

    # -- optimization --------------------------------------------------------

    def update(self, batch: RolloutBatch) -> dict:
        cfg = self.config
        for rollout in (batch.gripper, batch.cauter):
            adv = compute_gae(rollout.rewards, rollout.values, rollout.dones,
                              rollout.truncations, rollout.bootstrap_values,
                              cfg.gamma, cfg.gae_lambda)
            rollout.targets = value_targets(adv, rollout.values)
            rollout.advantages = normalize_advantages(adv)

        n = cfg.n_parallel_envs
        per_mb = n // cfg.minibatches_per_epoch
        agg = {"policy_loss": [], "value_loss": [], "entropy": [],
               "clip_fraction": [], "grad_norm": []}
        per_agent = {a: {"policy_loss": [], "value_loss": [], "entropy": [],
                         "clip_fraction": [], "grad_norm": []} for a in AGENTS}
        for _ in range(cfg.epochs_per_iteration):
            perm = self.perm_rng.permutation(n)
            for mb in range(cfg.minibatches_per_epoch):
                lanes = np.sort(perm[mb * per_mb:(mb + 1) * per_mb])
                losses, stats, combined = ppo_losses(self.nets, batch, lanes,
                                                     cfg)
                norms = []
                for agent in AGENTS:
                    net = self.nets[agent]
                    net.zero_grads()
                    scale = self.loss_scales[agent]
                    if scale == 0.0:
                        per_agent[agent]["grad_norm"].append(0.0)
                        continue
                    loss = losses[agent]
                    if scale != 1.0:
                        loss = ad.mul(loss, Tensor(
                            np.asarray(scale, dtype=net.dtype)))
                    ad.backward(loss)
                    grads = net.gradients()
                    grads, norm = clip_gradients(grads, cfg.grad_clip_norm)
                    adam_step(net, grads, self.adam[agent], cfg)
                    norms.append(norm)
                    per_agent[agent]["grad_norm"].append(norm)
                    for key in ("policy_loss", "value_loss", "entropy",
                                "clip_fraction"):
                        per_agent[agent][key].append(stats[agent][key])
                for key in ("policy_loss", "value_loss", "entropy",
                            "clip_fraction"):
                    agg[key].append(combined[key])
                agg["grad_norm"].append(float(np.mean(norms)) if norms else 0.0)
        return {
            "combined": {k: float(np.mean(v)) for k, v in agg.items()},
            "per_agent": {a: {k: float(np.mean(v)) if v else 0.0
                              for k, v in d.items()}
                          for a, d in per_agent.items()},
        }

    def train_iteration(self) -> TrainStats:
        batch = self.collect_rollout()
        losses = self.update(batch)
        self.iteration += 1

        outcome_counts = {o.value: 0 for o in Outcome}
        for outcome in batch.episode_outcomes:
            outcome_counts[outcome.value] += 1
        n_eps = len(batch.episode_outcomes)
        fractions = {k: (v / n_eps if n_eps else 0.0)
                     for k, v in outcome_counts.items()}
        ret_g = float(np.mean(batch.episode_returns["gripper"])) if n_eps else 0.0
        ret_c = float(np.mean(batch.episode_returns["cauter"])) if n_eps else 0.0
        stats = TrainStats(
            iteration=self.iteration,
            env_steps_total=self.env_steps_total,
            episodes=n_eps,
            mean_return=(ret_g + ret_c) / 2.0,
            return_gripper=ret_g,
            return_cauter=ret_c,
            outcome_fractions=fractions,
            policy_loss=losses["combined"]["policy_loss"],
            value_loss=losses["combined"]["value_loss"],
            entropy=losses["combined"]["entropy"],
            clip_fraction=losses["combined"]["clip_fraction"],
            grad_norm=losses["combined"]["grad_norm"],
            per_agent=losses["per_agent"])
        if self.telemetry_path:
            append_telemetry(self.telemetry_path, stats)
        return stats

    # -- persistence ----------------------------------------------------------

    def save(self, path) -> None:
        from .checkpoint import save_checkpoint
        save_checkpoint(path, self)

    @staticmethod
    def restore(path, scene=None) -> "IppoTrainer":
        from .checkpoint import restore_trainer
        return restore_trainer(path, scene=scene)
