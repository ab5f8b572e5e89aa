"""Frozen-policy and scripted episode execution with surgical skill metrics.

Teams are declared as picklable specs (policy checkpoint / scripted action
sequence / no-op / human), episodes run deterministically from a seed, and
every episode can be recorded as a replay log whose per-step state digests
make reproduction checkable.  Aggregation reports success rate plus
mean +/- std of completion time, per-instrument path length and per-pair
collision steps.
"""

from __future__ import annotations

import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import kinematics as kin
from .env import CholecEnv, EnvConfig, Outcome, config_hash
from .nets import action_onehot, greedy_action, sample_action

METRIC_FIELDS = ("success", "time_s", "pl_gripper_mm", "pl_cauter_mm",
                 "col_gl", "col_cl", "col_cg", "col_ii")


class HumanOutsideSessionError(RuntimeError):
    """A human controller is only valid inside a live session."""


class ReplayMismatchError(RuntimeError):
    """Replaying a log did not reproduce the recorded state digests."""


@dataclass(frozen=True)
class ControllerSpec:
    """Declarative controller choice for one instrument."""

    kind: str                       # "policy" | "scripted" | "noop" | "human"
    checkpoint: str | None = None
    greedy: bool = False
    actions: tuple = ()

    def __post_init__(self):
        if self.kind not in ("policy", "scripted", "noop", "human"):
            raise ValueError(f"unknown controller kind {self.kind!r}")
        if self.kind == "policy" and not self.checkpoint:
            raise ValueError("policy controller needs a checkpoint path")


@dataclass(frozen=True)
class TeamSpec:
    gripper: ControllerSpec
    cauter: ControllerSpec
    switch_control: bool = False


@dataclass(frozen=True)
class EpisodeMetrics:
    success: bool
    time_s: float
    pl_gripper_mm: float
    pl_cauter_mm: float
    col_gl: int
    col_cl: int
    col_cg: int
    col_ii: int
    outcome: Outcome

    def as_row(self) -> dict:
        return {
            "success": float(self.success),
            "time_s": self.time_s,
            "pl_gripper_mm": self.pl_gripper_mm,
            "pl_cauter_mm": self.pl_cauter_mm,
            "col_gl": float(self.col_gl),
            "col_cl": float(self.col_cl),
            "col_cg": float(self.col_cg),
            "col_ii": float(self.col_ii),
        }


@dataclass
class ReplayLog:
    config_hash: str
    episode_seed: int
    actions: list = field(default_factory=list)    # per step [gripper, cauter]
    digests: list = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps({
            "format": "lapteam-replay",
            "schema_version": 1,
            "config_hash": self.config_hash,
            "episode_seed": self.episode_seed,
            "actions": self.actions,
            "digests": self.digests,
        }, sort_keys=True)

    @staticmethod
    def from_json(text: str) -> "ReplayLog":
        data = json.loads(text)
        if data.get("format") != "lapteam-replay" or data.get("schema_version") != 1:
            raise ValueError("not a lapteam replay file")
        return ReplayLog(config_hash=data["config_hash"],
                         episode_seed=data["episode_seed"],
                         actions=data["actions"], digests=data["digests"])


def path_length(tip_positions) -> float:
    """Total Euclidean tip travel in millimeters."""
    pts = np.asarray(tip_positions, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[0] < 1:
        raise ValueError("need at least one tip position")
    if pts.shape[0] == 1:
        return 0.0
    return float(np.linalg.norm(np.diff(pts, axis=0), axis=1).sum())


# -- controllers ---------------------------------------------------------------

class NoopController:
    def reset(self, env, episode_seed):
        pass

    def act(self, env, observation, step_index):
        return kin.ACTION_NOOP


class ScriptedController:
    """Plays a fixed action sequence; no-op once exhausted."""

    def __init__(self, actions):
        self.actions = list(actions)

    def reset(self, env, episode_seed):
        pass

    def act(self, env, observation, step_index):
        if step_index < len(self.actions):
            action = self.actions[step_index]
            if isinstance(action, (list, tuple, np.ndarray)):
                return np.asarray(action, dtype=np.float64)
            return int(action)
        return kin.ACTION_NOOP


class PolicyController:
    """Frozen policy network with its own recurrent state and sampling rng.

    The rng is reseeded per episode from (policy seed, episode seed, agent)
    so episodes are reproducible regardless of execution order.
    """

    def __init__(self, net, agent: str, greedy: bool = False, seed: int = 0):
        self.net = net
        self.agent = agent
        self.greedy = greedy
        self.seed = seed
        self._state = None
        self._prev = -1
        self._rng = None

    def reset(self, env, episode_seed):
        self._state = self.net.initial_state(1)
        self._prev = -1
        self._rng = np.random.default_rng(np.random.SeedSequence(
            [self.seed & 0x7FFFFFFF, int(episode_seed) & 0x7FFFFFFFFFFF,
             0 if self.agent == "gripper" else 1]))

    def act(self, env, observation, step_index):
        logits, _, (h, c) = self.net.forward(
            np.asarray(observation)[None], action_onehot([self._prev]),
            self._state)
        self._state = (h.values, c.values)
        if self.greedy:
            action = int(greedy_action(logits)[0])
        else:
            actions, _, _ = sample_action(logits, self._rng)
            action = int(actions[0])
        self._prev = action
        return action


class HumanControllerStub:
    def reset(self, env, episode_seed):
        raise HumanOutsideSessionError(
            "human controllers require a live session (use `lapteam play`)")

    act = reset


def build_controller(spec: ControllerSpec, agent: str, policy_seed: int = 0):
    if spec.kind == "noop":
        return NoopController()
    if spec.kind == "scripted":
        return ScriptedController(spec.actions)
    if spec.kind == "human":
        return HumanControllerStub()
    from .checkpoint import load_policy_net
    net, _ = load_policy_net(spec.checkpoint, agent)
    return PolicyController(net, agent, greedy=spec.greedy, seed=policy_seed)


def _resolve_team(team, policy_seed):
    if isinstance(team, TeamSpec):
        return (build_controller(team.gripper, "gripper", policy_seed),
                build_controller(team.cauter, "cauter", policy_seed))
    return team    # (gripper controller, cauter controller) duck-typed pair


# -- episode execution ----------------------------------------------------------

def run_episode(env_config: EnvConfig, team, episode_seed: int,
                record: bool = False, env: CholecEnv | None = None,
                policy_seed: int = 0):
    """One full episode; returns (EpisodeMetrics, ReplayLog or None)."""
    env = env or CholecEnv(env_config)
    gripper, cauter = _resolve_team(team, policy_seed)
    obs = env.reset(episode_seed)
    gripper.reset(env, episode_seed)
    cauter.reset(env, episode_seed)

    log = ReplayLog(config_hash=config_hash(env.config),
                    episode_seed=episode_seed) if record else None
    tips_g = [env.state.gripper_tip.copy()]
    tips_c = [env.state.cauter_tip.copy()]
    cols = {"gl": 0, "cl": 0, "cg": 0, "ii": 0}
    result = None
    step = 0
    while True:
        a_g = gripper.act(env, obs, step)
        a_c = cauter.act(env, obs, step)
        result = env.step((a_g, a_c))
        obs = result.observation
        step += 1
        tips_g.append(result.info["gripper_tip_mm"])
        tips_c.append(result.info["cauter_tip_mm"])
        rep = result.collisions
        cols["gl"] += rep.gripper_liver.hit
        cols["cl"] += rep.cauter_liver.hit
        cols["cg"] += rep.cauter_gallbladder.hit
        cols["ii"] += rep.instrument_instrument.hit
        if log is not None:
            log.actions.append([_action_json(a_g), _action_json(a_c)])
            log.digests.append(env.digest())
        if result.done:
            break

    metrics = EpisodeMetrics(
        success=result.outcome is Outcome.REACHED_GOAL,
        time_s=step / 30.0,
        pl_gripper_mm=path_length(tips_g),
        pl_cauter_mm=path_length(tips_c),
        col_gl=cols["gl"], col_cl=cols["cl"], col_cg=cols["cg"],
        col_ii=cols["ii"], outcome=result.outcome)
    return metrics, log


def _action_json(action):
    if isinstance(action, (int, np.integer)):
        return int(action)
    return [float(v) for v in np.asarray(action)]


def replay_episode(env_config: EnvConfig, log: ReplayLog,
                   env: CholecEnv | None = None):
    """Re-run a replay log, verifying every recorded state digest."""
    env = env or CholecEnv(env_config)
    if config_hash(env.config) != log.config_hash:
        raise ReplayMismatchError("config hash differs from the recording")
    team = (ScriptedController([a[0] for a in log.actions]),
            ScriptedController([a[1] for a in log.actions]))
    env.reset(log.episode_seed)
    for k, expected in enumerate(log.digests):
        action = log.actions[k]
        env.step((team[0].act(env, None, k), team[1].act(env, None, k)))
        got = env.digest()
        if got != expected:
            raise ReplayMismatchError(
                f"digest mismatch at step {k}: {got} != {expected} "
                f"(seed {log.episode_seed})")
    state = env.state
    return state.outcome


# -- aggregation -----------------------------------------------------------------

@dataclass
class AggregateReport:
    n_episodes: int
    seed_base: int
    config_hash: str
    success_rate: float
    mean: dict
    std: dict
    episodes: list

    def table_rows(self):
        """Rows in the conventional skills-table layout."""
        rows = [("Success [%]", self.success_rate * 100.0,
                 self.std["success"] * 100.0)]
        for label, key in (("Time [s]", "time_s"),
                           ("PL-G [mm]", "pl_gripper_mm"),
                           ("PL-C [mm]", "pl_cauter_mm"),
                           ("Col-GL [steps]", "col_gl"),
                           ("Col-CL [steps]", "col_cl"),
                           ("Col-CG [steps]", "col_cg"),
                           ("Col-II [steps]", "col_ii")):
            rows.append((label, self.mean[key], self.std[key]))
        return rows


def _episode_worker(args):
    env_config_json, team, seeds, record, policy_seed = args
    env_config = EnvConfig.from_json(env_config_json)
    env = CholecEnv(env_config)
    out = []
    for seed in seeds:
        metrics, log = run_episode(env_config, team, seed, record=record,
                                   env=env, policy_seed=policy_seed)
        out.append((seed, metrics, log))
    return out


def evaluate(env_config: EnvConfig, team, n_episodes: int, seed_base: int = 0,
             record: bool = False, n_workers: int = 1, policy_seed: int = 0):
    """Run n episodes over sequential seeds; aggregate mean +/- std.

    Aggregation is a deterministic reduction in seed order, independent of
    worker scheduling.  Returns (AggregateReport, replay logs).
    """
    if n_episodes < 1:
        raise ValueError("n_episodes must be >= 1")
    seeds = list(range(seed_base, seed_base + n_episodes))
    results = {}
    if n_workers > 1 and isinstance(team, TeamSpec):
        chunks = [seeds[i::n_workers] for i in range(n_workers)]
        jobs = [(env_config.to_json(), team, chunk, record, policy_seed)
                for chunk in chunks if chunk]
        with ProcessPoolExecutor(max_workers=n_workers) as pool:
            for chunk_result in pool.map(_episode_worker, jobs):
                for seed, metrics, log in chunk_result:
                    results[seed] = (metrics, log)
    else:
        env = CholecEnv(env_config)
        for seed in seeds:
            results[seed] = run_episode(env_config, team, seed, record=record,
                                        env=env, policy_seed=policy_seed)

    episodes = [results[s][0] for s in seeds]
    replays = [results[s][1] for s in seeds if results[s][1] is not None]
    rows = [m.as_row() for m in episodes]
    mean = {k: float(np.mean([r[k] for r in rows])) for k in rows[0]}
    std = {k: float(np.std([r[k] for r in rows])) for k in rows[0]}
    report = AggregateReport(
        n_episodes=n_episodes, seed_base=seed_base,
        config_hash=config_hash(env_config),
        success_rate=mean["success"], mean=mean, std=std, episodes=episodes)
    return report, replays


# -- report files -----------------------------------------------------------------

def write_report(report: AggregateReport, replays, out_dir) -> dict:
    """CSV metrics table, JSON summary and replay files.

    Deterministic serialization: regenerating from the same inputs yields
    byte-identical files.  Filenames embed the config hash and seed range.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    tag = (f"{report.config_hash}_seeds{report.seed_base}-"
           f"{report.seed_base + report.n_episodes - 1}")

    table_path = out / f"metrics_{tag}.csv"
    lines = ["metric,mean,std"]
    for label, mean, std in report.table_rows():
        lines.append(f"{label},{mean!r},{std!r}")
    table_path.write_text("\n".join(lines) + "\n")

    summary_path = out / f"summary_{tag}.json"
    summary = {
        "config_hash": report.config_hash,
        "n_episodes": report.n_episodes,
        "seed_base": report.seed_base,
        "success_rate": report.success_rate,
        "mean": report.mean,
        "std": report.std,
        "outcomes": {o.value: sum(m.outcome is o for m in report.episodes)
                     for o in Outcome},
    }
    summary_path.write_text(json.dumps(summary, sort_keys=True, indent=1) + "\n")

    replay_paths = []
    for log in replays:
        rp = out / f"replay_{report.config_hash}_seed{log.episode_seed}.json"
        rp.write_text(log.to_json() + "\n")
        replay_paths.append(rp)
    return {"table": table_path, "summary": summary_path,
            "replays": replay_paths}
