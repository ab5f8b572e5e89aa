"""The two-instrument cholecystectomy sub-task environment.

One episode: the gripper starts holding the gallbladder neck, the cauter at
a standoff pose; a target on the liver-gallbladder border is hidden under
the tissue.  Each step both agents act (discrete ids for artificial agents,
[-1,1]^4 axes for humans), physics advances 1/30 s, and the episode ends
with exactly one of three outcomes: the cauter tip reaches the visible
target, the grasp is lost entirely, or the step limit runs out.

Observations are shared by both agents; rewards are individual.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, replace
from enum import Enum

import numpy as np

from . import kinematics as kin
from . import softbody as sb
from .geometry import hemisphere_points
from .scene import Scene, build_default_scene, load_scene

TICK_SECONDS = 1.0 / 30.0
CONFIG_SCHEMA_VERSION = 1

FEATURE_NAMES = (
    "g_pan", "g_tilt", "g_spin", "g_ins",
    "c_pan", "c_tilt", "c_spin", "c_ins",
    "g_tip_x", "g_tip_y", "g_tip_z",
    "c_tip_x", "c_tip_y", "c_tip_z",
    "tgt_x", "tgt_y", "tgt_z",
    "delta_x", "delta_y", "delta_z", "dist",
    "visible", "obstruct", "grasp", "step_frac",
)
N_FEATURES = len(FEATURE_NAMES)

_POS_SCALE = 200.0      # mm; tips and targets stay well inside this
_DELTA_SCALE = 150.0    # mm; cauter-to-target offsets


class ConfigError(ValueError):
    """Invalid environment configuration."""


class EpisodeDoneError(RuntimeError):
    """step() was called on a finished episode."""


class Outcome(Enum):
    REACHED_GOAL = "ReachedGoal"
    RAN_OUT_OF_TIME = "RanOutOfTime"
    LOST_GRASP = "LostGrasp"


@dataclass(frozen=True)
class RewardWeights:
    dist_per_mm: float = 0.002
    visible: float = 0.1
    obstruct_per_triangle: float = 0.002
    lost_contact: float = 1.0
    insertion_per_mm: float = 0.0005
    col_gripper_liver: float = 0.1
    col_cauter_liver: float = 0.1
    col_cauter_gallbladder: float = 0.1
    col_instruments: float = 0.1
    success: float = 10.0
    grasp_lost_terminal: float = 10.0


@dataclass(frozen=True)
class EnvConfig:
    seed: int = 0
    obs_mode: str = "features"                # "features" | "image"
    image_size: tuple[int, int] = (64, 64)    # (width, height)
    time_limit_steps: int = 1000
    success_tolerance_mm: float = 5.0
    visibility_success_threshold: float = 0.5
    n_rays: int = 64
    settle_steps: int = 45
    jitter_deg: float = 2.0
    jitter_mm: float = 2.0
    grasp_break_threshold_mm: float = 5.0
    weights: RewardWeights = field(default_factory=RewardWeights)
    scene_path: str | None = None

    def __post_init__(self):
        if self.time_limit_steps < 1:
            raise ConfigError("time_limit_steps must be >= 1")
        if self.success_tolerance_mm <= 0:
            raise ConfigError("success tolerance must be positive")
        if not 0.0 <= self.visibility_success_threshold <= 1.0:
            raise ConfigError("visibility threshold must lie in [0, 1]")
        if self.obs_mode not in ("features", "image"):
            raise ConfigError(f"unknown obs_mode {self.obs_mode!r}")
        if self.n_rays < 1:
            raise ConfigError("n_rays must be >= 1")
        values = asdict(self.weights).values()
        if not all(np.isfinite(v) for v in values):
            raise ConfigError("reward weights must be finite")

    def to_json(self) -> str:
        data = {"schema_version": CONFIG_SCHEMA_VERSION, **asdict(self)}
        data["image_size"] = list(self.image_size)
        return json.dumps(data, sort_keys=True, indent=1)

    @staticmethod
    def from_json(text: str) -> "EnvConfig":
        data = json.loads(text)
        version = data.pop("schema_version", None)
        if version != CONFIG_SCHEMA_VERSION:
            raise ConfigError(f"config schema version {version!r} unsupported")
        weights = RewardWeights(**data.pop("weights", {}))
        data["image_size"] = tuple(data.get("image_size", (64, 64)))
        return EnvConfig(weights=weights, **data)


def config_hash(config: EnvConfig) -> str:
    return hashlib.blake2b(config.to_json().encode(), digest_size=8).hexdigest()


@dataclass
class WorldState:
    """Everything the reward and observation functions read."""

    step_index: int
    gripper_pose: kin.InstrumentPose
    cauter_pose: kin.InstrumentPose
    body: sb.DeformableBody
    grasps: tuple
    target_index: int
    target: sb.TargetSphere
    gripper_tip: np.ndarray
    cauter_tip: np.ndarray
    visible_fraction: float
    obstructing_triangles: int
    collisions: sb.CollisionReport
    newly_broken: int
    cauter_target_dist: float
    success: bool
    done: bool
    outcome: Outcome | None

    @property
    def unbroken_grasps(self) -> int:
        return sum(not g.broken for g in self.grasps)


@dataclass(frozen=True)
class StepResult:
    observation: np.ndarray
    reward_gripper: float
    reward_cauter: float
    done: bool
    outcome: Outcome | None
    collisions: sb.CollisionReport
    info: dict

    @property
    def truncated(self) -> bool:
        return self.outcome is Outcome.RAN_OUT_OF_TIME


def reward_cauter(state: WorldState, weights: RewardWeights) -> float:
    """Distance shaping plus collision penalties and the shared success bonus."""
    col = state.collisions
    r = -weights.dist_per_mm * state.cauter_target_dist
    r -= weights.col_cauter_liver * col.cauter_liver.hit
    r -= weights.col_cauter_gallbladder * col.cauter_gallbladder.hit
    r -= weights.col_instruments * col.instrument_instrument.hit
    if state.success:
        r += weights.success
    return float(r)


def reward_gripper(state: WorldState, weights: RewardWeights) -> float:
    """Exposure shaping: reward visibility, penalize obstruction, lost
    contacts, insertion depth, collisions; terminal bonuses/penalties."""
    col = state.collisions
    r = weights.visible * state.visible_fraction
    r -= weights.obstruct_per_triangle * state.obstructing_triangles
    r -= weights.lost_contact * state.newly_broken
    r -= weights.insertion_per_mm * state.gripper_pose.insertion_mm
    r -= weights.col_gripper_liver * col.gripper_liver.hit
    r -= weights.col_instruments * col.instrument_instrument.hit
    if state.success:
        r += weights.success
    if state.outcome is Outcome.LOST_GRASP:
        r -= weights.grasp_lost_terminal
    return float(r)


def feature_observation(state: WorldState, config: EnvConfig,
                        limits: kin.DofLimits) -> np.ndarray:
    """Normalized shared feature vector; every component lies in [-1, 1].

    Layout is FEATURE_NAMES: both poses (limit-relative), both tips, the
    target, the cauter-to-target offset and distance, visibility,
    obstruction, unbroken-grasp fraction and episode progress.
    """
    def pose_block(pose):
        return (pose.pan_deg / limits.pan[1],
                pose.tilt_deg / limits.tilt[1],
                pose.spin_deg / limits.spin[1],
                2.0 * pose.insertion_mm / limits.insertion[1] - 1.0)

    delta = state.target.center_mm - state.cauter_tip
    vec = np.array(
        pose_block(state.gripper_pose) + pose_block(state.cauter_pose)
        + tuple(state.gripper_tip / _POS_SCALE)
        + tuple(state.cauter_tip / _POS_SCALE)
        + tuple(state.target.center_mm / _POS_SCALE)
        + tuple(delta / _DELTA_SCALE)
        + (state.cauter_target_dist / _DELTA_SCALE,
           state.visible_fraction,
           state.obstructing_triangles / max(1, state.body.triangles.shape[0]),
           state.unbroken_grasps / max(1, len(state.grasps)),
           state.step_index / config.time_limit_steps),
        dtype=np.float32)
    return np.clip(vec, -1.0, 1.0)


def state_digest(state: WorldState) -> str:
    """64-bit hash of the canonicalized dynamic state (replay checks)."""
    h = hashlib.blake2b(digest_size=8)
    h.update(np.int64(state.step_index).tobytes())
    h.update(state.gripper_pose.as_array().tobytes())
    h.update(state.cauter_pose.as_array().tobytes())
    h.update(state.body.vertices.tobytes())
    h.update(np.array([g.broken for g in state.grasps], dtype=np.bool_).tobytes())
    h.update(np.int64(state.target_index).tobytes())
    h.update((state.outcome.value if state.outcome else "-").encode())
    return h.hexdigest()


class CholecEnv:
    """Deterministic environment with the conventional step/reset contract.

    One instance per rollout worker; instances share only the immutable
    scene template and config.
    """

    def __init__(self, config: EnvConfig, scene: Scene | None = None,
                 sim_params: sb.SimParams | None = None):
        self.config = config
        if scene is not None:
            self.scene = scene
        elif config.scene_path:
            self.scene = load_scene(config.scene_path)
        else:
            self.scene = build_default_scene()
        self.sim = sim_params or sb.SimParams()
        self.limits = kin.DofLimits()
        self._gripper_frame = self.scene.gripper_frame()
        self._cauter_frame = self.scene.cauter_frame()
        self.state: WorldState | None = None
        self._ray_points: np.ndarray | None = None
        self.axis_clamp_warnings = 0

    # -- episode control ----------------------------------------------------

    def reset(self, episode_seed: int) -> np.ndarray:
        cfg = self.config
        rng = np.random.default_rng(
            np.random.SeedSequence([cfg.seed & 0x7FFFFFFF, int(episode_seed) & 0x7FFFFFFFFFFF]))

        jd, jm = cfg.jitter_deg, cfg.jitter_mm
        gripper_pose = self.limits.clamp(kin.InstrumentPose(
            rng.uniform(-jd, jd), rng.uniform(-jd, jd), 0.0,
            self.scene.gripper_insertion0 + rng.uniform(-jm, jm)))
        cauter_pose = self.limits.clamp(kin.InstrumentPose(
            rng.uniform(-jd, jd), rng.uniform(-jd, jd), 0.0,
            self.scene.cauter_insertion0 + rng.uniform(-jm, jm)))
        target_index = int(rng.integers(0, 3))
        target = sb.TargetSphere(self.scene.target_positions[target_index],
                                 self.scene.target_radius_mm)
        self._ray_points = hemisphere_points(
            target.center_mm, target.radius_mm,
            self.scene.camera_position, cfg.n_rays)

        body = self.scene.make_body()
        g_tip = kin.tip_transform(self._gripper_frame, gripper_pose)
        grasps = sb.attach_grasp(body, self.scene.grasp_ids, g_tip)
        for _ in range(cfg.settle_steps):
            body = sb.step_physics(body, grasps, g_tip, TICK_SECONDS,
                                   params=self.sim)
            grasps = sb.update_grasp(grasps, body, g_tip,
                                     cfg.grasp_break_threshold_mm, self.sim)

        c_tip = kin.tip_transform(self._cauter_frame, cauter_pose)
        visible, obstruct = sb.occlusion_query_points(
            body, self.scene.camera_position, self._ray_points)
        dist = float(np.linalg.norm(target.center_mm - c_tip[1]))
        self.state = WorldState(
            step_index=0, gripper_pose=gripper_pose, cauter_pose=cauter_pose,
            body=body, grasps=grasps, target_index=target_index, target=target,
            gripper_tip=g_tip[1], cauter_tip=c_tip[1],
            visible_fraction=visible, obstructing_triangles=obstruct,
            collisions=sb.CollisionReport(), newly_broken=0,
            cauter_target_dist=dist, success=False, done=False, outcome=None)
        return self.observe()

    def step(self, joint_action) -> StepResult:
        state = self.state
        if state is None:
            raise EpisodeDoneError("reset() must be called before step()")
        if state.done:
            raise EpisodeDoneError("step() called on a finished episode")
        cfg = self.config

        gripper_pose = self._apply_action(state.gripper_pose, joint_action[0])
        cauter_pose = self._apply_action(state.cauter_pose, joint_action[1])
        g_rot, g_pos = kin.tip_transform(self._gripper_frame, gripper_pose)
        c_rot, c_pos = kin.tip_transform(self._cauter_frame, cauter_pose)

        body = sb.step_physics(state.body, state.grasps, (g_rot, g_pos),
                               TICK_SECONDS, params=self.sim)
        broken_before = sum(g.broken for g in state.grasps)
        grasps = sb.update_grasp(state.grasps, body, (g_rot, g_pos),
                                 cfg.grasp_break_threshold_mm, self.sim)
        newly_broken = sum(g.broken for g in grasps) - broken_before

        gripper_cap = sb.Capsule(self._gripper_frame.pivot_mm, g_pos)
        cauter_cap = sb.Capsule(self._cauter_frame.pivot_mm, c_pos)
        collisions = sb.detect_collisions(
            body, self.scene.liver_vertices, self.scene.liver_triangles,
            gripper_cap, cauter_cap)
        visible, obstruct = sb.occlusion_query_points(
            body, self.scene.camera_position, self._ray_points)
        dist = float(np.linalg.norm(state.target.center_mm - c_pos))

        step_index = state.step_index + 1
        success = (dist <= cfg.success_tolerance_mm
                   and visible >= cfg.visibility_success_threshold)
        all_lost = all(g.broken for g in grasps)
        if success:
            outcome = Outcome.REACHED_GOAL
        elif all_lost:
            outcome = Outcome.LOST_GRASP
        elif step_index >= cfg.time_limit_steps:
            outcome = Outcome.RAN_OUT_OF_TIME
        else:
            outcome = None

        self.state = WorldState(
            step_index=step_index, gripper_pose=gripper_pose,
            cauter_pose=cauter_pose, body=body, grasps=grasps,
            target_index=state.target_index, target=state.target,
            gripper_tip=g_pos, cauter_tip=c_pos,
            visible_fraction=visible, obstructing_triangles=obstruct,
            collisions=collisions, newly_broken=newly_broken,
            cauter_target_dist=dist, success=success,
            done=outcome is not None, outcome=outcome)

        r_g = reward_gripper(self.state, cfg.weights)
        r_c = reward_cauter(self.state, cfg.weights)
        return StepResult(
            observation=self.observe(),
            reward_gripper=r_g, reward_cauter=r_c,
            done=self.state.done, outcome=outcome, collisions=collisions,
            info={
                "step_index": step_index,
                "gripper_tip_mm": g_pos.copy(),
                "cauter_tip_mm": c_pos.copy(),
                "visible_fraction": visible,
                "unbroken_grasps": self.state.unbroken_grasps,
                "newly_broken": newly_broken,
                "cauter_target_dist_mm": dist,
                "target_index": state.target_index,
            })

    def observe(self) -> np.ndarray:
        if self.config.obs_mode == "image":
            from .render import render_scene
            return render_scene(self.state, self.scene, self.config)
        return feature_observation(self.state, self.config, self.limits)

    def digest(self) -> str:
        return state_digest(self.state)

    # -- helpers -------------------------------------------------------------

    def _apply_action(self, pose, action):
        if isinstance(action, (int, np.integer)):
            return kin.apply_discrete(pose, int(action), self.limits)
        new_pose, clamped = kin.apply_continuous(pose, action, limits=self.limits)
        self.axis_clamp_warnings += clamped
        return new_pose
