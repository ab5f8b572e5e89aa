"""Live session service: fixed-rate stepping, human input merging and
state-frame streaming for hybrid teams.

Simulation time is logical (a tick counter), never wall-clock: the paced
30 Hz loop only controls presentation rate, so identical per-tick action
sequences reproduce identical episodes in live sessions, headless runs and
replays.  Inputs land in per-instrument latest-wins slots; each tick
consumes at most one input per instrument and a missing input means zero
axes.
"""

from __future__ import annotations

import asyncio
import json
from dataclasses import dataclass, field

import numpy as np
from fastapi import FastAPI, WebSocket, WebSocketDisconnect

from . import kinematics as kin
from .env import CholecEnv, EnvConfig, config_hash
from .evaluation import (ControllerSpec, NoopController, TeamSpec,
                         build_controller)

SCHEMA_VERSION = 1
TICK_RATE_HZ = 30.0
MAX_FRAME_VERTICES = 100

INSTRUMENTS = ("gripper", "cauter")


class SessionConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SessionConfig:
    team: TeamSpec
    env_config: EnvConfig = field(default_factory=EnvConfig)
    port: int = 8700
    tick_rate_hz: float = TICK_RATE_HZ
    seed_base: int = 0
    max_session_episodes: int = 0      # 0 = unlimited
    lockstep: bool = False             # tick driven by messages, not a timer
    policy_seed: int = 0

    def __post_init__(self):
        if self.tick_rate_hz != TICK_RATE_HZ:
            raise SessionConfigError(
                "tick rate is fixed at 30 Hz for parity with training")
        if self.team.switch_control:
            kinds = {self.team.gripper.kind, self.team.cauter.kind}
            if kinds != {"human"}:
                raise SessionConfigError(
                    "switch-control sessions are single-human teams")


def parse_input_message(data: dict):
    """Validate a client input; returns (InputSlot fields, n_clamped)."""
    if data.get("type") != "input":
        raise SessionConfigError(f"not an input message: {data.get('type')!r}")
    if data.get("schema_version") != SCHEMA_VERSION:
        raise SessionConfigError(
            f"schema_version {data.get('schema_version')!r} != {SCHEMA_VERSION}")
    instrument = data.get("instrument")
    if instrument not in INSTRUMENTS:
        raise SessionConfigError(f"unknown instrument {instrument!r}")
    axes = np.asarray(data.get("axes", [0.0] * 4), dtype=np.float64)
    if axes.shape != (4,) or not np.all(np.isfinite(axes)):
        raise SessionConfigError("axes must be 4 finite numbers")
    clamped = np.clip(axes, -1.0, 1.0)
    n_clamped = int(np.count_nonzero(clamped != axes))
    buttons = data.get("buttons", {})
    return {
        "instrument": instrument,
        "axes": clamped,
        "switch": bool(buttons.get("switch_instrument", False)),
        "reset": bool(buttons.get("reset_episode", False)),
        "client_id": data.get("client_id", "?"),
    }, n_clamped


class SessionService:
    """Authoritative simulation loop state; one session per instance."""

    def __init__(self, config: SessionConfig, scene=None):
        self.config = config
        self.env = CholecEnv(config.env_config, scene=scene)
        self.team = config.team
        self.controllers = {}
        self.human_instruments = set()
        for name, spec in (("gripper", config.team.gripper),
                           ("cauter", config.team.cauter)):
            if spec.kind == "human":
                self.controllers[name] = None
                self.human_instruments.add(name)
            else:
                self.controllers[name] = build_controller(
                    spec, name, config.policy_seed)
        self._input_slots = {name: None for name in INSTRUMENTS}
        self.active_instrument = "gripper"
        self.episode_index = -1
        self.awaiting_reset = False
        self.finished = False
        self.axis_clamp_warnings = 0
        self.cumulative = {"gripper": 0.0, "cauter": 0.0}
        self._last_rewards = {"gripper": 0.0, "cauter": 0.0}
        self._obs = None
        self._decimate = None
        self.start_episode()

    # -- episode control ---------------------------------------------------

    def start_episode(self) -> None:
        if (self.config.max_session_episodes
                and self.episode_index + 1 >= self.config.max_session_episodes):
            self.finished = True
            self.awaiting_reset = True
            return
        self.episode_index += 1
        seed = self.config.seed_base + self.episode_index
        self._obs = self.env.reset(seed)
        for name, controller in self.controllers.items():
            if controller is not None:
                controller.reset(self.env, seed)
        n = self.env.state.body.vertices.shape[0]
        stride = max(1, -(-n // MAX_FRAME_VERTICES))
        self._decimate = np.arange(0, n, stride)
        self.cumulative = {"gripper": 0.0, "cauter": 0.0}
        self._last_rewards = {"gripper": 0.0, "cauter": 0.0}
        self.awaiting_reset = False

    def submit_input(self, data: dict):
        """Deposit a client input into its latest-wins slot."""
        slot, n_clamped = parse_input_message(data)
        self.axis_clamp_warnings += n_clamped
        instrument = slot["instrument"]
        if instrument not in self.human_instruments \
                and not self.team.switch_control:
            raise SessionConfigError(
                f"instrument {instrument!r} is not human-controlled")
        self._input_slots[instrument] = slot
        return n_clamped

    def _consume_input(self, instrument):
        slot = self._input_slots[instrument]
        self._input_slots[instrument] = None
        return slot

    def tick(self) -> dict:
        """Advance one logical step and return the state frame."""
        if self.finished:
            return self.frame(status="finished")
        if self.awaiting_reset:
            # Paused on the outcome screen until someone presses reset.
            for name in INSTRUMENTS:
                slot = self._consume_input(name)
                if slot and slot["reset"]:
                    self.start_episode()
                    break
            else:
                return self.frame(status="awaiting_reset")
            return self.frame(status="finished" if self.finished else "running")

        actions = {}
        if self.team.switch_control:
            slot = (self._consume_input("gripper")
                    or self._consume_input("cauter"))
            if slot and slot["reset"]:
                self.start_episode()
                return self.frame(status="running")
            if slot and slot["switch"]:
                self.active_instrument = (
                    "cauter" if self.active_instrument == "gripper"
                    else "gripper")
            axes = slot["axes"] if slot else np.zeros(4)
            for name in INSTRUMENTS:
                actions[name] = (axes if name == self.active_instrument
                                 else kin.ACTION_NOOP)
        else:
            for name in INSTRUMENTS:
                if name in self.human_instruments:
                    slot = self._consume_input(name)
                    if slot and slot["reset"]:
                        self.start_episode()
                        return self.frame(status="running")
                    actions[name] = slot["axes"] if slot else np.zeros(4)
                else:
                    actions[name] = self.controllers[name].act(
                        self.env, self._obs, self.env.state.step_index)

        result = self.env.step((actions["gripper"], actions["cauter"]))
        self._obs = result.observation
        self._last_rewards = {"gripper": result.reward_gripper,
                              "cauter": result.reward_cauter}
        self.cumulative["gripper"] += result.reward_gripper
        self.cumulative["cauter"] += result.reward_cauter
        if result.done:
            self.awaiting_reset = True
        return self.frame(status="running")

    # -- frames --------------------------------------------------------------

    def frame(self, status="running") -> dict:
        state = self.env.state
        verts = state.body.vertices[self._decimate]
        data = {
            "type": "state",
            "schema_version": SCHEMA_VERSION,
            "status": status,
            "episode_index": self.episode_index,
            "step_index": int(state.step_index),
            "poses": {
                "gripper": [float(v) for v in state.gripper_pose.as_array()],
                "cauter": [float(v) for v in state.cauter_pose.as_array()],
            },
            "tips_mm": {
                "gripper": [float(v) for v in state.gripper_tip],
                "cauter": [float(v) for v in state.cauter_tip],
            },
            "pivots_mm": {
                "gripper": [float(v) for v in self.env.scene.gripper_pivot],
                "cauter": [float(v) for v in self.env.scene.cauter_pivot],
            },
            "gallbladder_points_mm": [[float(c) for c in v] for v in verts],
            "target_mm": [float(v) for v in state.target.center_mm],
            "target_radius_mm": float(state.target.radius_mm),
            "visible_fraction": float(state.visible_fraction),
            "reward_step": dict(self._last_rewards),
            "reward_cumulative": dict(self.cumulative),
            "grasp_count": int(state.unbroken_grasps),
            "active_instrument": (self.active_instrument
                                  if self.team.switch_control else None),
            "outcome": state.outcome.value if state.outcome else None,
            "digest": self.env.digest(),
        }
        return data

    def hello(self) -> dict:
        return {
            "type": "hello",
            "schema_version": SCHEMA_VERSION,
            "config_hash": config_hash(self.config.env_config),
            "lockstep": self.config.lockstep,
            "team": {
                "gripper": self.team.gripper.kind,
                "cauter": self.team.cauter.kind,
                "switch_control": self.team.switch_control,
            },
            "camera": {
                "position_mm": [float(v) for v in self.env.scene.camera_position],
                "look_at_mm": [float(v) for v in self.env.scene.camera_look_at],
                "fov_deg": float(self.env.scene.camera_fov_deg),
            },
            "liver_bounds_mm": {
                "x": [float(self.env.scene.liver_vertices[:, 0].min()),
                      float(self.env.scene.liver_vertices[:, 0].max())],
                "z": [float(self.env.scene.liver_vertices[:, 2].min()),
                      float(self.env.scene.liver_vertices[:, 2].max())],
            },
        }


def create_app(service: SessionService):
    """FastAPI app exposing /session (websocket), /health and /config."""
    from fastapi import FastAPI, WebSocket, WebSocketDisconnect

    app = FastAPI(title="lapteam session gateway")
    clients: list = []

    @app.get("/health")
    def health():
        return {
            "status": "finished" if service.finished else "ok",
            "schema_version": SCHEMA_VERSION,
            "episode_index": service.episode_index,
            "step_index": int(service.env.state.step_index),
            "clients": len(clients),
            "axis_clamp_warnings": service.axis_clamp_warnings,
        }

    @app.get("/config")
    def config():
        return {
            "schema_version": SCHEMA_VERSION,
            "lockstep": service.config.lockstep,
            "seed_base": service.config.seed_base,
            "max_session_episodes": service.config.max_session_episodes,
            "tick_rate_hz": service.config.tick_rate_hz,
            "team": service.hello()["team"],
            "env_config": json.loads(service.config.env_config.to_json()),
        }

    async def paced_loop():
        interval = 1.0 / service.config.tick_rate_hz
        while True:
            frame = service.tick()
            text = json.dumps(frame)
            for queue in list(clients):
                if queue.full():        # slow client: drop the stale frame
                    try:
                        queue.get_nowait()
                    except asyncio.QueueEmpty:
                        pass
                queue.put_nowait(text)
            await asyncio.sleep(interval)

    @app.on_event("startup")
    async def start_loop():
        if not service.config.lockstep:
            app.state.loop_task = asyncio.create_task(paced_loop())

    @app.on_event("shutdown")
    async def stop_loop():
        task = getattr(app.state, "loop_task", None)
        if task:
            task.cancel()

    @app.websocket("/session")
    async def session_socket(ws: WebSocket):
        await ws.accept()
        await ws.send_json(service.hello())
        if service.config.lockstep:
            # One tick per client message; used by tests and wire replays.
            try:
                while True:
                    data = await ws.receive_json()
                    if data.get("type") == "tick":
                        await ws.send_json(service.tick())
                        continue
                    try:
                        service.submit_input(data)
                    except SessionConfigError as exc:
                        await ws.send_json({"type": "warning",
                                            "schema_version": SCHEMA_VERSION,
                                            "message": str(exc)})
                        continue
                    await ws.send_json(service.tick())
            except WebSocketDisconnect:
                return
        else:
            queue: asyncio.Queue = asyncio.Queue(maxsize=2)
            clients.append(queue)

            async def reader():
                while True:
                    data = await ws.receive_json()
                    try:
                        service.submit_input(data)
                    except SessionConfigError:
                        pass        # malformed inputs never stall the loop

            reader_task = asyncio.create_task(reader())
            try:
                while True:
                    text = await queue.get()
                    await ws.send_text(text)
            except WebSocketDisconnect:
                pass
            finally:
                reader_task.cancel()
                clients.remove(queue)

    return app


def serve(config: SessionConfig, scene=None) -> None:
    """Run the gateway until interrupted (blocking)."""
    import uvicorn

    service = SessionService(config, scene=scene)
    app = create_app(service)
    uvicorn.run(app, host="127.0.0.1", port=config.port, log_level="warning")
