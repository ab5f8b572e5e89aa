import json

import numpy as np
import pytest
from fastapi.testclient import TestClient

from lapteam import kinematics as kin
from lapteam.env import CholecEnv, EnvConfig
from lapteam.evaluation import ControllerSpec, TeamSpec
from lapteam.session import (SCHEMA_VERSION, SessionConfig, SessionConfigError,
                             SessionService, create_app, parse_input_message)

FAST = EnvConfig(time_limit_steps=50, settle_steps=20)
HUMAN_GRIPPER = TeamSpec(ControllerSpec("human"), ControllerSpec("noop"))


def input_msg(instrument, axes, switch=False, reset=False, version=SCHEMA_VERSION):
    return {
        "type": "input",
        "schema_version": version,
        "client_id": "test",
        "instrument": instrument,
        "axes": list(axes),
        "buttons": {"switch_instrument": switch, "reset_episode": reset},
        "client_ts": 0,
    }


def make_service(team=HUMAN_GRIPPER, env=FAST, **kwargs):
    return SessionService(SessionConfig(team=team, env_config=env,
                                        lockstep=True, **kwargs))


def test_input_message_validation():
    slot, n = parse_input_message(input_msg("gripper", [0.5, 0, 0, -2.0]))
    assert n == 1
    assert slot["axes"][3] == -1.0
    with pytest.raises(SessionConfigError):
        parse_input_message(input_msg("camera", [0, 0, 0, 0]))
    with pytest.raises(SessionConfigError):
        parse_input_message(input_msg("gripper", [0, 0, 0, 0], version=99))
    with pytest.raises(SessionConfigError):
        parse_input_message({"type": "state"})


def test_tick_without_clients_matches_headless():
    # Policies on both instruments; human inputs absent.
    team = TeamSpec(ControllerSpec("noop"), ControllerSpec("noop"))
    service = make_service(team=team)
    digests = [service.tick()["digest"] for _ in range(20)]

    env = CholecEnv(FAST)
    env.reset(0)
    expected = []
    for _ in range(20):
        env.step((kin.ACTION_NOOP, kin.ACTION_NOOP))
        expected.append(env.digest())
    assert digests == expected


def test_missing_input_means_zero_axes():
    service = make_service()
    frame0 = service.frame()
    frame1 = service.tick()         # no input submitted
    assert frame1["poses"]["gripper"] == frame0["poses"]["gripper"]


def test_latest_wins_one_input_per_tick():
    service = make_service()
    start = service.frame()["poses"]["gripper"]
    service.submit_input(input_msg("gripper", [1, 0, 0, 0]))
    service.submit_input(input_msg("gripper", [0, 0, 0, 1]))   # overwrites
    frame = service.tick()
    pose = frame["poses"]["gripper"]
    assert pose[0] == start[0]              # first message discarded: pan held
    assert pose[3] == start[3] + 1.0        # second message: insertion +1 mm
    # The consumed slot does not repeat on the next tick.
    frame2 = service.tick()
    assert frame2["poses"]["gripper"][3] == pose[3]


def test_wire_equivalence_with_headless_continuous():
    rng = np.random.default_rng(5)
    trace = [list(rng.uniform(-1, 1, 4)) for _ in range(25)]

    service = make_service()
    session_digests = []
    for axes in trace:
        service.submit_input(input_msg("gripper", axes))
        session_digests.append(service.tick()["digest"])

    env = CholecEnv(FAST)
    env.reset(0)
    headless = []
    for axes in trace:
        env.step((np.asarray(axes), kin.ACTION_NOOP))
        headless.append(env.digest())
    assert session_digests == headless


def test_switch_control_toggles_active_instrument():
    team = TeamSpec(ControllerSpec("human"), ControllerSpec("human"),
                    switch_control=True)
    service = make_service(team=team)
    assert service.active_instrument == "gripper"
    service.submit_input(input_msg("gripper", [0, 0, 0, 1]))
    f1 = service.tick()
    assert f1["poses"]["gripper"][3] != 0 or f1["poses"]["cauter"][3] == 0

    service.submit_input(input_msg("gripper", [0, 0, 0, 0], switch=True))
    f2 = service.tick()
    assert f2["active_instrument"] == "cauter"
    # Now axes drive the cauter; the gripper holds (no-op).
    before = f2["poses"]["gripper"]
    service.submit_input(input_msg("cauter", [0, 0, 0, 1]))
    f3 = service.tick()
    assert f3["poses"]["gripper"] == before
    assert f3["poses"]["cauter"][3] != f2["poses"]["cauter"][3]


def test_switch_control_requires_single_human_team():
    with pytest.raises(SessionConfigError):
        SessionConfig(team=TeamSpec(ControllerSpec("human"),
                                    ControllerSpec("noop"),
                                    switch_control=True), env_config=FAST)


def test_non_human_instrument_rejects_input():
    service = make_service()          # cauter is noop
    with pytest.raises(SessionConfigError):
        service.submit_input(input_msg("cauter", [0, 0, 0, 1]))


def test_episode_end_pauses_until_reset():
    service = make_service(env=EnvConfig(time_limit_steps=3, settle_steps=10))
    frames = [service.tick() for _ in range(3)]
    assert frames[-1]["outcome" ] == "RanOutOfTime"
    paused = service.tick()
    assert paused["status"] == "awaiting_reset"
    assert paused["step_index"] == 3
    service.submit_input(input_msg("gripper", [0, 0, 0, 0], reset=True))
    fresh = service.tick()
    assert fresh["status"] == "running"
    assert fresh["episode_index"] == 1
    assert fresh["step_index"] == 0


def test_max_session_episodes():
    service = make_service(env=EnvConfig(time_limit_steps=2, settle_steps=10),
                           max_session_episodes=1)
    service.tick()
    service.tick()                     # episode 0 done
    service.submit_input(input_msg("gripper", [0, 0, 0, 0], reset=True))
    frame = service.tick()
    assert frame["status"] == "finished"
    assert service.finished


def test_frame_contract():
    service = make_service()
    frame = service.tick()
    assert frame["type"] == "state"
    assert frame["schema_version"] == SCHEMA_VERSION
    assert len(frame["gallbladder_points_mm"]) <= 100
    assert set(frame["reward_step"]) == {"gripper", "cauter"}
    assert frame["grasp_count"] == 4
    assert isinstance(frame["digest"], str) and len(frame["digest"]) == 16
    # step counter increases monotonically
    nxt = service.tick()
    assert nxt["step_index"] == frame["step_index"] + 1


def test_websocket_round_trip_lockstep():
    service = make_service()
    app = create_app(service)
    client = TestClient(app)
    with client.websocket_connect("/session") as ws:
        hello = ws.receive_json()
        assert hello["type"] == "hello"
        assert hello["schema_version"] == SCHEMA_VERSION
        assert hello["team"]["gripper"] == "human"
        ws.send_json(input_msg("gripper", [0, 0, 0, 1]))
        frame = ws.receive_json()
        assert frame["type"] == "state"
        assert frame["step_index"] == 1
        ws.send_json({"type": "tick"})
        frame2 = ws.receive_json()
        assert frame2["step_index"] == 2
        # malformed input -> warning, no tick
        ws.send_json(input_msg("camera", [0, 0, 0, 0]))
        warn = ws.receive_json()
        assert warn["type"] == "warning"

    health = client.get("/health").json()
    assert health["status"] == "ok"
    assert health["step_index"] == 2
    config = client.get("/config").json()
    assert config["lockstep"] is True
    assert config["env_config"]["time_limit_steps"] == 50


def test_websocket_fixture_replay_matches_headless(tmp_path):
    # The committed frontend fixture trace drives the server; digests must
    # match the headless continuous-action run of the same axes.
    fixture = json.loads(FIXTURE_TRACE)
    service = make_service()
    app = create_app(service)
    client = TestClient(app)
    digests = []
    with client.websocket_connect("/session") as ws:
        ws.receive_json()
        for msg in fixture:
            ws.send_json(msg)
            digests.append(ws.receive_json()["digest"])

    env = CholecEnv(FAST)
    env.reset(0)
    expected = []
    for msg in fixture:
        env.step((np.asarray(msg["axes"]), kin.ACTION_NOOP))
        expected.append(env.digest())
    assert digests == expected


# A miniature input trace in the exact wire schema (the full generated one
# lives in frontend/fixtures and is exercised by the acceptance suite).
FIXTURE_TRACE = json.dumps([
    {"type": "input", "schema_version": 1, "client_id": "fixture",
     "instrument": "gripper", "axes": [0.0, 0.0, 0.0, -1.0],
     "buttons": {"switch_instrument": False, "reset_episode": False},
     "client_ts": i}
    for i in range(10)
])
