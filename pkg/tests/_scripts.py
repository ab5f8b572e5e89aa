"""Scripted controllers shared by tests: lift the gallbladder, then steer
the cauter greedily toward the target with one-step lookahead."""

import numpy as np

from lapteam import kinematics as kin


def lift_then_hold(n_lift):
    """Gripper action sequence: retract n_lift steps, then no-op forever."""
    def act(env, step_index):
        if step_index < n_lift:
            return kin.ACTION_INSERT_NEG
        return kin.ACTION_NOOP
    return act


def greedy_cauter(wait_for_visibility=0.55):
    """Cauter policy: wait until the target is exposed, then pick the
    discrete action whose one-step lookahead tip is closest to the target."""
    def act(env, step_index):
        state = env.state
        if state.visible_fraction < wait_for_visibility:
            return kin.ACTION_NOOP
        frame = env.scene.cauter_frame()
        target = state.target.center_mm
        best_action, best_dist = kin.ACTION_NOOP, np.inf
        for action in range(kin.N_ACTIONS):
            pose = kin.apply_discrete(state.cauter_pose, action, env.limits)
            dist = np.linalg.norm(kin.tip_position(frame, pose) - target)
            if dist < best_dist - 1e-12:
                best_action, best_dist = action, dist
        return best_action
    return act


def run_scripted_episode(env, episode_seed, gripper_act, cauter_act,
                         max_steps=None):
    """Drive one episode with state-aware scripts; returns (outcome, steps,
    last StepResult)."""
    env.reset(episode_seed)
    limit = max_steps or env.config.time_limit_steps
    result = None
    for k in range(limit):
        result = env.step((gripper_act(env, k), cauter_act(env, k)))
        if result.done:
            break
    return result.outcome, env.state.step_index, result
