import numpy as np
import pytest
from dataclasses import replace

from lapteam import kinematics as kin
from lapteam import softbody as sb
from lapteam.env import CholecEnv, EnvConfig
from lapteam.render import count_color_pixels, render_scene
from lapteam.scene import (COLOR_CAUTER, COLOR_GALLBLADDER, COLOR_GRIPPER,
                           COLOR_LIVER, COLOR_TARGET)

from _scripts import greedy_cauter, lift_then_hold


@pytest.fixture(scope="module")
def image_env():
    return CholecEnv(EnvConfig(obs_mode="image", image_size=(64, 64)))


def test_image_shape_dtype_determinism(image_env):
    a = image_env.reset(1)
    b = image_env.reset(1)
    assert a.shape == (64, 64, 3) and a.dtype == np.uint8
    assert np.array_equal(a, b)


def test_configured_resolution_supported():
    env = CholecEnv(EnvConfig(obs_mode="image", image_size=(128, 128)))
    assert env.reset(0).shape == (128, 128, 3)


def test_canonical_start_has_no_white_target_pixels(image_env):
    obs = image_env.reset(2)
    assert count_color_pixels(obs, COLOR_TARGET, tol=25) == 0


def test_scene_colors_present(image_env):
    obs = image_env.reset(3)
    for color in (COLOR_LIVER, COLOR_GALLBLADDER, COLOR_GRIPPER, COLOR_CAUTER):
        assert count_color_pixels(obs, color, tol=90) > 5, color


def test_lifted_gallbladder_reveals_white_pixels(image_env):
    env = image_env
    env.reset(4)
    lift = lift_then_hold(34)
    for k in range(50):
        env.step((lift(env, k), kin.ACTION_NOOP))
    obs = env.observe()
    visible = env.state.visible_fraction
    assert visible > 0.5
    white_now = count_color_pixels(obs, COLOR_TARGET, tol=25)
    assert white_now > 0

    # Pixel-visibility oracle: white pixels relative to a render with the
    # gallbladder removed entirely, compared to the ray-cast fraction.
    state_clear = replace(
        env.state,
        body=replace(env.state.body,
                     triangles=env.state.body.triangles[:0]))
    clear = render_scene(state_clear, env.scene, env.config)
    white_clear = count_color_pixels(clear, COLOR_TARGET, tol=25)
    assert white_clear >= white_now > 0
    pixel_visibility = white_now / white_clear
    assert abs(pixel_visibility - visible) <= 0.35


def test_higher_resolution_tightens_pixel_visibility_agreement():
    env = CholecEnv(EnvConfig(obs_mode="image", image_size=(192, 192),
                              n_rays=256))
    env.reset(4)
    lift = lift_then_hold(34)
    for k in range(50):
        env.step((lift(env, k), kin.ACTION_NOOP))
    obs = env.observe()
    state_clear = replace(
        env.state,
        body=replace(env.state.body, triangles=env.state.body.triangles[:0]))
    clear = render_scene(state_clear, env.scene, env.config)
    white_now = count_color_pixels(obs, COLOR_TARGET, tol=25)
    white_clear = count_color_pixels(clear, COLOR_TARGET, tol=25)
    assert white_clear > 0
    assert abs(white_now / white_clear - env.state.visible_fraction) <= 0.1
