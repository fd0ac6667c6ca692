import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cmarl import environment as env
from cmarl.errors import AllAgentsTerminal, UnknownLandmark, VolumeTooSmall
from cmarl.rng import Rng

from conftest import empty_volume, scripted_action


def cfg9(**kw):
    return env.EnvConfig(roi_size=9, **kw)


# --- reset ------------------------------------------------------------------

def test_start_bounds_64_at_fraction_08():
    assert env.start_bounds(64, 0.8) == (6, 57)


def test_reset_positions_within_start_box():
    vol = empty_volume(landmarks={"t": (30, 30, 30)})
    rng = Rng(0)
    for _ in range(50):
        states = env.reset(vol, ["t"], cfg9(), rng)
        assert np.all(states[0].position >= 6)
        assert np.all(states[0].position <= 57)


def test_reset_five_agents_same_landmark():
    vol = empty_volume(landmarks={"ac": (30, 30, 30)})
    states = env.reset(vol, ["ac"] * 5, cfg9(), Rng(1))
    assert len(states) == 5
    assert all(s.target == "ac" for s in states)


def test_reset_history_filled_with_initial_roi():
    vol = empty_volume(landmarks={"t": (30, 30, 30)})
    s = env.reset(vol, ["t"], cfg9(), Rng(2))[0]
    assert len(s.history) == 4
    first = s.history[0]
    for frame in s.history:
        assert np.array_equal(frame, first)
    assert s.scale_index == 0
    assert list(s.trace) == [tuple(int(c) for c in s.position)]


def test_reset_unknown_landmark():
    vol = empty_volume(landmarks={"t": (30, 30, 30)})
    with pytest.raises(UnknownLandmark):
        env.reset(vol, ["XX"], cfg9(), Rng(0))


def test_reset_volume_too_small():
    vol = empty_volume(dims=(40, 40, 40), landmarks={"t": (20, 20, 20)})
    with pytest.raises(VolumeTooSmall):
        env.reset(vol, ["t"], env.EnvConfig(roi_size=45), Rng(0))


# --- extract_roi -------------------------------------------------------------

def test_roi_scale1_is_contiguous_subblock():
    vol = empty_volume(dims=(64, 64, 64), landmarks={})
    vol.voxels[...] = np.arange(64 ** 3, dtype=np.float32).reshape(64, 64, 64)
    roi = env.extract_roi(vol, (32, 32, 32), 1, 9)
    assert np.array_equal(roi, vol.voxels[28:37, 28:37, 28:37])


def test_roi_span_arithmetic():
    # stride 3 over 45 samples spans (45-1)*3 + 1 = 133 voxels per axis
    vol = empty_volume(dims=(200, 200, 200))
    vol.voxels[33, 100, 100] = 1.0
    vol.voxels[165, 100, 100] = 0.5
    roi = env.extract_roi(vol, (99, 100, 100), 3, 45)
    assert roi.shape == (45, 45, 45)
    # offset index 0 samples x = 99 - 22*3 = 33; index 44 samples x = 165
    assert roi[0, 22, 22] == 1.0
    assert roi[44, 22, 22] == 0.5


def test_roi_zero_padding_at_origin():
    vol = empty_volume(dims=(64, 64, 64))
    vol.voxels[...] = 1.0
    roi = env.extract_roi(vol, (0, 0, 0), 1, 9)
    assert roi[:4].sum() == 0.0          # negative x offsets all padded
    assert roi[4, 4, 4] == 1.0
    assert np.all(roi[5:, 5:, 5:] == 1.0)


def test_roi_padding_beyond_far_edge():
    vol = empty_volume(dims=(64, 64, 64))
    vol.voxels[...] = 1.0
    roi = env.extract_roi(vol, (63, 63, 63), 3, 9)
    assert roi[5:].sum() == 0.0          # offsets +3.. beyond the edge


# --- apply_action / reward / oscillation ------------------------------------

def test_apply_action_moves_by_scale():
    vol = empty_volume(landmarks={"t": (30, 30, 30)})
    s = env.reset(vol, ["t"], cfg9(), Rng(0))[0]
    s.position = np.array([10, 10, 10])
    s.scale_index = 0  # 3 mm
    assert np.array_equal(env.apply_action(s, 0, vol, cfg9()), [13, 10, 10])
    s.scale_index = 2  # 1 mm
    assert np.array_equal(env.apply_action(s, 4, vol, cfg9()), [10, 10, 11])


def test_apply_action_clamps():
    vol = empty_volume(landmarks={"t": (30, 30, 30)})
    s = env.reset(vol, ["t"], cfg9(), Rng(0))[0]
    s.position = np.array([1, 10, 63])
    s.scale_index = 0
    assert np.array_equal(env.apply_action(s, 1, vol, cfg9()), [0, 10, 63])
    assert np.array_equal(env.apply_action(s, 4, vol, cfg9()), [1, 10, 63])


def test_reward_examples():
    assert env.reward(5.0, 3.0) == 1.0
    assert env.reward(2.0, 2.5) == -0.5
    assert env.reward(1.0, 1.0) == 0.0


@given(st.floats(0, 100), st.floats(0, 100))
@settings(max_examples=200, deadline=None)
def test_reward_always_clipped(d_prev, d_curr):
    assert -1.0 <= env.reward(d_prev, d_curr) <= 1.0


def test_oscillation_detection():
    cfg = cfg9()
    p1, p2 = (1, 1, 1), (2, 1, 1)
    assert env.detect_oscillation([p1, p2, p1, p2, p1, p2, p1], cfg)
    assert not env.detect_oscillation([(i, 0, 0) for i in range(10)], cfg)
    assert not env.detect_oscillation([p1, p2, p1], cfg)  # shorter than repeat


# --- step --------------------------------------------------------------------

def make_agent(vol, pos, scale_index=0, target="t"):
    s = env.reset(vol, [target], cfg9(), Rng(0))[0]
    s.position = np.array(pos, dtype=np.int64)
    s.scale_index = scale_index
    s.trace.clear()
    s.trace.append(tuple(int(c) for c in s.position))
    return s


def test_step_reward_and_found_terminal_in_train_mode():
    vol = empty_volume(landmarks={"t": (30.0, 30.0, 30.0)})
    s = make_agent(vol, (31, 30, 30), scale_index=2)
    out = env.step([s], [1], vol, cfg9(), mode="train")[0]  # -x toward target
    assert out.reward == 1.0
    assert out.terminal and s.cause == env.CAUSE_FOUND
    assert np.array_equal(s.position, [30, 30, 30])


def test_step_no_found_terminal_in_eval_mode():
    vol = empty_volume(landmarks={"t": (30.0, 30.0, 30.0)})
    s = make_agent(vol, (31, 30, 30), scale_index=2)
    out = env.step([s], [1], vol, cfg9(), mode="eval")[0]
    assert out.reward == 1.0
    assert not out.terminal


def test_step_no_found_terminal_at_coarse_scale():
    vol = empty_volume(landmarks={"t": (30.0, 30.0, 30.0)})
    s = make_agent(vol, (33, 30, 30), scale_index=0)
    out = env.step([s], [1], vol, cfg9(), mode="train")[0]  # lands on target
    assert not out.terminal  # found rule applies at the finest scale only


def test_step_oscillation_at_coarse_scale_descends():
    vol = empty_volume(landmarks={"t": (50.0, 50.0, 50.0)})
    s = make_agent(vol, (10, 10, 10), scale_index=0)
    changed = False
    for i in range(10):  # bounce +x/-x until the scale drops
        out = env.step([s], [i % 2], vol, cfg9(), mode="train")[0]
        if out.scale_changed:
            changed = True
            break
    assert changed
    assert s.scale_index == 1
    assert list(s.trace) == [(10, 10, 10)]  # cleared on the scale change
    assert not s.terminal


def test_step_oscillation_at_finest_scale_terminates_at_mode_position():
    vol = empty_volume(landmarks={"t": (50.0, 50.0, 50.0)})
    s = make_agent(vol, (10, 10, 10), scale_index=2)
    for i in range(10):
        out = env.step([s], [i % 2], vol, cfg9(), mode="eval")[0]
        if out.terminal:
            break
    assert s.terminal and s.cause == env.CAUSE_OSCILLATION
    # the bounce starts at (10,10,10), which therefore reaches 4 visits
    # first and is the mode of the trace
    assert np.array_equal(s.position, [10, 10, 10])
    assert s.steps == 6


def test_step_frozen_agents_do_not_move():
    vol = empty_volume(landmarks={"t": (30.0, 30.0, 30.0)})
    s1 = make_agent(vol, (31, 30, 30), scale_index=2)
    s2 = make_agent(vol, (40, 40, 40), scale_index=0)
    env.step([s1, s2], [1, 0], vol, cfg9(), mode="train")
    assert s1.terminal
    pos_before = s1.position.copy()
    steps_before = s1.steps
    out = env.step([s1, s2], [0, 0], vol, cfg9(), mode="train")
    assert np.array_equal(s1.position, pos_before)
    assert s1.steps == steps_before
    assert out[0].reward == 0.0 and out[0].terminal


def test_step_all_terminal_raises():
    vol = empty_volume(landmarks={"t": (30.0, 30.0, 30.0)})
    s = make_agent(vol, (31, 30, 30), scale_index=2)
    env.step([s], [1], vol, cfg9(), mode="train")
    with pytest.raises(AllAgentsTerminal):
        env.step([s], [0], vol, cfg9(), mode="train")


def test_step_cap_via_episode_done():
    cfg = cfg9(max_steps=200)
    vol = empty_volume(landmarks={"t": (30.0, 30.0, 30.0)})
    s = make_agent(vol, (6, 6, 6))
    steps = 0
    while not env.episode_done([s], steps, cfg):
        env.step([s], [0 if steps % 2 == 0 else 1], vol, cfg, mode="eval")
        steps += 1
        if s.terminal:
            break
    assert steps <= 200


def test_observation_is_pure_function_of_position():
    # Same positions, different targets: identical observations (the target
    # feeds only rewards, not the state).
    vol = empty_volume(landmarks={"a": (30.0, 30.0, 30.0),
                                  "b": (10.0, 10.0, 10.0)})
    vol.voxels[...] = np.random.default_rng(0).random((64, 64, 64),
                                                      dtype=np.float32)
    sa = env.reset(vol, ["a"], cfg9(), Rng(3))[0]
    sb = env.reset(vol, ["b"], cfg9(), Rng(3))[0]
    assert np.array_equal(sa.position, sb.position)
    env.step([sa], [2], vol, cfg9(), mode="eval")
    env.step([sb], [2], vol, cfg9(), mode="eval")
    assert np.array_equal(env.observation(sa), env.observation(sb))


def test_scale_index_nondecreasing_and_step_deterministic():
    vol = empty_volume(landmarks={"t": (20.0, 25.0, 40.0)})
    vol.voxels[...] = np.random.default_rng(1).random((64, 64, 64),
                                                      dtype=np.float32)

    def run():
        rng = Rng(9)
        states = env.reset(vol, ["t"], cfg9(), rng)
        s = states[0]
        scales = [s.scale_index]
        rewards = []
        for i in range(150):
            if s.terminal:
                break
            out = env.step(states, [rng.randrange(6)], vol, cfg9(),
                           mode="eval")[0]
            scales.append(s.scale_index)
            rewards.append(out.reward)
        return scales, rewards, s.position.copy()

    scales1, rewards1, pos1 = run()
    scales2, rewards2, pos2 = run()
    assert rewards1 == rewards2 and np.array_equal(pos1, pos2)
    assert all(b >= a for a, b in zip(scales1, scales1[1:]))


# --- scripted-policy mechanics oracle (small version of the acceptance A5) --

def test_scripted_policy_reaches_within_half_voxel_diagonal():
    rng = Rng(505)
    vol = empty_volume(landmarks={"t": (0.0, 0.0, 0.0)})
    cfg = cfg9()
    for trial in range(10):
        vol.landmarks["t"] = np.array([rng.uniform(5, 58) for _ in range(3)])
        states = env.reset(vol, ["t"], cfg, rng)
        s = states[0]
        steps, reached = 0, np.inf
        scales = {0}
        while not s.terminal and steps < cfg.max_steps:
            env.step(states, [scripted_action(s, vol, cfg)], vol, cfg,
                     mode="eval")
            scales.add(s.scale_index)
            if s.scale_index == 2:
                reached = min(reached, env.distance_mm(
                    s.position, vol.landmarks["t"], vol.meta.spacing_mm))
            steps += 1
        assert s.terminal and s.cause == env.CAUSE_OSCILLATION
        assert scales == {0, 1, 2}
        assert reached <= np.sqrt(3) / 2 + 1e-9
        final = env.distance_mm(s.position, vol.landmarks["t"],
                                vol.meta.spacing_mm)
        assert final <= 1.0 + 1e-9  # mode-of-trace bound
