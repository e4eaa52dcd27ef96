import numpy as np
import pytest

from pursuit.environment import (
    UNITS,
    Action,
    ConfigError,
    EnvParams,
    EnvState,
    EyeState,
    ideal_action,
    render_pair,
    reset,
    step,
)

from oracles import correlation_peak_shift


class TestUnits:
    def test_conversions(self):
        assert UNITS.speed_to_px(24.0) == pytest.approx(4.0)
        assert UNITS.accel_to_px(900.0) == pytest.approx(5.0)
        assert UNITS.fovea_px == 55 and UNITS.px_per_deg == 5
        assert UNITS.frames_per_s == 30 and UNITS.episode_frames == 10


class TestReset:
    def test_deterministic(self, small_corpus):
        assert reset(42, small_corpus) == reset(42, small_corpus)

    def test_eye_at_rest_and_centered(self, small_corpus):
        st = reset(0, small_corpus)
        assert st.eye.velocity == (0.0, 0.0)
        tex = small_corpus[st.target.texture_id]
        assert st.target.position == (tex.width / 2, tex.height / 2)
        assert st.target.phase == 0 and st.frame_index == 0

    def test_velocity_draw_is_uniform(self, small_corpus):
        vels = np.array(
            [reset(s, small_corpus).target.velocity for s in range(10_000)]
        )
        assert np.all(np.abs(vels) <= 4.0)
        assert np.all(np.abs(vels.mean(axis=0)) < 0.1)

    def test_empty_corpus_rejected(self):
        with pytest.raises(ConfigError):
            reset(0, ())

    def test_small_texture_rejected(self, small_corpus):
        from pursuit.imagery import GrayImage

        tiny = GrayImage.from_array(np.zeros((30, 30)))
        with pytest.raises(ConfigError):
            reset(0, (tiny,))


class TestStep:
    def test_zero_slip_renders_identical_frames(self, small_corpus):
        st = reset(3, small_corpus)
        # drive the eye to exactly the target velocity, then hold
        tv = st.target.velocity
        _, st = step(st, Action(*tv))
        pair, st = step(st, Action(0.0, 0.0))
        assert st.slip == (0.0, 0.0)
        np.testing.assert_array_equal(pair.previous.values, pair.current.values)

    def test_velocity_clipped_at_bound(self, small_corpus):
        st = reset(1, small_corpus)
        _, st = step(st, Action(5.0, 0.0))
        assert st.eye.velocity[0] == 4.0
        _, st = step(st, Action(5.0, 0.0))
        assert st.eye.velocity == (4.0, 0.0)

    def test_episode_redraw_at_phase_nine(self, small_corpus):
        st = reset(9, small_corpus)
        seen = [(st.target.texture_id, st.target.velocity, st.target.phase)]
        for _ in range(10):
            _, st = step(st, Action(0.0, 0.0))
            seen.append((st.target.texture_id, st.target.velocity, st.target.phase))
        phases = [s[2] for s in seen]
        assert phases == [0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 0]
        first_vel = {s[1] for s in seen[:10]}
        assert len(first_vel) == 1, "velocity must be constant within an episode"
        assert seen[10][1] != seen[9][1], "redraw must pick a fresh velocity"

    def test_schedule_independent_across_runs(self, small_corpus):
        st = reset(5, small_corpus)
        vels = []
        for _ in range(50):
            _, st = step(st, Action(0.0, 0.0))
            if st.target.phase == 0:
                vels.append(st.target.velocity)
        assert len(set(vels)) == len(vels)

    def test_step_is_pure(self, small_corpus):
        st = reset(8, small_corpus)
        p1, s1 = step(st, Action(1.0, 2.0))
        p2, s2 = step(st, Action(1.0, 2.0))
        assert s1 == s2 and p1 == p2

    def test_bounds_invariant_under_random_actions(self, small_corpus, rng):
        st = reset(13, small_corpus)
        for _ in range(200):
            a = Action(*rng.uniform(-5, 5, 2))
            _, st = step(st, a)
            assert abs(st.eye.velocity[0]) <= 4.0 and abs(st.eye.velocity[1]) <= 4.0
            assert abs(st.slip[0]) <= 8.0 and abs(st.slip[1]) <= 8.0

    def test_rendered_translation_equals_slip(self, small_corpus):
        # integer slips render exact pixel-shifted content
        for sx, sy in [(2, 0), (0, -3), (-4, 4), (1, 1)]:
            st = reset(21, small_corpus)
            st = _with_velocities(st, target=(float(sx), float(sy)), eye=(0.0, 0.0))
            pair = render_pair(st)
            px, py = correlation_peak_shift(pair.previous.values, pair.current.values)
            assert (px, py) == pytest.approx((sx, sy), abs=0.25)

    def test_fractional_slip_translation(self, small_corpus):
        st = reset(2, small_corpus)
        st = _with_velocities(st, target=(1.5, -0.75), eye=(0.0, 0.0))
        pair = render_pair(st)
        px, py = correlation_peak_shift(pair.previous.values, pair.current.values)
        assert (px, py) == pytest.approx((1.5, -0.75), abs=0.25)


def _with_velocities(st: EnvState, target, eye) -> EnvState:
    from dataclasses import replace

    return replace(
        st,
        target=replace(st.target, velocity=target),
        eye=EyeState(velocity=eye, position=st.eye.position),
    )


class TestIdealAction:
    def test_zero(self):
        assert ideal_action((0.0, 0.0)) == Action(0.0, 0.0)

    def test_unclipped_zeroes_slip_in_one_step(self, small_corpus):
        st = reset(17, small_corpus)
        st = _with_velocities(st, target=(3.0, -2.0), eye=(0.0, 0.0))
        a = ideal_action(st.slip)
        assert a == Action(3.0, -2.0)
        _, st2 = step(st, a)
        if st2.target.phase != 0:  # no redraw interfered
            assert st2.slip == (0.0, 0.0)

    def test_clipped_case(self, small_corpus):
        assert ideal_action((8.0, 0.0)) == Action(5.0, 0.0)
        st = reset(23, small_corpus)
        st = _with_velocities(st, target=(4.0, 0.0), eye=(-4.0, 0.0))
        assert st.slip == (8.0, 0.0)
        _, st2 = step(st, ideal_action(st.slip))
        if st2.target.phase != 0:
            assert st2.slip == (3.0, 0.0)

    def test_closed_loop_reaches_zero_within_two_steps(self, small_corpus, rng):
        params = EnvParams(episode_frames=1000)  # hold one episode open
        st = reset(31, small_corpus, params)
        for _ in range(20):
            tv = tuple(rng.uniform(-4, 4, 2))
            ev = tuple(rng.uniform(-4, 4, 2))
            s = _with_velocities(st, target=tv, eye=ev)
            for _ in range(2):
                _, s = step(s, ideal_action(s.slip))
            assert s.slip == pytest.approx((0.0, 0.0), abs=1e-12)
