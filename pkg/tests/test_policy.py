import math

import numpy as np
import pytest

from pursuit.environment import Action
from pursuit.policy import (
    CriticState,
    GaussianPolicyParams,
    GaussianSample,
    NumericError,
    RewardSignal,
    SoftmaxPolicyParams,
    SoftmaxSample,
    action_grid,
    gaussian_forward,
    grad_log_policy,
    greedy_action,
    init_critic,
    init_gaussian_policy,
    init_softmax_policy,
    n_policy_params,
    nac_update,
    policy_to_vector,
    sample_action,
    sample_gaussian,
    sample_softmax,
    softmax_probs,
    value_of,
    vector_to_policy,
)

N_FEAT = 20


def softmax_policy(theta_pan, theta_tilt=None, T=1.0):
    theta_pan = np.asarray(theta_pan, dtype=np.float64)
    if theta_tilt is None:
        theta_tilt = np.zeros_like(theta_pan)
    return SoftmaxPolicyParams(theta_pan=theta_pan, theta_tilt=theta_tilt, temperature=T)


class TestSoftmaxProbs:
    def test_uniform_when_activations_equal(self):
        pol = softmax_policy(np.zeros((11, N_FEAT)))
        probs = softmax_probs(pol, np.ones(N_FEAT), "pan")
        np.testing.assert_allclose(probs, 1.0 / 11.0, atol=1e-15)

    def test_low_temperature_concentrates_on_argmax(self):
        theta = np.zeros((11, 4))
        theta[3] = [1.0, 0.0, 0.0, 0.0]
        pol = softmax_policy(theta, T=1e-3)
        probs = softmax_probs(pol, np.array([1.0, 0, 0, 0]), "pan")
        assert probs[3] > 0.999

    def test_direct_formula_value(self):
        # z = (1, 0, ..., 0), T = 1, K = 11: pi_1 = e / (e + 10)
        theta = np.zeros((11, 1))
        theta[0, 0] = 1.0
        pol = softmax_policy(theta)
        probs = softmax_probs(pol, np.array([1.0]), "pan")
        assert probs[0] == pytest.approx(math.e / (math.e + 10.0), abs=1e-12)

    def test_sums_to_one(self, rng):
        pol = softmax_policy(rng.standard_normal((11, N_FEAT)), T=0.37)
        probs = softmax_probs(pol, rng.standard_normal(N_FEAT), "pan")
        assert abs(probs.sum() - 1.0) <= 1e-12

    def test_invariant_to_constant_activation_shift(self, rng):
        f = rng.uniform(0.1, 2.0, N_FEAT)
        theta = rng.standard_normal((11, N_FEAT))
        # add g to every row with g.f = c: shifts all activations by c
        c = 3.7
        g = c * f / (f @ f)
        pol_a = softmax_policy(theta)
        pol_b = softmax_policy(theta + g)
        np.testing.assert_allclose(
            softmax_probs(pol_a, f, "pan"), softmax_probs(pol_b, f, "pan"), atol=1e-12
        )

    def test_nonfinite_activations_raise(self):
        pol = softmax_policy(np.ones((11, 2)))
        with pytest.raises(NumericError):
            softmax_probs(pol, np.array([np.inf, 1.0]), "pan")


class TestSampling:
    def test_one_hot_always_selected(self, rng):
        probs = np.zeros(11)
        probs[6] = 1.0
        assert all(sample_softmax(probs, rng) == 6 for _ in range(100))

    def test_index_five_is_zero_acceleration(self):
        pol = softmax_policy(np.zeros((11, 1)))
        grid = action_grid(pol)
        assert grid[5] == 0.0
        assert grid[8] == 3.0
        np.testing.assert_allclose(np.diff(grid), 1.0)

    def test_uniform_sampling_frequencies(self, rng):
        probs = np.full(11, 1.0 / 11.0)
        draws = np.array([sample_softmax(probs, rng) for _ in range(100_000)])
        freqs = np.bincount(draws, minlength=11) / draws.size
        np.testing.assert_allclose(freqs, 1.0 / 11.0, atol=0.005)

    def test_gaussian_sigma_zero_limit(self, rng):
        action, raw = sample_gaussian(np.array([7.0, -0.5]), 1e-12, rng)
        assert action.ax == 5.0  # clip is exact
        assert action.ay == pytest.approx(-0.5, abs=1e-9)
        assert raw == pytest.approx([7.0, -0.5], abs=1e-9)

    def test_gaussian_clipping_tail(self, rng):
        hits = sum(
            sample_gaussian(np.array([10.0, 0.0]), 0.5, rng)[0].ax == 5.0
            for _ in range(1000)
        )
        assert hits == 1000  # P(raw < 5) = Phi(-10) ~ 8e-24

    def test_gaussian_draw_statistics(self, rng):
        mu = np.array([1.0, -1.0])
        raws = np.array([sample_gaussian(mu, 0.5, rng)[1] for _ in range(100_000)])
        np.testing.assert_allclose(raws.mean(axis=0), mu, atol=0.01)

    def test_sample_action_quantize_reproduces_action(self, rng):
        pol = init_gaussian_policy(N_FEAT, rng)
        f = rng.uniform(0, 1, N_FEAT)
        action, record = sample_action(pol, f, rng, quantize=True)
        rebuilt = Action(record.raw_pan, record.raw_tilt).clipped(pol.accel_bound)
        assert action == rebuilt
        assert np.float32(record.raw_pan) == record.raw_pan


class TestGreedy:
    def test_gaussian_greedy_is_clipped_mean(self):
        pol = GaussianPolicyParams(
            w_hidden=np.zeros((5, 2)),
            b_hidden=np.zeros(5),
            w_out=np.zeros((2, 5)),
            b_out=np.array([2.2, -1.0]),
        )
        assert greedy_action(pol, np.zeros(2)) == Action(2.2, -1.0)
        pol_big = GaussianPolicyParams(
            w_hidden=np.zeros((5, 2)),
            b_hidden=np.zeros(5),
            w_out=np.zeros((2, 5)),
            b_out=np.array([12.0, -9.0]),
        )
        assert greedy_action(pol_big, np.zeros(2)) == Action(5.0, -5.0)

    def test_softmax_one_hot_index_eight(self):
        theta = np.zeros((11, 1))
        theta[8, 0] = 50.0
        pol = softmax_policy(theta)
        assert greedy_action(pol, np.array([1.0])).ax == 3.0

    def test_tie_breaks_to_smallest_magnitude(self):
        pol = softmax_policy(np.zeros((11, 3)))
        a = greedy_action(pol, np.ones(3))  # all probabilities tie
        assert a == Action(0.0, 0.0)

    def test_tie_breaks_negative_first(self):
        pol = softmax_policy(np.zeros((10, 3)))  # even grid: no zero command
        a = greedy_action(pol, np.ones(3))
        assert a.ax < 0 and abs(a.ax) == pytest.approx(5.0 / 9.0)

    def test_greedy_invariant_to_temperature(self, rng):
        theta = rng.standard_normal((11, N_FEAT))
        f = rng.uniform(0, 1, N_FEAT)
        actions = {
            greedy_action(softmax_policy(theta, T=t), f) for t in (0.01, 0.5, 1.0, 10.0)
        }
        assert len(actions) == 1


def finite_difference_grad(policy, f, action, eps=1e-6):
    """Central differences of the joint log-density over the packed parameters."""

    def log_pi(pol):
        if isinstance(pol, SoftmaxPolicyParams):
            return float(
                np.log(softmax_probs(pol, f, "pan")[action.k_pan])
                + np.log(softmax_probs(pol, f, "tilt")[action.k_tilt])
            )
        mu = gaussian_forward(pol, f)
        a = np.array([action.raw_pan, action.raw_tilt])
        return float(-np.sum((a - mu) ** 2) / (2 * pol.sigma**2))

    base = policy_to_vector(policy)
    grad = np.empty_like(base)
    for i in range(base.size):
        up, dn = base.copy(), base.copy()
        up[i] += eps
        dn[i] -= eps
        grad[i] = (log_pi(vector_to_policy(policy, up)) - log_pi(vector_to_policy(policy, dn))) / (
            2 * eps
        )
    return grad


class TestGradLogPolicy:
    def test_softmax_rows_sum_to_zero(self, rng):
        pol = softmax_policy(np.zeros((11, 4)))
        f = rng.uniform(0.5, 1.5, 4)
        g = grad_log_policy(pol, f, SoftmaxSample(3, 7))
        per_axis = g.reshape(2, 11, 4)
        np.testing.assert_allclose(per_axis.sum(axis=1), 0.0, atol=1e-12)

    def test_gaussian_zero_at_mean(self, rng):
        pol = init_gaussian_policy(6, rng, dtype=np.float64)
        f = rng.uniform(0, 1, 6)
        mu = gaussian_forward(pol, f)
        g = grad_log_policy(pol, f, GaussianSample(float(mu[0]), float(mu[1])))
        np.testing.assert_allclose(g, 0.0, atol=1e-12)

    @pytest.mark.parametrize("seed", range(10))
    def test_matches_finite_differences_both_heads(self, seed):
        rng = np.random.default_rng(seed)
        f = rng.uniform(0.0, 1.5, 8)

        soft = SoftmaxPolicyParams(
            theta_pan=rng.standard_normal((5, 8)),
            theta_tilt=rng.standard_normal((5, 8)),
            temperature=float(rng.uniform(0.5, 2.0)),
        )
        act = SoftmaxSample(int(rng.integers(5)), int(rng.integers(5)))
        g = grad_log_policy(soft, f, act)
        fd = finite_difference_grad(soft, f, act)
        assert np.linalg.norm(g - fd) <= 1e-4 * max(np.linalg.norm(fd), 1e-12)

        gauss = GaussianPolicyParams(
            w_hidden=rng.standard_normal((4, 8)) * 0.5,
            b_hidden=rng.standard_normal(4) * 0.5,
            w_out=rng.standard_normal((2, 4)) * 0.5,
            b_out=rng.standard_normal(2) * 0.5,
            sigma=float(rng.uniform(0.5, 2.0)),
        )
        act = GaussianSample(float(rng.normal()), float(rng.normal()))
        g = grad_log_policy(gauss, f, act)
        fd = finite_difference_grad(gauss, f, act)
        assert np.linalg.norm(g - fd) <= 1e-4 * max(np.linalg.norm(fd), 1e-12)

    def test_gaussian_forward_jacobian_by_axis(self, rng):
        # the mean's Jacobian w.r.t. every weight, against central differences
        pol = init_gaussian_policy(5, rng, n_hidden=3, dtype=np.float64, init_scale=0.5)
        f = rng.uniform(0, 1, 5)
        base = policy_to_vector(pol)
        eps = 1e-6
        for axis in (0, 1):
            # analytic: gradient of mu_axis = grad of logpi with sigma=1, a = mu + e_axis
            mu = gaussian_forward(pol, f)
            a = mu.copy()
            a[axis] += 1.0
            analytic = grad_log_policy(
                replace_sigma(pol, 1.0), f, GaussianSample(float(a[0]), float(a[1]))
            )
            fd = np.empty_like(base)
            for i in range(base.size):
                up, dn = base.copy(), base.copy()
                up[i] += eps
                dn[i] -= eps
                fd[i] = (
                    gaussian_forward(vector_to_policy(pol, up), f)[axis]
                    - gaussian_forward(vector_to_policy(pol, dn), f)[axis]
                ) / (2 * eps)
            assert np.linalg.norm(analytic - fd) <= 1e-4 * max(np.linalg.norm(fd), 1e-12)


def replace_sigma(pol: GaussianPolicyParams, sigma: float) -> GaussianPolicyParams:
    from dataclasses import replace

    return replace(pol, sigma=sigma)


class TestParameterCounts:
    def test_gaussian_smaller_than_softmax(self, rng):
        soft = init_softmax_policy(300, rng)
        gauss = init_gaussian_policy(300, rng)
        assert n_policy_params(soft) == 2 * 11 * 300
        assert n_policy_params(gauss) == 301 * 5 + 6 * 2
        assert n_policy_params(gauss) < n_policy_params(soft)


class TestNacUpdate:
    def test_zero_rewards_keep_zero_parameters(self, rng):
        pol = GaussianPolicyParams(
            w_hidden=np.zeros((3, 4)),
            b_hidden=np.zeros(3),
            w_out=np.zeros((2, 3)),
            b_out=np.zeros(2),
        )
        crit = init_critic(pol, 4)
        f = rng.uniform(0, 1, 4).astype(np.float32)
        for _ in range(10):
            crit, pol = nac_update(
                crit, pol, f, GaussianSample(0.0, 0.0), RewardSignal(0.0), f
            )
        assert np.all(policy_to_vector(pol) == 0.0)
        assert np.all(crit.v == 0.0) and np.all(crit.w == 0.0)

    def test_td_error_arithmetic(self):
        # delta = reward + gamma V(f') - V(f); recover it from the bias update
        pol = init_gaussian_policy(3, np.random.default_rng(0), dtype=np.float64)
        crit = init_critic(pol, 3, alpha_v=0.5, dtype=np.float64)
        v = np.array([0.0, 0.0, 1.0, 0.0])  # value = f[2]
        crit = CriticState(
            v=v, w=crit.w, trace_v=crit.trace_v, trace_w=crit.trace_w,
            alpha_v=0.5, alpha_w=crit.alpha_w, alpha_theta=crit.alpha_theta,
        )
        f_t = np.array([0.0, 0.0, 0.2])
        f_n = np.array([0.0, 0.0, 0.4])
        assert value_of(crit, f_t) == pytest.approx(0.2)
        reward = RewardSignal(-0.5)
        assert reward.gamma == 0.3
        crit2, _ = nac_update(crit, pol, f_t, GaussianSample(0.0, 0.0), reward, f_n)
        delta = (crit2.v[-1] - crit.v[-1]) / 0.5
        assert delta == pytest.approx(-0.5 + 0.3 * 0.4 - 0.2, abs=1e-12)

    def test_simple_delta_when_values_zero(self):
        pol = init_gaussian_policy(2, np.random.default_rng(0), dtype=np.float64)
        crit = init_critic(pol, 2, alpha_v=1.0, dtype=np.float64)
        crit2, _ = nac_update(
            crit, pol, np.zeros(2), GaussianSample(0.0, 0.0), RewardSignal(-0.5), np.zeros(2)
        )
        assert crit2.v[-1] == pytest.approx(-0.5)

    def test_zero_step_sizes_are_identity(self, rng):
        pol = init_softmax_policy(N_FEAT, rng, dtype=np.float64)
        crit = init_critic(pol, N_FEAT, alpha_v=0.0, alpha_w=0.0, alpha_theta=0.0)
        f = rng.uniform(0, 1, N_FEAT)
        crit2, pol2 = nac_update(
            crit, pol, f, SoftmaxSample(2, 9), RewardSignal(-0.7), f
        )
        np.testing.assert_array_equal(policy_to_vector(pol), policy_to_vector(pol2))
        np.testing.assert_array_equal(crit.v, crit2.v)
        np.testing.assert_array_equal(crit.w, crit2.w)

    def test_nonfinite_delta_raises_and_preserves_state(self, rng):
        pol = init_gaussian_policy(2, rng, dtype=np.float64)
        crit = init_critic(pol, 2, dtype=np.float64)
        bad_f = np.array([np.inf, 0.0])
        with pytest.raises(NumericError):
            nac_update(crit, pol, np.zeros(2), GaussianSample(0.0, 0.0),
                       RewardSignal(-0.1), bad_f)

    def test_step_size_ordering_enforced(self, rng):
        pol = init_gaussian_policy(2, rng)
        with pytest.raises(ValueError):
            init_critic(pol, 2, alpha_v=1e-4, alpha_w=1e-3, alpha_theta=1e-2)

    def test_reward_bounds_enforced(self):
        with pytest.raises(ValueError):
            RewardSignal(0.5)
        with pytest.raises(ValueError):
            RewardSignal(-1.5)


def run_bandit(head: str, seed: int, steps: int = 10_000) -> bool:
    """Alternating two-state bandit; returns True when greedy matches the optimum.

    State A rewards positive pan commands, state B negative ones (0 vs -1).
    The exact optimum comes from enumerating the reward of every command.
    """
    rng = np.random.default_rng(seed)
    f_a = np.zeros(4)
    f_a[0] = 1.0
    f_b = np.zeros(4)
    f_b[1] = 1.0

    def reward_of(ax: float, state: int) -> float:
        good = ax >= 1.0 if state == 0 else ax <= -1.0
        return 0.0 if good else -1.0

    if head == "softmax":
        pol = init_softmax_policy(4, rng, temperature=0.5, dtype=np.float64)
        crit = init_critic(pol, 4, alpha_v=0.05, alpha_w=0.02, alpha_theta=0.01,
                           dtype=np.float64)
    else:
        pol = init_gaussian_policy(4, rng, sigma=1.0, dtype=np.float64)
        crit = init_critic(pol, 4, alpha_v=0.05, alpha_w=0.02, alpha_theta=0.01,
                           dtype=np.float64)

    state = 0
    for _ in range(steps):
        f = f_a if state == 0 else f_b
        action, record = sample_action(pol, f, rng)
        r = RewardSignal(reward_of(action.ax, state))
        nxt = 1 - state
        f_next = f_a if nxt == 0 else f_b
        crit, pol = nac_update(crit, pol, f, record, r, f_next)
        state = nxt

    ok = True
    for state, f in ((0, f_a), (1, f_b)):
        a = greedy_action(pol, f)
        # enumerate the command grid to find the optimal set
        grid = np.linspace(-5, 5, 11)
        best = {g for g in grid if reward_of(g, state) == 0.0}
        if head == "softmax":
            ok &= a.ax in best
        else:
            ok &= reward_of(a.ax, state) == 0.0
    return ok


class TestBanditRecovery:
    @pytest.mark.parametrize("head", ["softmax", "gaussian"])
    def test_bandit_learns_optimal_greedy(self, head):
        wins = sum(run_bandit(head, seed) for seed in range(10))
        assert wins >= 9, f"{head} bandit won only {wins}/10"
