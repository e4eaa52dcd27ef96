"""Action policies (discrete softmax and Gaussian MLP heads), linear critic, and
natural actor-critic updates.

Both heads map the pooled motion-energy feature vector to accelerations for the
pan and tilt axes. The softmax head uses one independent linear network per
axis over a grid of equally spaced commands; the Gaussian head shares a tanh
hidden layer and emits the means of per-axis normal distributions with fixed
standard deviation.

The actor-critic keeps a linear value function over the features, a compatible
advantage-parameter vector `w` sized to the policy parameter count, and steps
policy parameters along `w` (the natural-gradient direction). Updates preserve
the dtype of the incoming parameters, so float32 training state stays float32.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .environment import Action

__all__ = [
    "NumericError",
    "SoftmaxPolicyParams",
    "GaussianPolicyParams",
    "SoftmaxSample",
    "GaussianSample",
    "CriticState",
    "RewardSignal",
    "init_softmax_policy",
    "init_gaussian_policy",
    "init_critic",
    "n_policy_params",
    "action_grid",
    "softmax_probs",
    "sample_softmax",
    "gaussian_forward",
    "sample_gaussian",
    "sample_action",
    "greedy_action",
    "grad_log_policy",
    "value_of",
    "nac_update",
]


class NumericError(ArithmeticError):
    """A non-finite value appeared where the update contract requires finiteness."""


def _frozen_array(a, dtype=None) -> np.ndarray:
    a = np.array(a, dtype=dtype, copy=True)
    a.flags.writeable = False
    return a


@dataclass(frozen=True, eq=False)
class SoftmaxPolicyParams:
    """Two independent linear-softmax networks (pan, tilt) over K discrete commands."""

    theta_pan: np.ndarray  # (K, N)
    theta_tilt: np.ndarray  # (K, N)
    temperature: float = 1.0
    accel_bound: float = 5.0

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.theta_pan.shape != self.theta_tilt.shape:
            raise ValueError("pan and tilt networks must have identical shapes")
        object.__setattr__(self, "theta_pan", _frozen_array(self.theta_pan))
        object.__setattr__(self, "theta_tilt", _frozen_array(self.theta_tilt))

    @property
    def n_actions(self) -> int:
        return self.theta_pan.shape[0]

    @property
    def n_features(self) -> int:
        return self.theta_pan.shape[1]


@dataclass(frozen=True, eq=False)
class GaussianPolicyParams:
    """Shared tanh hidden layer, linear means for per-axis Gaussians of fixed sigma."""

    w_hidden: np.ndarray  # (H, N)
    b_hidden: np.ndarray  # (H,)
    w_out: np.ndarray  # (2, H)
    b_out: np.ndarray  # (2,)
    sigma: float = 1.0
    accel_bound: float = 5.0

    def __post_init__(self):
        if self.sigma <= 0:
            raise ValueError("sigma must be positive")
        for name in ("w_hidden", "b_hidden", "w_out", "b_out"):
            object.__setattr__(self, name, _frozen_array(getattr(self, name)))

    @property
    def n_hidden(self) -> int:
        return self.w_hidden.shape[0]

    @property
    def n_features(self) -> int:
        return self.w_hidden.shape[1]


PolicyParams = SoftmaxPolicyParams | GaussianPolicyParams


@dataclass(frozen=True)
class SoftmaxSample:
    """A sampled pair of command indices, one per axis."""

    k_pan: int
    k_tilt: int


@dataclass(frozen=True)
class GaussianSample:
    """The pre-clip Gaussian draw; gradients use this, the environment the clip."""

    raw_pan: float
    raw_tilt: float


@dataclass(frozen=True)
class RewardSignal:
    """Negated reconstruction error plus the fixed discount factor."""

    value: float
    gamma: float = 0.3

    def __post_init__(self):
        if not -1.0 <= self.value <= 0.0:
            raise ValueError(f"reward {self.value} outside [-1, 0]")


@dataclass(frozen=True, eq=False)
class CriticState:
    """Linear value function, compatible-feature advantage weights, and traces."""

    v: np.ndarray  # (N+1,) value weights, last entry the bias
    w: np.ndarray  # (n_policy_params,) advantage / natural-gradient direction
    trace_v: np.ndarray
    trace_w: np.ndarray
    alpha_v: float = 1e-2
    alpha_w: float = 5e-3
    alpha_theta: float = 1e-3
    lam: float = 0.0
    natural: bool = True  # False selects the plain actor-critic baseline

    def __post_init__(self):
        if not self.alpha_v >= self.alpha_w >= self.alpha_theta >= 0:
            raise ValueError("step sizes must satisfy alpha_v >= alpha_w >= alpha_theta >= 0")
        for name in ("v", "w", "trace_v", "trace_w"):
            object.__setattr__(self, name, _frozen_array(getattr(self, name)))


def init_softmax_policy(
    n_features: int,
    rng: np.random.Generator,
    n_actions: int = 11,
    temperature: float = 1.0,
    accel_bound: float = 5.0,
    init_scale: float = 0.01,
    dtype=np.float32,
) -> SoftmaxPolicyParams:
    shape = (n_actions, n_features)
    return SoftmaxPolicyParams(
        theta_pan=rng.uniform(-init_scale, init_scale, shape).astype(dtype),
        theta_tilt=rng.uniform(-init_scale, init_scale, shape).astype(dtype),
        temperature=temperature,
        accel_bound=accel_bound,
    )


def init_gaussian_policy(
    n_features: int,
    rng: np.random.Generator,
    n_hidden: int = 5,
    sigma: float = 1.0,
    accel_bound: float = 5.0,
    init_scale: float = 0.01,
    dtype=np.float32,
) -> GaussianPolicyParams:
    return GaussianPolicyParams(
        w_hidden=rng.uniform(-init_scale, init_scale, (n_hidden, n_features)).astype(dtype),
        b_hidden=rng.uniform(-init_scale, init_scale, n_hidden).astype(dtype),
        w_out=rng.uniform(-init_scale, init_scale, (2, n_hidden)).astype(dtype),
        b_out=rng.uniform(-init_scale, init_scale, 2).astype(dtype),
        sigma=sigma,
        accel_bound=accel_bound,
    )


def n_policy_params(policy: PolicyParams) -> int:
    if isinstance(policy, SoftmaxPolicyParams):
        return 2 * policy.theta_pan.size
    return (
        policy.w_hidden.size + policy.b_hidden.size + policy.w_out.size + policy.b_out.size
    )


def init_critic(
    policy: PolicyParams,
    n_features: int,
    alpha_v: float = 1e-2,
    alpha_w: float = 5e-3,
    alpha_theta: float = 1e-3,
    lam: float = 0.0,
    natural: bool = True,
    dtype=np.float32,
) -> CriticState:
    n_p = n_policy_params(policy)
    return CriticState(
        v=np.zeros(n_features + 1, dtype=dtype),
        w=np.zeros(n_p, dtype=dtype),
        trace_v=np.zeros(n_features + 1, dtype=dtype),
        trace_w=np.zeros(n_p, dtype=dtype),
        alpha_v=alpha_v,
        alpha_w=alpha_w,
        alpha_theta=alpha_theta,
        lam=lam,
        natural=natural,
    )


# ---------------------------------------------------------------------------
# Forward passes and sampling
# ---------------------------------------------------------------------------


def action_grid(policy: SoftmaxPolicyParams) -> np.ndarray:
    """The K equally spaced accelerations, -bound..+bound."""
    return np.linspace(-policy.accel_bound, policy.accel_bound, policy.n_actions)


def softmax_probs(policy: SoftmaxPolicyParams, f: np.ndarray, axis: str) -> np.ndarray:
    """Action probabilities for one axis, computed with max-subtraction."""
    theta = policy.theta_pan if axis == "pan" else policy.theta_tilt
    z = theta.astype(np.float64) @ np.asarray(f, dtype=np.float64)
    if not np.all(np.isfinite(z)):
        raise NumericError(f"non-finite softmax activations on {axis} axis")
    zt = z / policy.temperature
    e = np.exp(zt - zt.max())
    return e / e.sum()


def sample_softmax(probs: np.ndarray, rng: np.random.Generator) -> int:
    """Draw a command index from the given simplex via inverse CDF."""
    u = rng.random()
    cdf = np.cumsum(probs)
    return int(min(np.searchsorted(cdf, u, side="right"), len(probs) - 1))


def gaussian_forward(policy: GaussianPolicyParams, f: np.ndarray) -> np.ndarray:
    """Mean accelerations: linear readout of a tanh hidden layer."""
    f = np.asarray(f, dtype=np.float64)
    h = np.tanh(policy.w_hidden.astype(np.float64) @ f + policy.b_hidden.astype(np.float64))
    mu = policy.w_out.astype(np.float64) @ h + policy.b_out.astype(np.float64)
    if not np.all(np.isfinite(mu)):
        raise NumericError("non-finite Gaussian policy mean")
    return mu


def sample_gaussian(
    mu: np.ndarray,
    sigma: float,
    rng: np.random.Generator,
    accel_bound: float = 5.0,
) -> tuple[Action, np.ndarray]:
    """Per-axis normal draw around mu; returns the clipped Action and the raw draw."""
    raw = np.asarray(mu, dtype=np.float64) + sigma * rng.standard_normal(2)
    action = Action(ax=float(raw[0]), ay=float(raw[1])).clipped(accel_bound)
    return action, raw


def sample_action(
    policy: PolicyParams,
    f: np.ndarray,
    rng: np.random.Generator,
    quantize: bool = False,
) -> tuple[Action, SoftmaxSample | GaussianSample]:
    """Draw an action and the record needed to score its log-probability later.

    With `quantize`, Gaussian raw draws are rounded to float32 before clipping
    so the record (which checkpoints as float32) reproduces the action exactly.
    """
    if isinstance(policy, SoftmaxPolicyParams):
        grid = action_grid(policy)
        k_pan = sample_softmax(softmax_probs(policy, f, "pan"), rng)
        k_tilt = sample_softmax(softmax_probs(policy, f, "tilt"), rng)
        return Action(ax=float(grid[k_pan]), ay=float(grid[k_tilt])), SoftmaxSample(
            k_pan=k_pan, k_tilt=k_tilt
        )
    mu = gaussian_forward(policy, f)
    _, raw = sample_gaussian(mu, policy.sigma, rng, policy.accel_bound)
    if quantize:
        raw = np.float32(raw).astype(np.float64)
    record = GaussianSample(raw_pan=float(raw[0]), raw_tilt=float(raw[1]))
    action = Action(ax=record.raw_pan, ay=record.raw_tilt).clipped(policy.accel_bound)
    return action, record


def greedy_action(policy: PolicyParams, f: np.ndarray) -> Action:
    """Maximum-likelihood action: per-axis argmax command, or the clipped mean.

    Softmax probability ties go to the smaller acceleration magnitude, negative
    first.
    """
    if isinstance(policy, SoftmaxPolicyParams):
        grid = action_grid(policy)
        out = []
        for axis in ("pan", "tilt"):
            probs = softmax_probs(policy, f, axis)
            best = np.flatnonzero(probs == probs.max())
            out.append(grid[min(best, key=lambda k: (abs(grid[k]), grid[k]))])
        return Action(ax=float(out[0]), ay=float(out[1]))
    mu = gaussian_forward(policy, f)
    return Action(ax=float(mu[0]), ay=float(mu[1])).clipped(policy.accel_bound)


# ---------------------------------------------------------------------------
# Gradients and the actor-critic update
# ---------------------------------------------------------------------------


def _pack(*parts: np.ndarray) -> np.ndarray:
    return np.concatenate([np.asarray(p, dtype=np.float64).ravel() for p in parts])


def policy_to_vector(policy: PolicyParams) -> np.ndarray:
    if isinstance(policy, SoftmaxPolicyParams):
        return _pack(policy.theta_pan, policy.theta_tilt)
    return _pack(policy.w_hidden, policy.b_hidden, policy.w_out, policy.b_out)


def vector_to_policy(policy: PolicyParams, vec: np.ndarray) -> PolicyParams:
    if isinstance(policy, SoftmaxPolicyParams):
        k, n = policy.theta_pan.shape
        dt = policy.theta_pan.dtype
        return replace(
            policy,
            theta_pan=vec[: k * n].reshape(k, n).astype(dt),
            theta_tilt=vec[k * n :].reshape(k, n).astype(dt),
        )
    h, n = policy.w_hidden.shape
    dt = policy.w_hidden.dtype
    sizes = [h * n, h, 2 * h, 2]
    offs = np.cumsum([0] + sizes)
    return replace(
        policy,
        w_hidden=vec[offs[0] : offs[1]].reshape(h, n).astype(dt),
        b_hidden=vec[offs[1] : offs[2]].astype(dt),
        w_out=vec[offs[2] : offs[3]].reshape(2, h).astype(dt),
        b_out=vec[offs[3] : offs[4]].astype(dt),
    )


def grad_log_policy(
    policy: PolicyParams,
    f: np.ndarray,
    action: SoftmaxSample | GaussianSample,
) -> np.ndarray:
    """Gradient of the joint action log-probability w.r.t. all policy parameters.

    Softmax axes are independent, so the result is the two per-axis gradients
    stacked in parameter order. The Gaussian gradient backpropagates
    -(a - mu)^2 / (2 sigma^2) through the MLP using the pre-clip draw.
    """
    f = np.asarray(f, dtype=np.float64)
    if isinstance(policy, SoftmaxPolicyParams):
        if not isinstance(action, SoftmaxSample):
            raise TypeError("softmax policy requires a SoftmaxSample action")
        blocks = []
        for axis, k in (("pan", action.k_pan), ("tilt", action.k_tilt)):
            probs = softmax_probs(policy, f, axis)
            coeff = -probs
            coeff[k] += 1.0
            blocks.append(np.outer(coeff / policy.temperature, f))
        return _pack(*blocks)

    if not isinstance(action, GaussianSample):
        raise TypeError("gaussian policy requires a GaussianSample action")
    w1 = policy.w_hidden.astype(np.float64)
    w2 = policy.w_out.astype(np.float64)
    h = np.tanh(w1 @ f + policy.b_hidden.astype(np.float64))
    mu = w2 @ h + policy.b_out.astype(np.float64)
    a = np.array([action.raw_pan, action.raw_tilt], dtype=np.float64)
    dmu = (a - mu) / policy.sigma**2
    db2 = dmu
    dw2 = np.outer(dmu, h)
    dpre = (w2.T @ dmu) * (1.0 - h * h)
    dw1 = np.outer(dpre, f)
    db1 = dpre
    return _pack(dw1, db1, dw2, db2)


def value_of(critic: CriticState, f: np.ndarray) -> float:
    v = critic.v.astype(np.float64)
    return float(v[:-1] @ np.asarray(f, dtype=np.float64) + v[-1])


def nac_update(
    critic: CriticState,
    policy: PolicyParams,
    f_t: np.ndarray,
    action: SoftmaxSample | GaussianSample,
    reward: RewardSignal,
    f_next: np.ndarray,
) -> tuple[CriticState, PolicyParams]:
    """One online actor-critic step on the transition (f_t, action, reward, f_next).

    TD error drives the linear critic; the advantage weights w regress the TD
    error onto the compatible features (the log-policy gradient); the actor
    steps along w. With `natural=False` the actor instead takes the vanilla
    TD-error-weighted gradient step.
    """
    gamma = reward.gamma
    delta = reward.value + gamma * value_of(critic, f_next) - value_of(critic, f_t)
    if not np.isfinite(delta):
        raise NumericError(f"non-finite TD error {delta}")

    f64 = np.asarray(f_t, dtype=np.float64)
    psi = grad_log_policy(policy, f64, action)

    decay = gamma * critic.lam
    trace_v = decay * critic.trace_v.astype(np.float64)
    trace_v[:-1] += f64
    trace_v[-1] += 1.0
    trace_w = decay * critic.trace_w.astype(np.float64) + psi

    v_new = critic.v.astype(np.float64) + critic.alpha_v * delta * trace_v
    w64 = critic.w.astype(np.float64)
    if critic.natural:
        w_new = w64 + critic.alpha_w * (delta - w64 @ psi) * trace_w
        actor_step = critic.alpha_theta * w_new
    else:
        w_new = w64
        actor_step = critic.alpha_theta * delta * trace_w
    theta_new = policy_to_vector(policy) + actor_step
    if not (
        np.all(np.isfinite(v_new))
        and np.all(np.isfinite(w_new))
        and np.all(np.isfinite(theta_new))
    ):
        raise NumericError("non-finite actor-critic update")

    new_critic = replace(
        critic,
        v=v_new.astype(critic.v.dtype),
        w=w_new.astype(critic.w.dtype),
        trace_v=trace_v.astype(critic.trace_v.dtype),
        trace_w=trace_w.astype(critic.trace_w.dtype),
    )
    return new_critic, vector_to_policy(policy, theta_new)
