"""Target/eye dynamics in pixel-and-frame units, and retinal frame-pair rendering.

The scene is a texture translating across the fovea. Retinal content moves by
the slip vector (target velocity minus eye velocity) each frame, so the window
into the texture is placed at the gaze position expressed in texture-attached
coordinates. Episodes last a fixed number of frames, after which a new texture
and target velocity are drawn.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .imagery import FramePair, GrayImage, sample_window

__all__ = [
    "UnitSystem",
    "UNITS",
    "EnvParams",
    "TargetState",
    "EyeState",
    "Action",
    "EnvState",
    "ConfigError",
    "reset",
    "step",
    "render_pair",
    "ideal_action",
    "slip_of",
]


class ConfigError(ValueError):
    """Invalid configuration (bad key, bad value, unusable corpus)."""


@dataclass(frozen=True)
class UnitSystem:
    """Fixed unit conversions between physical and pixel/frame quantities."""

    px_per_deg: int = 5
    frames_per_s: int = 30
    fovea_px: int = 55
    max_speed_px: float = 4.0  # = 24 deg/s
    max_accel_px: float = 5.0  # = 900 deg/s^2
    episode_frames: int = 10

    def speed_to_px(self, deg_per_s: float) -> float:
        return deg_per_s * self.px_per_deg / self.frames_per_s

    def accel_to_px(self, deg_per_s2: float) -> float:
        return deg_per_s2 * self.px_per_deg / self.frames_per_s**2


UNITS = UnitSystem()


@dataclass(frozen=True)
class EnvParams:
    """Tunable environment knobs; defaults match the fixed unit system."""

    episode_frames: int = UNITS.episode_frames
    velocity_bound: float = UNITS.max_speed_px  # px/frame, per axis
    accel_bound: float = UNITS.max_accel_px  # px/frame^2, per axis
    fovea_px: int = UNITS.fovea_px

    def __post_init__(self):
        if self.episode_frames < 1:
            raise ConfigError("episode_frames must be >= 1")
        if self.velocity_bound <= 0 or self.accel_bound <= 0:
            raise ConfigError("velocity/acceleration bounds must be positive")
        if self.fovea_px < 10:
            raise ConfigError("fovea_px must be >= 10")


@dataclass(frozen=True)
class Action:
    """Acceleration command in px/frame^2 per axis."""

    ax: float
    ay: float

    def clipped(self, bound: float) -> "Action":
        return Action(
            ax=float(np.clip(self.ax, -bound, bound)),
            ay=float(np.clip(self.ay, -bound, bound)),
        )


@dataclass(frozen=True)
class TargetState:
    texture_id: int
    velocity: tuple[float, float]  # px/frame
    phase: int  # frames elapsed in current episode, 0..episode_frames-1
    position: tuple[float, float]  # px, texture coordinates


@dataclass(frozen=True)
class EyeState:
    velocity: tuple[float, float]  # px/frame
    position: tuple[float, float]  # px


@dataclass(frozen=True)
class EnvState:
    target: TargetState
    eye: EyeState
    rng_state: dict  # PCG64 bit-generator state; advances only at episode draws
    frame_index: int
    params: EnvParams
    corpus: tuple[GrayImage, ...]

    @property
    def slip(self) -> tuple[float, float]:
        return slip_of(self)


def slip_of(state: EnvState) -> tuple[float, float]:
    """Retinal slip: target velocity minus eye velocity, px/frame per axis."""
    return (
        state.target.velocity[0] - state.eye.velocity[0],
        state.target.velocity[1] - state.eye.velocity[1],
    )


def _make_rng(state_dict: dict) -> np.random.Generator:
    gen = np.random.Generator(np.random.PCG64())
    gen.bit_generator.state = state_dict
    return gen


def _draw_episode(
    rng: np.random.Generator, corpus: tuple[GrayImage, ...], params: EnvParams,
    randomize_position: bool,
) -> TargetState:
    texture_id = int(rng.integers(len(corpus)))
    vb = params.velocity_bound
    vx, vy = rng.uniform(-vb, vb, size=2)
    tex = corpus[texture_id]
    if randomize_position:
        px = float(rng.uniform(0.0, tex.width))
        py = float(rng.uniform(0.0, tex.height))
    else:
        px, py = tex.width / 2.0, tex.height / 2.0
    return TargetState(
        texture_id=texture_id,
        velocity=(float(vx), float(vy)),
        phase=0,
        position=(px, py),
    )


def reset(
    seed: int,
    corpus: tuple[GrayImage, ...] | list[GrayImage],
    params: EnvParams = EnvParams(),
) -> EnvState:
    """Start a fresh environment: uniform texture and target velocity, still eye."""
    corpus = tuple(corpus)
    if not corpus:
        raise ConfigError("corpus must contain at least one texture")
    for i, tex in enumerate(corpus):
        if tex.width < params.fovea_px or tex.height < params.fovea_px:
            raise ConfigError(
                f"texture {i} is {tex.width}x{tex.height}, smaller than the "
                f"{params.fovea_px}px fovea"
            )
    rng = np.random.default_rng(seed)
    target = _draw_episode(rng, corpus, params, randomize_position=False)
    tex = corpus[target.texture_id]
    eye = EyeState(velocity=(0.0, 0.0), position=(tex.width / 2.0, tex.height / 2.0))
    return EnvState(
        target=target,
        eye=eye,
        rng_state=rng.bit_generator.state,
        frame_index=0,
        params=params,
        corpus=corpus,
    )


def render_pair(state: EnvState) -> FramePair:
    """Render the two foveal frames for the current state.

    The window center in texture coordinates is the gaze position relative to
    the target; stepping it backwards by one relative-velocity increment gives
    the previous frame, so the rendered content translates by exactly the slip
    vector between the two frames.
    """
    tex = state.corpus[state.target.texture_id]
    ex, ey = state.eye.position
    tx, ty = state.target.position
    cx = tex.width / 2.0 + (ex - tx)
    cy = tex.height / 2.0 + (ey - ty)
    dvx = state.eye.velocity[0] - state.target.velocity[0]
    dvy = state.eye.velocity[1] - state.target.velocity[1]
    size = state.params.fovea_px
    prev = sample_window(tex, cx - dvx, cy - dvy, state.frame_index - 1, size=size)
    curr = sample_window(tex, cx, cy, state.frame_index, size=size)
    return FramePair(previous=prev, current=curr)


def step(state: EnvState, action: Action) -> tuple[FramePair, EnvState]:
    """Advance one frame: episode redraw, velocity update, position advance, render."""
    params = state.params
    target = state.target
    eye = state.eye

    new_phase = target.phase + 1
    rng_state = state.rng_state
    if new_phase >= params.episode_frames:
        rng = _make_rng(rng_state)
        target = _draw_episode(rng, state.corpus, params, randomize_position=True)
        rng_state = rng.bit_generator.state
    else:
        target = replace(target, phase=new_phase)

    a = action.clipped(params.accel_bound)
    vb = params.velocity_bound
    evx = float(np.clip(eye.velocity[0] + a.ax, -vb, vb))
    evy = float(np.clip(eye.velocity[1] + a.ay, -vb, vb))

    tex = state.corpus[target.texture_id]
    tpos = (
        (target.position[0] + target.velocity[0]) % tex.width,
        (target.position[1] + target.velocity[1]) % tex.height,
    )
    epos = (
        (eye.position[0] + evx) % tex.width,
        (eye.position[1] + evy) % tex.height,
    )
    new_state = EnvState(
        target=replace(target, position=tpos),
        eye=EyeState(velocity=(evx, evy), position=epos),
        rng_state=rng_state,
        frame_index=state.frame_index + 1,
        params=params,
        corpus=state.corpus,
    )
    return render_pair(new_state), new_state


def ideal_action(slip: tuple[float, float], accel_bound: float = UNITS.max_accel_px) -> Action:
    """The one-step slip-zeroing command: accelerate by the slip, clipped."""
    return Action(ax=slip[0], ay=slip[1]).clipped(accel_bound)
