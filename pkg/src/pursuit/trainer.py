"""The closed perception/action training loop, checkpointing, and telemetry.

Per frame: encode the current frame pair, derive the reward from the
reconstruction error, update the actor-critic on the previous transition,
sample an action, step the environment, then apply the dictionary gradient
step. The dictionary snapshot used to encode frame t is always the one
produced at the end of frame t-1.

All learned state (dictionary atoms, policy weights, critic) lives in float32;
arithmetic upcasts to float64 and results are cast back each frame. Checkpoints
therefore round-trip bit-exactly and a resumed run replays the exact float
sequence of an unbroken one.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import environment as env
from . import policy as pol
from .config import Config, build_corpora, config_hash, config_text
from .environment import Action, EnvParams, EnvState
from .features import pool_features
from .imagery import GrayImage
from .sparsecode import (
    Dictionary,
    encode_batch,
    error_from_codes,
    extract_patches,
    init_dictionary,
    update_dictionary,
)

__all__ = [
    "CheckpointError",
    "TrainerError",
    "EnvSnapshot",
    "PendingTransition",
    "Checkpoint",
    "TrainResult",
    "TELEMETRY_COLUMNS",
    "save_checkpoint",
    "load_checkpoint",
    "init_policy",
    "init_critic_from_cfg",
    "train",
]

_MAGIC = b"PURSUITCKPT 1\n"

TELEMETRY_COLUMNS = (
    "frame",
    "recon_error",
    "reward",
    "slip_x",
    "slip_y",
    "eye_vx",
    "eye_vy",
    "action_x",
    "action_y",
)


class CheckpointError(RuntimeError):
    """Unreadable checkpoint: bad magic/version, truncation, or checksum mismatch."""


class TrainerError(RuntimeError):
    """Training aborted; the message carries the offending frame index."""


@dataclass(frozen=True)
class EnvSnapshot:
    """The serializable part of EnvState (textures are rebuilt from config)."""

    texture_id: int
    target_velocity: tuple[float, float]
    target_position: tuple[float, float]
    phase: int
    eye_velocity: tuple[float, float]
    eye_position: tuple[float, float]
    rng_state: dict
    frame_index: int

    @classmethod
    def from_state(cls, state: EnvState) -> "EnvSnapshot":
        return cls(
            texture_id=state.target.texture_id,
            target_velocity=tuple(state.target.velocity),
            target_position=tuple(state.target.position),
            phase=state.target.phase,
            eye_velocity=tuple(state.eye.velocity),
            eye_position=tuple(state.eye.position),
            rng_state=state.rng_state,
            frame_index=state.frame_index,
        )

    def to_state(self, corpus: tuple[GrayImage, ...], params: EnvParams) -> EnvState:
        return EnvState(
            target=env.TargetState(
                texture_id=self.texture_id,
                velocity=tuple(self.target_velocity),
                phase=self.phase,
                position=tuple(self.target_position),
            ),
            eye=env.EyeState(
                velocity=tuple(self.eye_velocity), position=tuple(self.eye_position)
            ),
            rng_state=self.rng_state,
            frame_index=self.frame_index,
            params=params,
            corpus=corpus,
        )


@dataclass(frozen=True)
class PendingTransition:
    """The (features, action) of the previous frame, awaiting its reward."""

    features: np.ndarray  # float32
    record: pol.SoftmaxSample | pol.GaussianSample


@dataclass(frozen=True, eq=False)
class Checkpoint:
    frame_index: int
    config_hash: str
    dictionary: Dictionary
    policy: pol.PolicyParams
    critic: pol.CriticState
    env: EnvSnapshot
    policy_rng_state: dict
    pending: PendingTransition | None

    def __eq__(self, other):
        if not isinstance(other, Checkpoint):
            return NotImplemented
        if (
            self.frame_index != other.frame_index
            or self.config_hash != other.config_hash
            or self.env != other.env
            or self.policy_rng_state != other.policy_rng_state
            or self.dictionary != other.dictionary
        ):
            return False
        mine, theirs = _named_arrays(self), _named_arrays(other)
        if [n for n, _ in mine] != [n for n, _ in theirs]:
            return False
        if not all(
            a.dtype == b.dtype and np.array_equal(a, b)
            for (_, a), (_, b) in zip(mine, theirs)
        ):
            return False
        if (self.pending is None) != (other.pending is None):
            return False
        return self.pending is None or self.pending.record == other.pending.record


def _policy_meta(policy: pol.PolicyParams) -> dict:
    if isinstance(policy, pol.SoftmaxPolicyParams):
        return {
            "head": "softmax",
            "temperature": policy.temperature,
            "accel_bound": policy.accel_bound,
        }
    return {
        "head": "gaussian",
        "sigma": policy.sigma,
        "accel_bound": policy.accel_bound,
    }


def _policy_arrays(policy: pol.PolicyParams) -> list[tuple[str, np.ndarray]]:
    if isinstance(policy, pol.SoftmaxPolicyParams):
        return [("theta_pan", policy.theta_pan), ("theta_tilt", policy.theta_tilt)]
    return [
        ("w_hidden", policy.w_hidden),
        ("b_hidden", policy.b_hidden),
        ("w_out", policy.w_out),
        ("b_out", policy.b_out),
    ]


def _named_arrays(ckpt: Checkpoint) -> list[tuple[str, np.ndarray]]:
    out = [("dict_atoms", ckpt.dictionary.atoms)]
    out += _policy_arrays(ckpt.policy)
    out += [
        ("critic_v", ckpt.critic.v),
        ("critic_w", ckpt.critic.w),
        ("trace_v", ckpt.critic.trace_v),
        ("trace_w", ckpt.critic.trace_w),
    ]
    if ckpt.pending is not None:
        out.append(("pending_f", ckpt.pending.features))
    return out


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    """Write the container: magic line, JSON text header, checksummed payload."""
    arrays = _named_arrays(ckpt)
    manifest = []
    payload = bytearray()
    for name, arr in arrays:
        arr = np.ascontiguousarray(arr)
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        raw = le.tobytes()
        manifest.append(
            {
                "name": name,
                "dtype": le.dtype.str,
                "shape": list(arr.shape),
                "offset": len(payload),
                "nbytes": len(raw),
            }
        )
        payload.extend(raw)

    pending_meta = None
    if ckpt.pending is not None:
        rec = ckpt.pending.record
        if isinstance(rec, pol.SoftmaxSample):
            pending_meta = {"kind": "softmax", "k_pan": rec.k_pan, "k_tilt": rec.k_tilt}
        else:
            pending_meta = {
                "kind": "gaussian",
                "raw_pan": rec.raw_pan,
                "raw_tilt": rec.raw_tilt,
            }

    header = {
        "format_version": 1,
        "config_hash": ckpt.config_hash,
        "frame_index": ckpt.frame_index,
        "dictionary": {
            "n_atoms": ckpt.dictionary.n_atoms,
            "dim": ckpt.dictionary.dim,
            "generation": ckpt.dictionary.generation,
        },
        "policy": _policy_meta(ckpt.policy),
        "critic": {
            "alpha_v": ckpt.critic.alpha_v,
            "alpha_w": ckpt.critic.alpha_w,
            "alpha_theta": ckpt.critic.alpha_theta,
            "lam": ckpt.critic.lam,
            "natural": ckpt.critic.natural,
        },
        "env": {
            "texture_id": ckpt.env.texture_id,
            "target_velocity": list(ckpt.env.target_velocity),
            "target_position": list(ckpt.env.target_position),
            "phase": ckpt.env.phase,
            "eye_velocity": list(ckpt.env.eye_velocity),
            "eye_position": list(ckpt.env.eye_position),
            "rng_state": ckpt.env.rng_state,
            "frame_index": ckpt.env.frame_index,
        },
        "policy_rng_state": ckpt.policy_rng_state,
        "pending": pending_meta,
        "arrays": manifest,
        "payload_sha256": hashlib.sha256(bytes(payload)).hexdigest(),
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(f"{len(blob)}\n".encode())
        fh.write(blob)
        fh.write(bytes(payload))


def load_checkpoint(path: str | Path) -> Checkpoint:
    data = Path(path).read_bytes()
    if not data.startswith(_MAGIC):
        raise CheckpointError(f"{path}: not a checkpoint or unsupported version")
    rest = data[len(_MAGIC) :]
    nl = rest.find(b"\n")
    if nl < 0:
        raise CheckpointError(f"{path}: truncated header length")
    try:
        hlen = int(rest[:nl])
    except ValueError:
        raise CheckpointError(f"{path}: malformed header length") from None
    body = rest[nl + 1 :]
    if len(body) < hlen:
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(body[:hlen])
    except json.JSONDecodeError as e:
        raise CheckpointError(f"{path}: malformed header JSON: {e}") from None
    if header.get("format_version") != 1:
        raise CheckpointError(
            f"{path}: unsupported format version {header.get('format_version')}"
        )
    payload = body[hlen:]
    total = sum(m["nbytes"] for m in header["arrays"])
    if len(payload) < total:
        raise CheckpointError(
            f"{path}: truncated payload ({len(payload)} of {total} bytes)"
        )
    payload = payload[:total]
    digest = hashlib.sha256(payload).hexdigest()
    if digest != header["payload_sha256"]:
        raise CheckpointError(f"{path}: payload checksum mismatch")

    arrays = {}
    for m in header["arrays"]:
        raw = payload[m["offset"] : m["offset"] + m["nbytes"]]
        arrays[m["name"]] = np.frombuffer(raw, dtype=np.dtype(m["dtype"])).reshape(
            m["shape"]
        ).copy()

    dmeta = header["dictionary"]
    dictionary = Dictionary(atoms=arrays["dict_atoms"], generation=dmeta["generation"])

    pmeta = header["policy"]
    if pmeta["head"] == "softmax":
        policy = pol.SoftmaxPolicyParams(
            theta_pan=arrays["theta_pan"],
            theta_tilt=arrays["theta_tilt"],
            temperature=pmeta["temperature"],
            accel_bound=pmeta["accel_bound"],
        )
    else:
        policy = pol.GaussianPolicyParams(
            w_hidden=arrays["w_hidden"],
            b_hidden=arrays["b_hidden"],
            w_out=arrays["w_out"],
            b_out=arrays["b_out"],
            sigma=pmeta["sigma"],
            accel_bound=pmeta["accel_bound"],
        )

    cmeta = header["critic"]
    critic = pol.CriticState(
        v=arrays["critic_v"],
        w=arrays["critic_w"],
        trace_v=arrays["trace_v"],
        trace_w=arrays["trace_w"],
        alpha_v=cmeta["alpha_v"],
        alpha_w=cmeta["alpha_w"],
        alpha_theta=cmeta["alpha_theta"],
        lam=cmeta["lam"],
        natural=cmeta["natural"],
    )

    emeta = header["env"]
    snapshot = EnvSnapshot(
        texture_id=emeta["texture_id"],
        target_velocity=tuple(emeta["target_velocity"]),
        target_position=tuple(emeta["target_position"]),
        phase=emeta["phase"],
        eye_velocity=tuple(emeta["eye_velocity"]),
        eye_position=tuple(emeta["eye_position"]),
        rng_state=emeta["rng_state"],
        frame_index=emeta["frame_index"],
    )

    pending = None
    if header["pending"] is not None:
        pm = header["pending"]
        record = (
            pol.SoftmaxSample(k_pan=pm["k_pan"], k_tilt=pm["k_tilt"])
            if pm["kind"] == "softmax"
            else pol.GaussianSample(raw_pan=pm["raw_pan"], raw_tilt=pm["raw_tilt"])
        )
        pending = PendingTransition(features=arrays["pending_f"], record=record)

    return Checkpoint(
        frame_index=header["frame_index"],
        config_hash=header["config_hash"],
        dictionary=dictionary,
        policy=policy,
        critic=critic,
        env=snapshot,
        policy_rng_state=header["policy_rng_state"],
        pending=pending,
    )


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainResult:
    final: Checkpoint
    final_path: Path
    checkpoint_paths: list[Path]
    telemetry_path: Path
    frames_run: int
    max_energy_violation: float


def init_policy(cfg: Config, rng: np.random.Generator) -> pol.PolicyParams:
    p = cfg.policy
    n = cfg.sparsecode.atom_count
    if cfg.trainer.policy_head == "softmax":
        return pol.init_softmax_policy(
            n, rng, n_actions=p.n_actions, temperature=p.temperature,
            accel_bound=cfg.environment.accel_bound, init_scale=p.init_scale,
        )
    return pol.init_gaussian_policy(
        n, rng, n_hidden=p.hidden_units, sigma=p.sigma,
        accel_bound=cfg.environment.accel_bound, init_scale=p.init_scale,
    )


def init_critic_from_cfg(cfg: Config, policy: pol.PolicyParams) -> pol.CriticState:
    p = cfg.policy
    return pol.init_critic(
        policy, cfg.sparsecode.atom_count, alpha_v=p.alpha_v, alpha_w=p.alpha_w,
        alpha_theta=p.alpha_theta, lam=p.trace_lambda, natural=p.natural_gradient,
    )


def _format_row(values) -> str:
    return ",".join(repr(v) if isinstance(v, float) else str(v) for v in values)


def train(
    cfg: Config,
    out_dir: str | Path,
    corpus: tuple[GrayImage, ...] | None = None,
    resume_from: str | Path | None = None,
) -> TrainResult:
    """Run the loop for cfg.trainer.total_frames frames, or continue a checkpoint.

    Writes `telemetry.csv`, `config.ini`, and `ckpt_<frame>.ckpt` files into
    `out_dir`. Fully deterministic for a fixed config (and machine).
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if corpus is None:
        corpus, _ = build_corpora(cfg)
    chash = config_hash(cfg)
    (out_dir / "config.ini").write_text(config_text(cfg))

    n_atoms = cfg.sparsecode.atom_count
    kmax = cfg.sparsecode.kmax
    tol = cfg.sparsecode.tol
    gamma = cfg.policy.gamma
    env_params = cfg.environment

    if resume_from is None:
        seeds = np.random.SeedSequence(cfg.trainer.seed).spawn(3)
        dict_rng, policy_rng = (np.random.default_rng(s) for s in seeds[:2])
        patch_dim = 2 * 10 * 10
        dictionary = init_dictionary(n_atoms, patch_dim, dict_rng)
        policy = init_policy(cfg, policy_rng)
        critic = init_critic_from_cfg(cfg, policy)
        state = env.reset(seeds[2], corpus, env_params)
        pending: PendingTransition | None = None
        start = 0
    else:
        ckpt = load_checkpoint(resume_from)
        if ckpt.config_hash != chash:
            raise TrainerError(
                f"checkpoint {resume_from} was produced by a different config "
                f"({ckpt.config_hash[:12]} != {chash[:12]})"
            )
        dictionary = ckpt.dictionary
        policy = ckpt.policy
        critic = ckpt.critic
        state = ckpt.env.to_state(corpus, env_params)
        policy_rng = np.random.Generator(np.random.PCG64())
        policy_rng.bit_generator.state = ckpt.policy_rng_state
        pending = ckpt.pending
        start = ckpt.frame_index

    total = cfg.trainer.total_frames
    if start > total:
        raise TrainerError(f"checkpoint frame {start} is beyond total_frames {total}")

    def snapshot(frame: int) -> Checkpoint:
        return Checkpoint(
            frame_index=frame,
            config_hash=chash,
            dictionary=dictionary,
            policy=policy,
            critic=critic,
            env=EnvSnapshot.from_state(state),
            policy_rng_state=policy_rng.bit_generator.state,
            pending=pending,
        )

    checkpoint_paths: list[Path] = []

    def write_checkpoint(frame: int) -> Path:
        path = out_dir / f"ckpt_{frame:08d}.ckpt"
        save_checkpoint(snapshot(frame), path)
        checkpoint_paths.append(path)
        return path

    max_viol = 0.0
    telemetry_path = out_dir / "telemetry.csv"
    pair = env.render_pair(state)
    with open(telemetry_path, "w") as log:
        log.write(",".join(TELEMETRY_COLUMNS) + "\n")
        for t in range(start, total):
            if t % cfg.trainer.checkpoint_cadence == 0:
                write_checkpoint(t)

            batch = extract_patches(pair)
            codes = encode_batch(batch, dictionary, kmax=kmax, tol=tol)
            max_viol = max(max_viol, codes.max_energy_violation)
            r = error_from_codes(codes)
            reward = pol.RewardSignal(value=-r, gamma=gamma)
            f = pool_features(
                codes, n_atoms, divisive_norm=cfg.features.divisive_normalization
            ).astype(np.float32)

            try:
                if pending is not None:
                    critic, policy = pol.nac_update(
                        critic, policy, pending.features, pending.record, reward, f
                    )
                if isinstance(policy, pol.SoftmaxPolicyParams):
                    T = cfg.policy.temperature_at(t)
                    if T != policy.temperature:
                        policy = replace(policy, temperature=T)
                action, record = pol.sample_action(policy, f, policy_rng, quantize=True)
            except pol.NumericError as e:
                raise TrainerError(f"numeric failure at frame {t}: {e}") from e

            if t % cfg.trainer.log_cadence == 0:
                slip = state.slip
                log.write(
                    _format_row(
                        (
                            t,
                            float(r),
                            float(reward.value),
                            slip[0],
                            slip[1],
                            state.eye.velocity[0],
                            state.eye.velocity[1],
                            action.ax,
                            action.ay,
                        )
                    )
                    + "\n"
                )

            pair, state = env.step(state, action)
            dictionary = update_dictionary(
                dictionary, batch, codes, lr=cfg.sparsecode.lr_at(t)
            )
            pending = PendingTransition(features=f, record=record)

    final_path = out_dir / f"ckpt_{total:08d}.ckpt"
    final = snapshot(total)
    save_checkpoint(final, final_path)
    checkpoint_paths.append(final_path)
    return TrainResult(
        final=final,
        final_path=final_path,
        checkpoint_paths=checkpoint_paths,
        telemetry_path=telemetry_path,
        frames_run=total - start,
        max_energy_violation=max_viol,
    )
