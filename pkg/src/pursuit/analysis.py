"""Evaluation battery: slip-grid policy error, Gabor fits, tuning curves, histograms.

Everything here is a pure function of checkpointed state (policy, dictionary)
and held-out textures, so conditions, atoms, and checkpoints can be processed
in parallel.
"""

from __future__ import annotations

import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.optimize import least_squares

from .environment import Action, ideal_action
from .features import pool_features
from .imagery import FoveaFrame, FramePair, GrayImage, sample_window
from .policy import PolicyParams, greedy_action
from .sparsecode import Dictionary, encode_batch, extract_patches

__all__ = [
    "IdealPolicy",
    "SlipGridResult",
    "GaborFit",
    "TuningCurve",
    "PreferenceHistograms",
    "eval_slip_grid",
    "mse_training_curve",
    "fit_gabor",
    "fit_all_atoms",
    "preferred_velocity",
    "tuning_curves",
    "preference_histograms",
    "render_bases",
]


class IdealPolicy:
    """Oracle policy: reads the true slip and zeroes it in one step."""

    def __init__(self, accel_bound: float = 5.0):
        self.accel_bound = accel_bound

    def action_for(self, slip: tuple[float, float]) -> Action:
        return ideal_action(slip, self.accel_bound)


# ---------------------------------------------------------------------------
# Slip grid
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class SlipGridResult:
    """Greedy-policy error against the ideal policy over the integer slip grid."""

    conditions: np.ndarray  # (81, 2) slip per condition, px/frame
    mean_actions: np.ndarray  # (81, 2) greedy action averaged over pairs and trials
    sq_errors: np.ndarray  # (81,) squared error averaged over pairs and trials
    mse: float  # average of sq_errors over conditions
    per_trial_mse: np.ndarray  # (n_trials,)
    magnitude_bins: np.ndarray  # (B, 3): bin_lo, bin_hi, mse

    def to_csv(self) -> str:
        lines = ["slip_x,slip_y,mean_action_x,mean_action_y,sq_error"]
        for (sx, sy), (ax, ay), e in zip(
            self.conditions, self.mean_actions, self.sq_errors
        ):
            lines.append(f"{sx!r},{sy!r},{ax!r},{ay!r},{e!r}")
        return "\n".join(lines) + "\n"


def _canonical_order(images: tuple[GrayImage, ...]) -> tuple[GrayImage, ...]:
    # content-addressed ordering makes results independent of list order
    return tuple(sorted(images, key=lambda im: im.pixels.tobytes()))


def _condition_pairs(
    holdout: tuple[GrayImage, ...],
    slip: tuple[int, int],
    n_pairs: int,
    eval_seed: int,
    cond_index: int,
    fovea_px: int,
) -> list[FramePair]:
    """The fixed stimulus set for one slip condition (same across checkpoints)."""
    rng = np.random.default_rng(np.random.SeedSequence((eval_seed, cond_index)))
    pairs = []
    for j in range(n_pairs):
        tex = holdout[j % len(holdout)]
        cx = int(rng.integers(tex.width))
        cy = int(rng.integers(tex.height))
        prev = sample_window(tex, cx + slip[0], cy + slip[1], 0, size=fovea_px)
        curr = sample_window(tex, cx, cy, 1, size=fovea_px)
        pairs.append(FramePair(previous=prev, current=curr))
    return pairs


def eval_slip_grid(
    trials,
    holdout: tuple[GrayImage, ...],
    pairs_per_condition: int = 50,
    eval_seed: int = 2024,
    kmax: int = 10,
    tol: float = 0.0,
    divisive_norm: bool = False,
    fovea_px: int = 55,
    velocity_bound: float = 4.0,
    accel_bound: float = 5.0,
    workers: int = 1,
) -> SlipGridResult:
    """Greedy actions vs the ideal policy over the 9x9 integer slip grid.

    `trials` is one (policy, dictionary) pair or a list of them; the result
    averages squared errors over image pairs, the 81 conditions, and trials.
    A policy may be an IdealPolicy, which bypasses encoding.
    """
    if isinstance(trials, tuple) and len(trials) == 2 and not isinstance(trials[0], tuple):
        trials = [trials]
    trials = list(trials)
    if not holdout:
        from .environment import ConfigError

        raise ConfigError("holdout corpus must not be empty")
    holdout = _canonical_order(holdout)

    span = int(round(velocity_bound))
    grid = [(sx, sy) for sy in range(-span, span + 1) for sx in range(-span, span + 1)]
    n_cond = len(grid)
    n_trials = len(trials)

    def eval_condition(args):
        ci, slip = args
        ideal = ideal_action(slip, accel_bound)
        ideal_vec = np.array([ideal.ax, ideal.ay])
        trial_means = np.zeros((n_trials, 2))
        trial_sq = np.zeros(n_trials)
        pairs = None
        for ti, (policy, dictionary) in enumerate(trials):
            if isinstance(policy, IdealPolicy):
                act = policy.action_for(slip)
                a = np.array([act.ax, act.ay])
                trial_means[ti] = a
                trial_sq[ti] = float(((a - ideal_vec) ** 2).sum())
                continue
            if pairs is None:
                pairs = _condition_pairs(
                    holdout, slip, pairs_per_condition, eval_seed, ci, fovea_px
                )
            for pair in pairs:
                batch = extract_patches(pair)
                codes = encode_batch(batch, dictionary, kmax=kmax, tol=tol)
                f = pool_features(codes, dictionary.n_atoms, divisive_norm=divisive_norm)
                act = greedy_action(policy, f.astype(np.float32))
                a = np.array([act.ax, act.ay])
                trial_means[ti] += a / pairs_per_condition
                trial_sq[ti] += float(((a - ideal_vec) ** 2).sum()) / pairs_per_condition
        return ci, trial_means.mean(axis=0), trial_sq

    tasks = list(enumerate(grid))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(eval_condition, tasks))
    else:
        results = [eval_condition(t) for t in tasks]

    mean_actions = np.zeros((n_cond, 2))
    per_cond_trial = np.zeros((n_cond, n_trials))
    for ci, mean_act, sq in results:
        mean_actions[ci] = mean_act
        per_cond_trial[ci] = sq

    conditions = np.array(grid, dtype=np.float64)
    sq_errors = per_cond_trial.mean(axis=1)
    per_trial_mse = per_cond_trial.mean(axis=0)
    mags = np.linalg.norm(conditions, axis=1)
    edges = np.arange(0.0, np.ceil(mags.max()) + 1.0)
    bins = []
    for lo, hi in zip(edges[:-1], edges[1:]):
        sel = (mags >= lo) & (mags < hi) if hi < edges[-1] else (mags >= lo)
        if sel.any():
            bins.append((lo, hi, float(sq_errors[sel].mean())))
    return SlipGridResult(
        conditions=conditions,
        mean_actions=mean_actions,
        sq_errors=sq_errors,
        mse=float(sq_errors.mean()),
        per_trial_mse=per_trial_mse,
        magnitude_bins=np.array(bins),
    )


def mse_training_curve(
    trial_series,
    holdout: tuple[GrayImage, ...],
    **grid_kwargs,
) -> list[dict]:
    """Slip-grid MSE per checkpoint: rows of frame, mean, std, per-trial values.

    `trial_series` is a list of trials, each an ordered list of
    (frame, policy, dictionary) tuples aligned on frames across trials.
    """
    frames = [f for f, _, _ in trial_series[0]]
    for series in trial_series[1:]:
        if [f for f, _, _ in series] != frames:
            raise ValueError("checkpoint frames differ across trials")
    rows = []
    for i, frame in enumerate(frames):
        per_trial = []
        for series in trial_series:
            _, policy, dictionary = series[i]
            res = eval_slip_grid([(policy, dictionary)], holdout, **grid_kwargs)
            per_trial.append(res.mse)
        per_trial = np.array(per_trial)
        rows.append(
            {
                "frame": frame,
                "mse": float(per_trial.mean()),
                "std": float(per_trial.std(ddof=0)),
                "per_trial": per_trial,
            }
        )
    return rows


def mse_curve_csv(rows: list[dict]) -> str:
    n_trials = len(rows[0]["per_trial"]) if rows else 0
    header = "frame,mse,std" + "".join(f",mse_trial{t}" for t in range(n_trials))
    lines = [header]
    for row in rows:
        cells = [str(row["frame"]), repr(row["mse"]), repr(row["std"])]
        cells += [repr(float(v)) for v in row["per_trial"]]
        lines.append(",".join(cells))
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Gabor fits
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GaborFit:
    """Shared-spatial-parameter two-frame Gabor; only the phase differs per frame.

    `orientation` is the wave direction (normal to the stripes) in [0, pi).
    The grating term is cos(2 pi x' / wavelength - phase), so content drifting
    along +x' by d advances the phase by 2 pi d / wavelength.
    """

    center_x: float
    center_y: float
    orientation: float
    wavelength: float
    sigma_along: float  # envelope width along the wave direction
    sigma_across: float  # envelope width along the stripes
    phase_prev: float
    phase_curr: float
    amplitude: float
    fit_error: float  # residual energy / atom energy

    @classmethod
    def unfit(cls) -> "GaborFit":
        nan = float("nan")
        return cls(nan, nan, nan, nan, nan, nan, nan, nan, nan, float("inf"))

    @property
    def is_fit(self) -> bool:
        return np.isfinite(self.fit_error)

    @property
    def delta_phase(self) -> float:
        return _wrap_pi(self.phase_curr - self.phase_prev)


def _wrap_pi(angle: float) -> float:
    """Wrap to (-pi, pi]."""
    wrapped = (angle + np.pi) % (2.0 * np.pi) - np.pi
    return float(np.pi) if wrapped == -np.pi else float(wrapped)


def _gabor_model(p: np.ndarray, patch_px: int) -> np.ndarray:
    cx, cy, theta, lam, s1, s2, ph_prev, ph_curr, amp = p
    ys, xs = np.mgrid[0:patch_px, 0:patch_px].astype(np.float64)
    xr = (xs - cx) * np.cos(theta) + (ys - cy) * np.sin(theta)
    yr = -(xs - cx) * np.sin(theta) + (ys - cy) * np.cos(theta)
    env = amp * np.exp(-(xr**2 / (2 * s1**2) + yr**2 / (2 * s2**2)))
    k = 2.0 * np.pi / lam
    return np.concatenate(
        [(env * np.cos(k * xr - ph)).ravel() for ph in (ph_prev, ph_curr)]
    )


def _start_candidates(atom: np.ndarray, patch_px: int):
    """Coarse orientation x wavelength grid with per-half phases solved linearly."""
    half = patch_px * patch_px
    ys, xs = np.mgrid[0:patch_px, 0:patch_px].astype(np.float64)
    c0 = (patch_px - 1) / 2.0
    starts = []
    for theta in np.arange(8) * (np.pi / 8):
        for lam in (2.5, 3.5, 5.0, 8.0):
            xr = (xs - c0) * np.cos(theta) + (ys - c0) * np.sin(theta)
            yr = -(xs - c0) * np.sin(theta) + (ys - c0) * np.cos(theta)
            env = np.exp(-(xr**2 + yr**2) / (2 * 2.5**2))
            k = 2.0 * np.pi / lam
            basis = np.stack([(env * np.cos(k * xr)).ravel(), (env * np.sin(k * xr)).ravel()])
            gram = basis @ basis.T + 1e-12 * np.eye(2)
            phases, amps, sse = [], [], 0.0
            for h in range(2):
                target = atom[h * half : (h + 1) * half]
                coef = np.linalg.solve(gram, basis @ target)
                # alpha cos + beta sin = A cos(k x' - phi), phi = atan2(beta, alpha)
                phases.append(float(np.arctan2(coef[1], coef[0])))
                amps.append(float(np.hypot(*coef)))
                sse += float(((basis.T @ coef - target) ** 2).sum())
            amp = max(1e-6, float(np.mean(amps)))
            starts.append(
                (sse, np.array([c0, c0, theta, lam, 2.5, 2.5, phases[0], phases[1], amp]))
            )
    starts.sort(key=lambda t: t[0])
    return [p for _, p in starts]


def fit_gabor(atom: np.ndarray, patch_px: int = 10, refine_starts: int = 3) -> GaborFit:
    """Damped least-squares fit of the two-frame Gabor model to one atom.

    Multi-start over a coarse orientation/wavelength grid (phases and amplitude
    initialized by linear projection), with the best starts refined. Atoms with
    negligible norm return the unfit marker.
    """
    atom = np.asarray(atom, dtype=np.float64)
    energy = float(atom @ atom)
    if energy < 1e-16:
        return GaborFit.unfit()

    lo = np.array([-3.0, -3.0, -np.pi, 2.0, 0.4, 0.4, -2 * np.pi, -2 * np.pi, 1e-8])
    hi = np.array(
        [patch_px + 2.0, patch_px + 2.0, 2 * np.pi, 60.0, 30.0, 30.0, 2 * np.pi, 2 * np.pi, 20.0]
    )

    best = None
    for p0 in _start_candidates(atom, patch_px)[:refine_starts]:
        try:
            res = least_squares(
                lambda p: _gabor_model(p, patch_px) - atom,
                np.clip(p0, lo, hi),
                bounds=(lo, hi),
                max_nfev=400,
            )
        except Exception:
            continue
        sse = float(2 * res.cost)
        if best is None or sse < best[0]:
            best = (sse, res.x)
    if best is None:
        return GaborFit.unfit()

    sse, p = best
    cx, cy, theta, lam, s1, s2, ph_prev, ph_curr, amp = p
    theta = theta % (2.0 * np.pi)
    if theta >= np.pi:  # flip the wave axis; phases negate
        theta -= np.pi
        ph_prev, ph_curr = -ph_prev, -ph_curr
    return GaborFit(
        center_x=float(cx),
        center_y=float(cy),
        orientation=float(theta),
        wavelength=float(lam),
        sigma_along=float(s1),
        sigma_across=float(s2),
        phase_prev=_wrap_pi(ph_prev),
        phase_curr=_wrap_pi(ph_curr),
        amplitude=float(amp),
        fit_error=sse / energy,
    )


def fit_all_atoms(dictionary: Dictionary, patch_px: int = 10, workers: int = 1) -> list[GaborFit]:
    atoms = dictionary.atoms_f64()
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(lambda a: fit_gabor(a, patch_px), atoms))
    return [fit_gabor(a, patch_px) for a in atoms]


def preferred_velocity(fit: GaborFit) -> float:
    """Signed drift speed along the wave direction: phase shift per frame times
    wavelength over 2 pi (a displacement d shifts the phase by 2 pi d / lambda)."""
    return fit.delta_phase * fit.wavelength / (2.0 * np.pi)


# ---------------------------------------------------------------------------
# Tuning curves
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class TuningCurve:
    directions_deg: np.ndarray  # (24,) motion directions
    direction_response: np.ndarray  # squared correlation per direction
    speeds: np.ndarray  # signed px/frame along the preferred axis
    speed_response: np.ndarray
    best_direction: float  # radians, [0, pi) wave axis of the grid optimum
    best_wavelength: float
    best_speed: float

    def to_csv(self) -> str:
        lines = ["curve,x,response"]
        for d, r in zip(self.directions_deg, self.direction_response):
            lines.append(f"direction,{d!r},{r!r}")
        for v, r in zip(self.speeds, self.speed_response):
            lines.append(f"velocity,{v!r},{r!r}")
        return "\n".join(lines) + "\n"


@lru_cache(maxsize=100_000)
def _grating_basis(patch_px: int, direction_mdeg: int, wavelength_m: int, speed_m: int):
    """Cosine/sine drifting-grating pair components and their inverse Gram.

    Keys are milli-units so the cache stays exact; the grating covers both
    frames, the second displaced by `speed` along the wave direction.
    """
    direction = direction_mdeg / 1000.0 * np.pi / 180.0
    lam = wavelength_m / 1000.0
    speed = speed_m / 1000.0
    ys, xs = np.mgrid[0:patch_px, 0:patch_px].astype(np.float64)
    c0 = (patch_px - 1) / 2.0
    xr = (xs - c0) * np.cos(direction) + (ys - c0) * np.sin(direction)
    k = 2.0 * np.pi / lam
    cos_parts, sin_parts = [], []
    for shift in (0.0, speed):
        arg = k * (xr - shift)
        cos_parts.append(np.cos(arg).ravel())
        sin_parts.append(np.sin(arg).ravel())
    c = np.concatenate(cos_parts)
    s = np.concatenate(sin_parts)
    basis = np.stack([c, s])
    gram = basis @ basis.T
    gram_inv = np.linalg.pinv(gram, rcond=1e-10)
    return basis, gram_inv


def _grating_response(atom: np.ndarray, patch_px: int, direction: float, lam: float, speed: float) -> float:
    """Squared correlation with the drifting grating, maximized over phase."""
    basis, gram_inv = _grating_basis(
        patch_px,
        int(round(np.degrees(direction) * 1000)),
        int(round(lam * 1000)),
        int(round(speed * 1000)),
    )
    m = basis @ atom
    val = float(m @ gram_inv @ m) / float(atom @ atom)
    return min(max(val, 0.0), 1.0)


_SEARCH_WAVELENGTHS = (2.5, 3.0, 3.5, 4.0, 5.0, 6.0, 8.0, 10.0, 14.0, 20.0)


def tuning_curves(
    atom: np.ndarray,
    patch_px: int = 10,
    n_directions: int = 24,
    speed_step: float = 0.25,
    max_speed: float = 4.0,
) -> TuningCurve | None:
    """Direction and velocity tuning of one atom against drifting cosine gratings.

    The direction curve sweeps the motion direction at the optimal spatial and
    temporal frequency; the velocity curve sweeps signed speed at the optimal
    orientation and spatial frequency. Responses are squared correlations
    maximized over grating phase, so they lie in [0, 1]. Returns None for a
    degenerate (near-zero) atom.
    """
    atom = np.asarray(atom, dtype=np.float64)
    if float(atom @ atom) < 1e-16:
        return None

    coarse_speeds = np.arange(-max_speed, max_speed + 1e-9, 0.5)
    best = (-1.0, 0.0, _SEARCH_WAVELENGTHS[0], 0.0)
    for direction in np.arange(12) * (np.pi / 12):
        for lam in _SEARCH_WAVELENGTHS:
            for v in coarse_speeds:
                resp = _grating_response(atom, patch_px, direction, lam, float(v))
                if resp > best[0]:
                    best = (resp, float(direction), lam, float(v))
    _, b_dir, b_lam, b_speed = best

    dirs_deg = np.arange(n_directions) * (360.0 / n_directions)
    dir_resp = np.array(
        [
            _grating_response(atom, patch_px, np.radians(d), b_lam, abs(b_speed))
            for d in dirs_deg
        ]
    )
    speeds = np.arange(-max_speed, max_speed + 1e-9, speed_step)
    speed_resp = np.array(
        [_grating_response(atom, patch_px, b_dir, b_lam, float(v)) for v in speeds]
    )
    return TuningCurve(
        directions_deg=dirs_deg,
        direction_response=dir_resp,
        speeds=speeds,
        speed_response=speed_resp,
        best_direction=b_dir,
        best_wavelength=b_lam,
        best_speed=b_speed,
    )


# ---------------------------------------------------------------------------
# Preference histograms and atom rendering
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class PreferenceHistograms:
    orientation_edges_deg: np.ndarray
    orientation_counts: np.ndarray
    velocity_edges: np.ndarray
    velocity_counts: np.ndarray
    n_qualifying: int

    def to_csv(self) -> str:
        lines = ["histogram,bin_lo,bin_hi,count"]
        for lo, hi, n in zip(
            self.orientation_edges_deg[:-1],
            self.orientation_edges_deg[1:],
            self.orientation_counts,
        ):
            lines.append(f"orientation_deg,{lo!r},{hi!r},{n}")
        for lo, hi, n in zip(
            self.velocity_edges[:-1], self.velocity_edges[1:], self.velocity_counts
        ):
            lines.append(f"velocity_px,{lo!r},{hi!r},{n}")
        return "\n".join(lines) + "\n"


def preference_histograms(
    fits: list[GaborFit],
    threshold: float = 0.3,
    orientation_bins: int = 12,
    velocity_limit: float = 4.0,
    velocity_bin_width: float = 0.5,
) -> PreferenceHistograms:
    """Orientation and preferred-velocity histograms over well-fit atoms.

    Only fits with error below `threshold` qualify. Velocity bins are centered
    so zero falls in the middle of a bin.
    """
    good = [f for f in fits if f.is_fit and f.fit_error < threshold]
    if not good:
        warnings.warn("no atoms passed the Gabor fit threshold; histograms are empty")
    orient_edges = np.linspace(0.0, 180.0, orientation_bins + 1)
    half = velocity_bin_width / 2.0
    vel_edges = np.arange(
        -velocity_limit - half, velocity_limit + half + 1e-9, velocity_bin_width
    )
    orientations = np.array([np.degrees(f.orientation) % 180.0 for f in good])
    velocities = np.array(
        [np.clip(preferred_velocity(f), -velocity_limit, velocity_limit) for f in good]
    )
    o_counts, _ = np.histogram(orientations, bins=orient_edges)
    v_counts, _ = np.histogram(velocities, bins=vel_edges)
    return PreferenceHistograms(
        orientation_edges_deg=orient_edges,
        orientation_counts=o_counts,
        velocity_edges=vel_edges,
        velocity_counts=v_counts,
        n_qualifying=len(good),
    )


def render_bases(dictionary: Dictionary, patch_px: int = 10, columns: int = 20) -> GrayImage:
    """Montage of all atoms, each drawn as previous-frame half above current-frame
    half, per-atom normalized to full contrast. Gray separators between cells."""
    atoms = dictionary.atoms_f64()
    n = atoms.shape[0]
    rows = (n + columns - 1) // columns
    cell_h, cell_w = 2 * patch_px + 1, patch_px + 1
    canvas = np.full((rows * cell_h + 1, columns * cell_w + 1), 0.5)
    for i, atom in enumerate(atoms):
        peak = np.abs(atom).max()
        scale = 0.5 / peak if peak > 0 else 1.0
        block = 0.5 + scale * atom.reshape(2 * patch_px, patch_px)
        r, c = divmod(i, columns)
        canvas[
            r * cell_h + 1 : r * cell_h + 1 + 2 * patch_px,
            c * cell_w + 1 : c * cell_w + 1 + patch_px,
        ] = block
    return GrayImage.from_array(canvas)
