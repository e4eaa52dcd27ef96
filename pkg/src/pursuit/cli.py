"""Command-line entry point: training, evaluation, and analysis subcommands.

Every subcommand takes `--config` (INI file, default from $PURSUIT_CONFIG) plus
repeatable `--set section.key=value` overrides; flags win over the file. All
figure data is emitted as CSV (and PGM for atom renderings); exit status is 2
for configuration errors and 1 for runtime failures.
"""

from __future__ import annotations

import argparse
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import analysis
from .config import (
    Config,
    build_corpora,
    config_hash,
    load_config,
    parse_overrides,
    smoke_config,
)
from .environment import ConfigError
from .imagery import save_pgm
from .policy import NumericError
from .trainer import Checkpoint, CheckpointError, TrainerError, load_checkpoint, train

_CONFIG_ENV_VAR = "PURSUIT_CONFIG"


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument(
        "--config",
        default=os.environ.get(_CONFIG_ENV_VAR),
        help=f"INI config file (default: ${_CONFIG_ENV_VAR}); any key can also be "
        "set with --set",
    )
    p.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="SECTION.KEY=VALUE",
        help="override one config value, e.g. --set trainer.seed=7 "
        "(repeatable; wins over --config)",
    )
    p.add_argument(
        "--out",
        default="out",
        help="output directory, created if absent (artifacts: CSV/PGM/checkpoints)",
    )
    p.add_argument(
        "--workers",
        type=int,
        default=os.cpu_count() or 1,
        help="worker fan-out for analyses (default: available parallelism)",
    )


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pursuit",
        description="Joint development of motion coding and smooth-pursuit control.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run the perception/action learning loop")
    _add_common(p)
    p.add_argument("--seed", type=int, help="shorthand for --set trainer.seed=N")
    p.add_argument("--frames", type=int, help="shorthand for --set trainer.total_frames=N")
    p.add_argument("--resume", help="checkpoint file to continue from")

    p = sub.add_parser("eval-grid", help="slip-grid MSE of checkpointed policies")
    _add_common(p)
    p.add_argument("checkpoints", nargs="+", help="one checkpoint per trial")
    p.add_argument(
        "--ideal-policy",
        action="store_true",
        help="evaluate the slip-zeroing oracle instead of the checkpoints",
    )

    p = sub.add_parser("mse-curve", help="MSE over an ordered series of checkpoints")
    _add_common(p)
    p.add_argument(
        "--trial",
        action="append",
        required=True,
        metavar="CKPT[,CKPT...]",
        help="comma-separated ordered checkpoints of one trial (repeatable)",
    )

    p = sub.add_parser("fit-gabors", help="fit the two-frame Gabor model to every atom")
    _add_common(p)
    p.add_argument("checkpoint")

    p = sub.add_parser("tuning", help="direction/velocity tuning curves of atoms")
    _add_common(p)
    p.add_argument("checkpoint")
    p.add_argument("--atoms", default="", help="comma-separated atom indices (default all)")

    p = sub.add_parser("histograms", help="orientation/velocity preference histograms")
    _add_common(p)
    p.add_argument("checkpoint")

    p = sub.add_parser("render-bases", help="write the dictionary as a PGM montage")
    _add_common(p)
    p.add_argument("checkpoint")

    p = sub.add_parser("smoke", help="small end-to-end profile with invariant checks")
    _add_common(p)
    p.add_argument("--frames", type=int, default=3000)
    p.add_argument("--seed", type=int, default=1)
    return parser


def _config_from(args: argparse.Namespace, base: Config | None = None) -> Config:
    overrides = list(parse_overrides(args.overrides))
    if getattr(args, "seed", None) is not None:
        overrides.append(("trainer", "seed", str(args.seed)))
    if getattr(args, "frames", None) is not None:
        overrides.append(("trainer", "total_frames", str(args.frames)))
    if base is not None:
        from .config import _apply  # evaluated against the provided base profile

        cfg = base
        for section, key, value in overrides:
            cfg = _apply(cfg, section, key, value)
        return cfg
    return load_config(args.config, overrides)


def _grid_kwargs(cfg: Config, workers: int) -> dict:
    return dict(
        pairs_per_condition=cfg.analysis.pairs_per_condition,
        eval_seed=cfg.analysis.eval_seed,
        kmax=cfg.sparsecode.kmax,
        tol=cfg.sparsecode.tol,
        divisive_norm=cfg.features.divisive_normalization,
        fovea_px=cfg.environment.fovea_px,
        velocity_bound=cfg.environment.velocity_bound,
        accel_bound=cfg.environment.accel_bound,
        workers=workers,
    )


def _load_trials(paths) -> list[Checkpoint]:
    return [load_checkpoint(p) for p in paths]


def cmd_train(args) -> int:
    cfg = _config_from(args)
    result = train(cfg, args.out, resume_from=args.resume)
    grid_note = f"max energy violation {result.max_energy_violation:.3e}"
    print(
        f"trained {result.frames_run} frames -> {result.final_path} ({grid_note})"
    )
    return 0


def cmd_eval_grid(args) -> int:
    cfg = _config_from(args)
    _, holdout = build_corpora(cfg)
    if args.ideal_policy:
        trials = [(analysis.IdealPolicy(cfg.environment.accel_bound), None)]
    else:
        trials = [(c.policy, c.dictionary) for c in _load_trials(args.checkpoints)]
    res = analysis.eval_slip_grid(trials, holdout, **_grid_kwargs(cfg, args.workers))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "slip_grid.csv").write_text(res.to_csv())
    print(f"slip-grid MSE {res.mse!r} over {len(res.conditions)} conditions -> {out/'slip_grid.csv'}")
    return 0


def cmd_mse_curve(args) -> int:
    cfg = _config_from(args)
    _, holdout = build_corpora(cfg)
    series = []
    for trial in args.trial:
        ckpts = _load_trials(trial.split(","))
        series.append([(c.frame_index, c.policy, c.dictionary) for c in ckpts])
    rows = analysis.mse_training_curve(series, holdout, **_grid_kwargs(cfg, args.workers))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "mse_curve.csv").write_text(analysis.mse_curve_csv(rows))
    final = rows[-1]
    print(f"final MSE {final['mse']!r} (std {final['std']!r}) -> {out/'mse_curve.csv'}")
    return 0


def cmd_fit_gabors(args) -> int:
    cfg = _config_from(args)
    ckpt = load_checkpoint(args.checkpoint)
    fits = analysis.fit_all_atoms(ckpt.dictionary, workers=args.workers)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    lines = [
        "atom,fit_error,orientation_deg,wavelength_px,center_x,center_y,"
        "sigma_along,sigma_across,phase_prev,phase_curr,amplitude,preferred_velocity"
    ]
    for i, f in enumerate(fits):
        if f.is_fit:
            lines.append(
                f"{i},{f.fit_error!r},{np.degrees(f.orientation)!r},{f.wavelength!r},"
                f"{f.center_x!r},{f.center_y!r},{f.sigma_along!r},{f.sigma_across!r},"
                f"{f.phase_prev!r},{f.phase_curr!r},{f.amplitude!r},"
                f"{analysis.preferred_velocity(f)!r}"
            )
        else:
            lines.append(f"{i},inf,,,,,,,,,,")
    (out / "gabor_fits.csv").write_text("\n".join(lines) + "\n")
    errors = np.array([f.fit_error for f in fits if f.is_fit])
    median = float(np.median(errors)) if errors.size else float("nan")
    print(f"fitted {errors.size}/{len(fits)} atoms, median fit error {median!r} -> {out/'gabor_fits.csv'}")
    return 0


def cmd_tuning(args) -> int:
    cfg = _config_from(args)
    ckpt = load_checkpoint(args.checkpoint)
    atoms = ckpt.dictionary.atoms_f64()
    indices = (
        [int(i) for i in args.atoms.split(",") if i]
        if args.atoms
        else list(range(atoms.shape[0]))
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    n_done = 0
    for i in indices:
        curve = analysis.tuning_curves(atoms[i])
        if curve is None:
            continue
        (out / f"tuning_{i:04d}.csv").write_text(curve.to_csv())
        n_done += 1
    print(f"wrote tuning curves for {n_done} atoms -> {out}")
    return 0


def cmd_histograms(args) -> int:
    cfg = _config_from(args)
    ckpt = load_checkpoint(args.checkpoint)
    fits = analysis.fit_all_atoms(ckpt.dictionary, workers=args.workers)
    hist = analysis.preference_histograms(
        fits, threshold=cfg.analysis.gabor_fit_threshold
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "histograms.csv").write_text(hist.to_csv())
    print(f"{hist.n_qualifying}/{len(fits)} atoms below threshold -> {out/'histograms.csv'}")
    return 0


def cmd_render_bases(args) -> int:
    _config_from(args)  # validates overrides even though rendering needs none
    ckpt = load_checkpoint(args.checkpoint)
    img = analysis.render_bases(ckpt.dictionary)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "bases.pgm").write_bytes(save_pgm(img))
    print(f"rendered {ckpt.dictionary.n_atoms} atoms -> {out/'bases.pgm'}")
    return 0


def cmd_smoke(args) -> int:
    t0 = time.time()
    cfg = _config_from(args, base=smoke_config(seed=args.seed, frames=args.frames))
    out = Path(args.out)
    result = train(cfg, out / "train")
    assert result.max_energy_violation < 1e-9, "energy identity violated"

    telemetry = (out / "train" / "telemetry.csv").read_text().splitlines()[1:]
    rewards = np.array([float(row.split(",")[2]) for row in telemetry])
    assert np.all((-1.0 <= rewards) & (rewards <= 0.0)), "reward outside [-1, 0]"

    _, holdout = build_corpora(cfg)
    kwargs = _grid_kwargs(cfg, args.workers)
    kwargs["pairs_per_condition"] = 10
    res = analysis.eval_slip_grid(
        [(result.final.policy, result.final.dictionary)], holdout, **kwargs
    )
    ideal = analysis.eval_slip_grid(
        [(analysis.IdealPolicy(cfg.environment.accel_bound), None)], holdout, **kwargs
    )
    assert ideal.mse == 0.0, "ideal policy must score exactly zero"

    reloaded = load_checkpoint(result.final_path)
    assert reloaded == result.final, "checkpoint round-trip failed"

    elapsed = time.time() - t0
    print(
        f"smoke ok: {cfg.trainer.total_frames} frames, grid MSE {res.mse:.3f}, "
        f"ideal MSE {ideal.mse}, config {config_hash(cfg)[:12]}, {elapsed:.1f}s"
    )
    return 0


_COMMANDS = {
    "train": cmd_train,
    "eval-grid": cmd_eval_grid,
    "mse-curve": cmd_mse_curve,
    "fit-gabors": cmd_fit_gabors,
    "tuning": cmd_tuning,
    "histograms": cmd_histograms,
    "render-bases": cmd_render_bases,
    "smoke": cmd_smoke,
}


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except (TrainerError, CheckpointError, NumericError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
