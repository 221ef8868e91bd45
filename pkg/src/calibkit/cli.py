"""Command-line entry points.

Exit codes: 0 success, 1 usage or I/O error, 2 calibration-quality failure
(the report is still written).
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import CalibrationConfig, load_config
from .core import CalibrationError
from .io import CalibrationReport, CloudFileError, ConfigError, load_toml, read_ply, write_report, write_site_log
from .scenario import load_scenario, materialize
from .session import SiteRecord, calibrate_pair, run_session, state_covariance

log = logging.getLogger("calibkit")

EXIT_OK, EXIT_USAGE, EXIT_QUALITY = 0, 1, 2


class UsageError(Exception):
    pass


def _setup_logging(verbose: int) -> None:
    level = os.environ.get("CALIBKIT_LOG", "WARNING").upper()
    if verbose:
        level = "DEBUG" if verbose > 1 else "INFO"
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")


def _load_config(path) -> CalibrationConfig:
    if path is not None and not Path(path).exists():
        raise UsageError(f"config file {path} does not exist")
    return load_config(path)


def cmd_calibrate_pair(ref_file, mov_file, config_file, output_path, figures: bool = True) -> int:
    """Calibrate one sensor pair from two accumulated clouds and write a JSON report."""
    cfg = _load_config(config_file)
    for f in (ref_file, mov_file):
        if not Path(f).exists():
            raise UsageError(f"point cloud file {f} does not exist")
    ref = read_ply(ref_file)
    mov = read_ply(mov_file)
    prior = cfg.prior_for(mov.frame_id)
    pair = (ref.frame_id, mov.frame_id)
    output_path = Path(output_path)
    output_path.parent.mkdir(parents=True, exist_ok=True)

    try:
        result = calibrate_pair(ref, mov, prior, cfg.pipeline)
    except CalibrationError as exc:
        failure = f"{type(exc).__name__}: {exc}"
        log.error("calibration failed: %s", failure)
        record = SiteRecord(1, None, False, failure=failure)
        report = CalibrationReport(
            pair, prior.values, np.zeros((6, 6)), [record.to_row()], cfg.echo(), status="failed", failure=failure
        )
        write_report(report, output_path)
        return EXIT_QUALITY

    record = SiteRecord(
        1,
        None,
        result.converged,
        converged=result.converged,
        num_correspondences=result.num_correspondences,
        residual_mean=result.residual_mean,
        residual_std=result.residual_std,
        params=result.params,
        sigmas=tuple(float(s) for s in result.sigmas),
        failure=None if result.converged else "not converged",
    )
    report = CalibrationReport(
        pair,
        result.params,
        result.covariance,
        [record.to_row()],
        cfg.echo(),
        status="ok" if result.converged else "not_converged",
        converged=result.converged,
        failure=record.failure,
    )
    write_report(report, output_path)
    if figures:
        from .plotting import plot_residual_histogram

        plot_residual_histogram(
            result.residuals, output_path.with_suffix(".residuals.png"), title=f"{pair[0]} to {pair[1]}"
        )
    return EXIT_OK if result.converged else EXIT_QUALITY


def cmd_run_session(scenario_dir, config_file, output_dir, figures: bool = True) -> int:
    """Replay a scenario directory; one CSV log and one JSON report per sensor pair."""
    scenario_dir = Path(scenario_dir)
    if config_file is None and (scenario_dir / "config.toml").exists():
        config_file = scenario_dir / "config.toml"
    cfg = _load_config(config_file)
    try:
        scenario, sensors = load_scenario(scenario_dir)
    except FileNotFoundError as exc:
        raise UsageError(str(exc)) from exc
    if not sensors:
        log.error("scenario %s contains no site data", scenario_dir)
        return EXIT_QUALITY
    reference = cfg.reference or sensors[0]
    if reference not in sensors:
        raise UsageError(f"reference sensor '{reference}' has no data in {scenario_dir}")
    out = Path(output_dir)
    out.mkdir(parents=True, exist_ok=True)

    all_done = True
    for mov in (s for s in sensors if s != reference):
        pair = (reference, mov)
        state, history = run_session(scenario, pair, cfg.session, cfg.prior_for(mov), cfg.pipeline)
        stem = f"{reference}_to_{mov}"
        rows = [r.to_row() for r in history]
        write_site_log(rows, out / f"{stem}.csv")
        last = next((r for r in reversed(history) if r.accepted), None)
        report = CalibrationReport(
            pair,
            state.current.values,
            state_covariance(state),
            rows,
            cfg.echo(),
            status="done" if state.done else "incomplete",
            converged=last is not None,
            done=state.done,
            failure=None if state.done else "precision thresholds not reached",
        )
        write_report(report, out / f"{stem}.json")
        if figures:
            from .plotting import plot_quality_indicators, plot_site_histograms

            plot_quality_indicators(history, out / f"{stem}_quality.png", title=f"{reference} to {mov}")
            plot_site_histograms(history, out / f"{stem}_residuals.png", title=f"{reference} to {mov}")
        log.info("%s: done=%s after %d sites", stem, state.done, state.site_counter)
        all_done &= state.done
    return EXIT_OK if all_done else EXIT_QUALITY


def cmd_simulate(scene_config, output_dir, seed=None) -> int:
    """Materialize a scenario directory from a scene config file or a built-in name."""
    if scene_config == "twelve_sites":
        from .synth import twelve_sites_config

        config = twelve_sites_config()
    else:
        if not Path(scene_config).exists():
            raise UsageError(f"scene config {scene_config} does not exist")
        config = load_toml(scene_config)
    try:
        materialize(config, output_dir, seed)
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"invalid scene config: {exc}") from exc
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="calibration config (TOML)")
    common.add_argument("--seed", type=int, default=None, help="seed for every random draw")
    common.add_argument("--output", required=True, help="output file or directory")
    common.add_argument("--verbose", "-v", action="count", default=0)
    common.add_argument("--no-figures", dest="figures", action="store_false", help="skip PNG figures")

    parser = argparse.ArgumentParser(
        prog="calibkit",
        description="Target-free extrinsic calibration of point-cloud sensors.",
        epilog="exit codes: 0 success, 1 usage or I/O error, 2 calibration-quality failure",
    )
    parser.add_argument("--version", action="version", version=f"calibkit {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("calibrate-pair", parents=[common], help="calibrate one pair from two PLY files")
    p.add_argument("reference", help="reference sensor cloud (PLY)")
    p.add_argument("movable", help="cloud of the sensor to calibrate (PLY)")

    p = sub.add_parser("run-session", parents=[common], help="replay a scenario directory")
    p.add_argument("scenario_dir")

    p = sub.add_parser("simulate", parents=[common], help="write a synthetic scenario directory")
    p.add_argument("scene_config", help="scene config (TOML) or the built-in name 'twelve_sites'")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    _setup_logging(args.verbose)
    try:
        if args.command == "calibrate-pair":
            return cmd_calibrate_pair(args.reference, args.movable, args.config, args.output, args.figures)
        if args.command == "run-session":
            return cmd_run_session(args.scenario_dir, args.config, args.output, args.figures)
        return cmd_simulate(args.scene_config, args.output, args.seed)
    except (UsageError, ConfigError, CloudFileError, OSError) as exc:
        print(f"calibkit: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
