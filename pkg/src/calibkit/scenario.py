"""Scenario directories: writing synthetic ones and loading them for replay.

Layout::

    <dir>/twist.csv              timestamp,linear,angular
    <dir>/site_<N>/<sensor>.ply  one accumulated cloud per sensor and site
    <dir>/ground_truth.toml      optional true parameters per pair
    <dir>/config.toml            optional calibration config (priors etc.)
"""

from __future__ import annotations

import math
import re
from pathlib import Path
from typing import Optional

import numpy as np

from .core import ExtrinsicParams
from .io import (
    ConfigError,
    dump_toml,
    params_to_dict,
    read_ply,
    read_twist_csv,
    write_ground_truth,
    write_ply,
    write_twist_csv,
)
from .session import Scenario, TwistSample
from .synth import PlaneSpec, SceneSpec, generate_scene, perturb, render_view

SITE_DIR = re.compile(r"^site_(\d+)$")


def _pose(values) -> ExtrinsicParams:
    if len(values) != 6:
        raise ConfigError("sensor pose needs 6 values (3 angles in degrees, 3 translations in meters)")
    return ExtrinsicParams.from_degrees(*values)


def simulate_twist(n_sites: int, twist_cfg: dict, rng: np.random.Generator) -> list[TwistSample]:
    """A drive with ``n_sites`` full stops; every third stop is preceded by a brief halt.

    Brief halts are shorter than delay plus accumulation, so they never
    trigger a calibration.
    """
    rate = float(twist_cfg.get("rate", 10.0))
    speed = float(twist_cfg.get("drive_speed", 5.0))
    yaw_rate = float(twist_cfg.get("drive_yaw_rate", 0.05))
    drive = float(twist_cfg.get("drive_duration", 12.0))
    stop = float(twist_cfg.get("stop_duration", 6.0))
    halt = float(twist_cfg.get("brief_halt_duration", 1.0))
    ramp = float(twist_cfg.get("ramp_duration", 2.0))
    jitter = float(twist_cfg.get("static_jitter", 0.005))

    profile = []  # (duration, linear, angular) pieces, ramps expanded below

    def move(duration):
        profile.append(("ramp_up", ramp))
        profile.append(("drive", duration))
        profile.append(("ramp_down", ramp))

    for k in range(n_sites):
        move(drive)
        if k % 3 == 2:
            profile.append(("stop", halt))
            move(drive / 3.0)
        profile.append(("stop", stop))

    samples = []
    t = 0.0
    dt = 1.0 / rate
    step = 0
    for kind, duration in profile:
        n = max(1, int(round(duration * rate)))
        for i in range(n):
            frac = (i + 0.5) / n
            if kind == "drive":
                lin, ang = speed, yaw_rate
            elif kind == "ramp_up":
                lin, ang = speed * frac, yaw_rate * frac
            elif kind == "ramp_down":
                lin, ang = speed * (1.0 - frac), yaw_rate * (1.0 - frac)
            else:
                lin, ang = 0.0, 0.0
            lin = abs(lin + rng.normal(0.0, jitter))
            ang = abs(ang + rng.normal(0.0, jitter * 0.1))
            samples.append(TwistSample(round(step * dt, 9), lin, ang))
            step += 1
    return samples


def materialize(config: dict, out_dir, seed: Optional[int] = None) -> dict:
    """Write a scenario directory from a scene config; returns the ground truth."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    seed = int(config.get("seed", 0) if seed is None else seed)
    rng = np.random.default_rng(seed)
    try:
        reference = config["reference"]
        sensors = config["sensors"]
        sites = config["sites"]
    except KeyError as exc:
        raise ConfigError(f"scene config lacks {exc}") from exc
    if reference not in sensors:
        raise ConfigError(f"reference sensor '{reference}' not among sensors")
    if not sites:
        raise ConfigError("scene config has no sites")

    poses = {name: _pose(s.get("pose", [0.0] * 6)) for name, s in sensors.items()}
    if poses[reference] != ExtrinsicParams():
        raise ConfigError("the reference sensor pose must be the identity")
    truth = {(reference, name): pose for name, pose in poses.items() if name != reference}

    for k, site in enumerate(sites, start=1):
        site_dir = out / f"site_{k:02d}"
        site_dir.mkdir(exist_ok=True)
        for j, (name, sensor) in enumerate(sensors.items()):
            scale = float(sensor.get("density_scale", 1.0))
            planes = [
                PlaneSpec(p["center"], p["normal"], p["extent"], p["density"] * scale) for p in site["planes"]
            ]
            spec = SceneSpec(planes, site.get("clutter_fraction", 0.0), seed=int(rng.integers(2**31)))
            world = generate_scene(spec)
            view = render_view(
                world,
                poses[name],
                float(sensor.get("noise", 0.0)),
                float(sensor.get("max_range", math.inf)),
                seed=int(rng.integers(2**31)),
                frame_id=name,
            )
            write_ply(view, site_dir / f"{name}.ply")

    write_twist_csv(simulate_twist(len(sites), config.get("twist", {}), rng), out / "twist.csv")
    write_ground_truth(truth, out / "ground_truth.toml")

    calib = dict(config.get("calibration", {}))
    prior_cfg = config.get("prior", {})
    if prior_cfg:
        ang = float(prior_cfg.get("angle_perturbation_deg", 0.0))
        tr = float(prior_cfg.get("translation_perturbation", 0.0))
        priors = {}
        for (_, name), g in truth.items():
            approx = perturb(g, math.radians(ang), tr, seed=int(rng.integers(2**31)))
            entry = params_to_dict(approx)
            for key in ("sigma_angle_deg", "sigma_translation"):
                if key in prior_cfg:
                    entry[key] = prior_cfg[key]
            priors[name] = entry
        calib["prior"] = priors
    calib.setdefault("session", {})["reference"] = reference
    dump_toml(calib, out / "config.toml")
    return truth


def load_scenario(scenario_dir) -> tuple[Scenario, list[str]]:
    """Read a scenario directory; returns the scenario and the sorted sensor ids."""
    root = Path(scenario_dir)
    if not root.is_dir():
        raise FileNotFoundError(f"scenario directory {root} does not exist")
    twist_path = root / "twist.csv"
    if not twist_path.exists():
        raise FileNotFoundError(f"{twist_path} missing")
    site_dirs = sorted(
        (int(m.group(1)), p) for p in root.iterdir() if p.is_dir() and (m := SITE_DIR.match(p.name))
    )
    sites = []
    sensors: set[str] = set()
    for index, path in site_dirs:
        clouds = {}
        for ply in sorted(path.glob("*.ply")):
            cloud = read_ply(ply, frame_id=ply.stem)
            clouds[ply.stem] = cloud.with_attributes(acquired_at_site=index)
        sensors.update(clouds)
        sites.append(clouds)
    return Scenario(tuple(read_twist_csv(twist_path)), tuple(sites)), sorted(sensors)
