"""Calibration config (TOML). Angles are given in degrees in the file.

Sections: ``[features]``, ``[filter]``, ``[match]``, ``[session]`` and
``[prior]``. ``[prior]`` holds defaults for every movable sensor and may
contain per-sensor sub-tables ``[prior.<sensor_id>]`` overriding them.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

from .core import PARAM_NAMES, ExtrinsicParams, ParamPrior
from .features import NeighborhoodConfig
from .filters import FilterConfig
from .io import ConfigError, load_toml
from .matching import MatchConfig
from .session import PipelineConfig, SessionConfig

# file key -> (dataclass field, converts degrees)
_FEATURES = {"k_neighbors": ("k_neighbors", False), "max_radius": ("max_radius", False)}
_FILTER = {
    "min_range": ("min_range", False),
    "max_range": ("max_range", False),
    "min_intensity": ("min_intensity", False),
    "voxel_size": ("voxel_size", False),
    "min_planarity": ("min_planarity", False),
}
_MATCH = {
    "num_selected": ("num_selected", False),
    "max_distance_factor": ("max_distance_factor", False),
    "max_normal_angle_deg": ("max_normal_angle", True),
    "max_iterations": ("max_iterations", False),
    "convergence_delta_angle_deg": ("convergence_delta_angle", True),
    "convergence_delta_translation": ("convergence_delta_translation", False),
    "min_correspondences": ("min_correspondences", False),
}
_SESSION = {
    "static_linear_threshold": ("static_linear_threshold", False),
    "static_angular_threshold_deg": ("static_angular_threshold", True),
    "trigger_delay": ("trigger_delay", False),
    "accumulation_duration": ("accumulation_duration", False),
    "stop_sigma_angles_deg": ("stop_sigma_angles", True),
    "stop_sigma_translation": ("stop_sigma_translation", False),
    "update_gate_factor": ("update_gate_factor", False),
}
_PRIOR_KEYS = (
    {f"{n}_deg" for n in PARAM_NAMES[:3]}
    | set(PARAM_NAMES[3:])
    | {f"sigma_{n}_deg" for n in PARAM_NAMES[:3]}
    | {f"sigma_{n}" for n in PARAM_NAMES[3:]}
    | {"sigma_angle_deg", "sigma_translation", "fixed"}
)


def _build(cls, section: dict, table: dict, name: str):
    unknown = set(section) - set(table)
    if unknown:
        raise ConfigError(f"[{name}] unknown keys: {', '.join(sorted(unknown))}")
    kwargs = {}
    for key, value in section.items():
        attr, degrees = table[key]
        kwargs[attr] = math.radians(value) if degrees else value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{name}] {exc}") from exc


def _echo(obj, table: dict) -> dict:
    out = {}
    for key, (attr, degrees) in table.items():
        value = getattr(obj, attr)
        if value is None:
            continue
        out[key] = math.degrees(value) if degrees else value
    return out


def prior_from_dict(d: dict) -> ParamPrior:
    unknown = set(d) - _PRIOR_KEYS
    if unknown:
        raise ConfigError(f"[prior] unknown keys: {', '.join(sorted(unknown))}")
    values = []
    sigmas = []
    for i, name in enumerate(PARAM_NAMES):
        angle = i < 3
        key = f"{name}_deg" if angle else name
        v = float(d.get(key, 0.0))
        values.append(math.radians(v) if angle else v)
        skey = f"sigma_{key}"
        s = d.get(skey, d.get("sigma_angle_deg" if angle else "sigma_translation"))
        if s is None or s == "inf":
            sigmas.append(math.inf)
        else:
            sigmas.append(math.radians(float(s)) if angle else float(s))
    fixed = d.get("fixed", [])
    bad = set(fixed) - set(PARAM_NAMES)
    if bad:
        raise ConfigError(f"[prior] fixed lists unknown parameters: {', '.join(sorted(bad))}")
    mask = tuple(name not in fixed for name in PARAM_NAMES)
    try:
        return ParamPrior(ExtrinsicParams(*values), tuple(sigmas), mask)
    except ValueError as exc:
        raise ConfigError(f"[prior] {exc}") from exc


@dataclass
class CalibrationConfig:
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)
    session: SessionConfig = field(default_factory=SessionConfig)
    reference: Optional[str] = None
    prior_default: dict = field(default_factory=dict)
    prior_overrides: dict = field(default_factory=dict)

    def prior_for(self, sensor_id: Optional[str] = None) -> ParamPrior:
        d = dict(self.prior_default)
        if sensor_id is not None:
            d.update(self.prior_overrides.get(sensor_id, {}))
        return prior_from_dict(d)

    def echo(self) -> dict:
        """The effective configuration in file units, for reports."""
        prior = dict(self.prior_default)
        prior.update({k: dict(v) for k, v in self.prior_overrides.items()})
        session = _echo(self.session, _SESSION)
        if self.reference is not None:
            session["reference"] = self.reference
        return {
            "features": _echo(self.pipeline.neighborhood, _FEATURES),
            "filter": _echo(self.pipeline.filters, _FILTER),
            "match": _echo(self.pipeline.match, _MATCH),
            "session": session,
            "prior": prior,
        }


def config_from_dict(doc: dict) -> CalibrationConfig:
    unknown = set(doc) - {"features", "filter", "match", "session", "prior"}
    if unknown:
        raise ConfigError(f"unknown config sections: {', '.join(sorted(unknown))}")
    session_doc = dict(doc.get("session", {}))
    reference = session_doc.pop("reference", None)
    prior_doc = doc.get("prior", {})
    default = {k: v for k, v in prior_doc.items() if not isinstance(v, dict)}
    overrides = {k: v for k, v in prior_doc.items() if isinstance(v, dict)}
    cfg = CalibrationConfig(
        pipeline=PipelineConfig(
            neighborhood=_build(NeighborhoodConfig, doc.get("features", {}), _FEATURES, "features"),
            filters=_build(FilterConfig, doc.get("filter", {}), _FILTER, "filter"),
            match=_build(MatchConfig, doc.get("match", {}), _MATCH, "match"),
        ),
        session=_build(SessionConfig, session_doc, _SESSION, "session"),
        reference=reference,
        prior_default=default,
        prior_overrides=overrides,
    )
    # validate every prior now so errors surface before any processing
    cfg.prior_for()
    for sensor in overrides:
        cfg.prior_for(sensor)
    return cfg


def load_config(path=None) -> CalibrationConfig:
    if path is None:
        return CalibrationConfig()
    return config_from_dict(load_toml(path))
