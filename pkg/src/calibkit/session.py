"""Online procedure: motion-state detection, delayed trigger, accumulation,
per-site calibration with a precision gate, and the global stop criterion."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Iterable, Iterator, Mapping, Optional, Sequence, Union

import numpy as np

from .core import (
    AdjustmentResult,
    CalibrationError,
    ExtrinsicParams,
    ParamPrior,
    PointCloud,
)
from .features import NeighborhoodConfig, estimate_normals_planarity
from .filters import FilterConfig, apply_filters
from .matching import MatchConfig, run_icp

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TwistSample:
    timestamp: float
    linear_speed: float
    angular_speed: float

    def __post_init__(self):
        if self.linear_speed < 0 or self.angular_speed < 0:
            raise ValueError("speeds must be non-negative")


@dataclass(frozen=True)
class SessionConfig:
    static_linear_threshold: float = 0.05
    static_angular_threshold: float = 0.02
    trigger_delay: float = 2.0
    accumulation_duration: float = 2.0
    stop_sigma_angles: float = 0.002
    stop_sigma_translation: float = 0.01
    update_gate_factor: float = 1.0

    def __post_init__(self):
        for name, value in vars(self).items():
            if not value > 0:
                raise ValueError(f"{name} must be positive")


@dataclass(frozen=True)
class PipelineConfig:
    neighborhood: NeighborhoodConfig = NeighborhoodConfig()
    filters: FilterConfig = FilterConfig()
    match: MatchConfig = MatchConfig()


@dataclass(frozen=True)
class BecameStatic:
    timestamp: float


@dataclass(frozen=True)
class BecameMoving:
    timestamp: float


def motion_state(samples: Iterable[TwistSample], cfg: SessionConfig = SessionConfig()) -> Iterator:
    """Yield BecameStatic/BecameMoving events from a twist stream.

    The robot starts in the moving state. It becomes static once both speeds
    drop below their thresholds and moving again only when either speed
    exceeds twice its threshold.
    """
    static = False
    last_t = -math.inf
    for s in samples:
        if not s.timestamp > last_t:
            raise ValueError(f"twist timestamps must increase strictly (got {s.timestamp} after {last_t})")
        last_t = s.timestamp
        if static:
            if (
                s.linear_speed > 2.0 * cfg.static_linear_threshold
                or s.angular_speed > 2.0 * cfg.static_angular_threshold
            ):
                static = False
                yield BecameMoving(s.timestamp)
        elif s.linear_speed < cfg.static_linear_threshold and s.angular_speed < cfg.static_angular_threshold:
            static = True
            yield BecameStatic(s.timestamp)


@dataclass(frozen=True)
class Trigger:
    """One completed accumulation window."""

    static_at: float
    start: float
    end: float


def accumulation_windows(samples: Sequence[TwistSample], cfg: SessionConfig = SessionConfig()) -> list[Trigger]:
    """Accumulation windows that completed while the robot stayed static.

    A window opens ``trigger_delay`` after the robot became static and lasts
    ``accumulation_duration``; it is dropped if the robot moves before it
    closes or the stream ends first.
    """
    samples = list(samples)
    if not samples:
        return []
    stream_end = samples[-1].timestamp
    triggers = []
    pending: Optional[float] = None
    for ev in motion_state(samples, cfg):
        if isinstance(ev, BecameStatic):
            pending = ev.timestamp
            continue
        if pending is not None:
            end = pending + cfg.trigger_delay + cfg.accumulation_duration
            if ev.timestamp >= end:
                triggers.append(Trigger(pending, pending + cfg.trigger_delay, end))
            pending = None
    if pending is not None:
        end = pending + cfg.trigger_delay + cfg.accumulation_duration
        if stream_end >= end:
            triggers.append(Trigger(pending, pending + cfg.trigger_delay, end))
    return triggers


CloudSource = Union[PointCloud, Sequence[tuple]]


def accumulate(source: CloudSource, start: float = -math.inf, end: float = math.inf) -> PointCloud:
    """Concatenate the timestamped cloud messages falling in ``[start, end]``.

    A bare :class:`PointCloud` is taken as already accumulated.
    """
    if isinstance(source, PointCloud):
        return source
    clouds = [c for t, c in source if start <= t <= end]
    if not clouds:
        return PointCloud(np.zeros((0, 3)), frame_id="empty")
    first = clouds[0]

    def cat(attr):
        values = [getattr(c, attr) for c in clouds]
        return None if any(v is None for v in values) else np.concatenate(values)

    return PointCloud(
        np.concatenate([c.positions for c in clouds]),
        frame_id=first.frame_id,
        intensity=cat("intensity"),
        normals=cat("normals"),
        planarity=cat("planarity"),
        acquired_at_site=first.acquired_at_site,
    )


@dataclass(frozen=True)
class Scenario:
    """A twist stream plus the sensor data of each calibration site.

    The k-th completed accumulation window consumes ``sites[k]``, a mapping
    from sensor id to a cloud (or timestamped cloud messages).
    """

    twist: tuple
    sites: tuple = ()

    @classmethod
    def from_segments(cls, segments: Sequence[tuple]) -> "Scenario":
        """Build from ordered (twist segment, site clouds or None) pairs."""
        twist, sites = [], []
        for samples, clouds in segments:
            twist.extend(samples)
            if clouds:
                sites.append(clouds)
        return cls(tuple(twist), tuple(sites))


@dataclass(frozen=True)
class SiteRecord:
    site: int
    timestamp: Optional[float]
    accepted: bool
    converged: bool = False
    num_correspondences: int = 0
    residual_mean: float = math.nan
    residual_std: float = math.nan
    params: Optional[ExtrinsicParams] = None
    sigmas: Optional[tuple] = None
    failure: Optional[str] = None
    residuals: np.ndarray = field(default=None, repr=False, compare=False)
    covariance: np.ndarray = field(default=None, repr=False, compare=False)

    def to_row(self) -> dict:
        from .io import params_to_dict, sigmas_to_dict

        row = {
            "site": self.site,
            "timestamp": self.timestamp,
            "n_correspondences": self.num_correspondences,
            "residual_mean": self.residual_mean,
            "residual_std": self.residual_std,
            "accepted": int(self.accepted),
            "converged": int(self.converged),
            "failure": self.failure,
        }
        if self.params is not None:
            row.update(params_to_dict(self.params))
        if self.sigmas is not None:
            row.update(sigmas_to_dict(self.sigmas))
        return row


@dataclass(frozen=True)
class CalibrationState:
    pair_id: tuple
    current: ParamPrior
    site_counter: int = 0
    history: tuple = ()
    done: bool = False

    @classmethod
    def initial(cls, pair_id: tuple, prior: ParamPrior, cfg: SessionConfig = SessionConfig()) -> "CalibrationState":
        return cls(tuple(pair_id), prior, 0, (), precision_reached(prior, cfg))


def state_covariance(state: CalibrationState) -> np.ndarray:
    """Covariance of the current estimate: that of the last accepted site, else the prior's diagonal."""
    for rec in reversed(state.history):
        if rec.accepted and rec.covariance is not None:
            return rec.covariance
    sig = np.where(state.current.mask_array, state.current.sigma_array, 0.0)
    return np.diag(sig**2)


def precision_reached(prior: ParamPrior, cfg: SessionConfig) -> bool:
    sig = prior.sigma_array
    limits = np.array([cfg.stop_sigma_angles] * 3 + [cfg.stop_sigma_translation] * 3)
    est = prior.mask_array
    if not est.any():
        return True
    return bool(np.all(sig[est] < limits[est]))


def calibrate_pair(
    ref_cloud: PointCloud,
    mov_cloud: PointCloud,
    prior: ParamPrior,
    pipeline: PipelineConfig = PipelineConfig(),
    initial: Optional[ExtrinsicParams] = None,
) -> AdjustmentResult:
    """One full calibration: features, filters, then ICP."""
    ref = apply_filters(estimate_normals_planarity(ref_cloud, pipeline.neighborhood), pipeline.filters)
    mov = apply_filters(estimate_normals_planarity(mov_cloud, pipeline.neighborhood), pipeline.filters)
    return run_icp(ref, mov, initial or prior.values, prior, pipeline.match)


def run_site(
    state: CalibrationState,
    ref_cloud: PointCloud,
    mov_cloud: PointCloud,
    pipeline: PipelineConfig = PipelineConfig(),
    cfg: SessionConfig = SessionConfig(),
    timestamp: Optional[float] = None,
) -> CalibrationState:
    """Calibrate at one site and apply the precision gate.

    Pipeline failures are recorded in the history and leave the estimate
    untouched.
    """
    if state.done:
        raise ValueError("calibration already complete; run_site needs state.done == False")
    site = state.site_counter + 1
    current = state.current
    try:
        result = calibrate_pair(ref_cloud, mov_cloud, current, pipeline)
    except CalibrationError as exc:
        log.info("site %d (%s): %s", site, state.pair_id[1], exc)
        record = SiteRecord(site, timestamp, False, failure=f"{type(exc).__name__}: {exc}")
        return replace(state, site_counter=site, history=state.history + (record,))

    est = current.mask_array
    new_sigma = result.sigmas
    old_sigma = current.sigma_array
    gate_ok = bool(np.all(new_sigma[est] <= cfg.update_gate_factor * old_sigma[est]))
    accepted = result.converged and gate_ok
    failure = None
    if not result.converged:
        failure = "not converged"
    elif not gate_ok:
        failure = "precision gate"
    record = SiteRecord(
        site,
        timestamp,
        accepted,
        converged=result.converged,
        num_correspondences=result.num_correspondences,
        residual_mean=result.residual_mean,
        residual_std=result.residual_std,
        params=result.params,
        sigmas=tuple(float(s) for s in new_sigma),
        failure=failure,
        residuals=result.residuals,
        covariance=result.covariance,
    )
    if accepted:
        sigmas = np.where(est, new_sigma, old_sigma)
        current = ParamPrior(result.params, tuple(float(s) for s in sigmas), current.estimate_mask)
    log.info(
        "site %d (%s): n=%d accepted=%s sigmas=%s",
        site,
        state.pair_id[1],
        result.num_correspondences,
        accepted,
        np.array2string(new_sigma, precision=3),
    )
    return CalibrationState(
        state.pair_id, current, site, state.history + (record,), precision_reached(current, cfg)
    )


def run_session(
    scenario: Scenario,
    pair_id: tuple,
    cfg: SessionConfig = SessionConfig(),
    initial_prior: Optional[ParamPrior] = None,
    pipeline: PipelineConfig = PipelineConfig(),
) -> tuple[CalibrationState, list[SiteRecord]]:
    """Replay a scenario for one (reference, movable) sensor pair.

    Returns the final state and the per-site report rows; stops at the first
    site after which the precision thresholds are met.
    """
    ref_id, mov_id = pair_id
    state = CalibrationState.initial(pair_id, initial_prior or ParamPrior.unconstrained(), cfg)
    triggers = accumulation_windows(scenario.twist, cfg)
    for k, trig in enumerate(triggers):
        if state.done:
            break
        if k >= len(scenario.sites):
            log.warning("trigger at t=%.2f has no site data", trig.end)
            break
        site = scenario.sites[k]
        if ref_id not in site or mov_id not in site:
            record = SiteRecord(state.site_counter + 1, trig.end, False, failure="sensor data missing")
            state = replace(state, site_counter=state.site_counter + 1, history=state.history + (record,))
            continue
        ref = accumulate(site[ref_id], trig.start, trig.end)
        mov = accumulate(site[mov_id], trig.start, trig.end)
        state = run_site(state, ref, mov, pipeline, cfg, timestamp=trig.end)
    return state, list(state.history)


def run_sessions(
    scenario: Scenario,
    reference: str,
    movables: Sequence[str],
    cfg: SessionConfig = SessionConfig(),
    priors: Optional[Mapping[str, ParamPrior]] = None,
    pipeline: PipelineConfig = PipelineConfig(),
) -> dict:
    """Independent sessions for every movable sensor against one reference."""
    priors = priors or {}
    return {
        mov: run_session(scenario, (reference, mov), cfg, priors.get(mov), pipeline)
        for mov in movables
    }
