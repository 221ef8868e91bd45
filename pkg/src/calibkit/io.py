"""File formats: PLY clouds, TOML configs, JSON reports and CSV site logs."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

import numpy as np
import plyfile
import tomli
import tomli_w

from . import __version__
from .core import PARAM_NAMES, ROTATION_CONVENTION, ExtrinsicParams, PointCloud


class CloudFileError(ValueError):
    """A point-cloud file could not be parsed; the message names the line or byte offset."""


class ConfigError(ValueError):
    pass


_OPTIONAL = (("intensity", ("intensity",)), ("normals", ("nx", "ny", "nz")), ("planarity", ("planarity",)))


def read_ply(path, frame_id: Optional[str] = None) -> PointCloud:
    """Read x,y,z and the optional intensity, nx/ny/nz and planarity properties."""
    path = Path(path)
    raw = path.read_bytes()
    try:
        data = plyfile.PlyData.read(io.BytesIO(raw))
    except plyfile.PlyHeaderParseError as exc:
        raise CloudFileError(f"{path}: header {exc}") from exc
    except plyfile.PlyElementParseError as exc:
        raise CloudFileError(f"{path}: {_locate(raw, exc)}: {exc.message}") from exc
    except plyfile.PlyParseError as exc:
        raise CloudFileError(f"{path}: {exc}") from exc
    if "vertex" not in data:
        raise CloudFileError(f"{path}: no 'vertex' element")
    v = data["vertex"].data
    names = v.dtype.names or ()
    for axis in "xyz":
        if axis not in names:
            raise CloudFileError(f"{path}: vertex element lacks property '{axis}'")
    positions = np.column_stack([np.asarray(v[a], dtype=float) for a in "xyz"])
    attrs = {}
    for key, props in _OPTIONAL:
        if all(p in names for p in props):
            cols = [np.asarray(v[p], dtype=float) for p in props]
            attrs[key] = cols[0] if len(cols) == 1 else np.column_stack(cols)
    if "normals" in attrs and len(attrs["normals"]):
        attrs["normals"] = attrs["normals"] / np.linalg.norm(attrs["normals"], axis=1, keepdims=True)
    try:
        return PointCloud(positions, frame_id=frame_id or path.stem, **attrs)
    except ValueError as exc:
        raise CloudFileError(f"{path}: {exc}") from exc


def _locate(raw: bytes, exc: plyfile.PlyElementParseError) -> str:
    end = raw.find(b"end_header")
    header_end = raw.find(b"\n", end) + 1 if end >= 0 else 0
    header_lines = raw[:header_end].count(b"\n")
    is_ascii = b"format ascii" in raw[:header_end]
    row = exc.row if exc.row is not None else 0
    if is_ascii:
        return f"line {header_lines + row + 1}"
    row_size = exc.element.data.dtype.itemsize if exc.element is not None and exc.element.data is not None else 0
    return f"byte offset {header_end + row * row_size} (row {row})"


def write_ply(cloud: PointCloud, path, binary: bool = True) -> None:
    cols = [("x", cloud.positions[:, 0]), ("y", cloud.positions[:, 1]), ("z", cloud.positions[:, 2])]
    if cloud.intensity is not None:
        cols.append(("intensity", cloud.intensity))
    if cloud.normals is not None:
        cols += [("nx", cloud.normals[:, 0]), ("ny", cloud.normals[:, 1]), ("nz", cloud.normals[:, 2])]
    if cloud.planarity is not None:
        cols.append(("planarity", cloud.planarity))
    arr = np.empty(len(cloud), dtype=[(name, "<f8") for name, _ in cols])
    for name, values in cols:
        arr[name] = values
    element = plyfile.PlyElement.describe(arr, "vertex")
    plyfile.PlyData([element], text=not binary, byte_order="<").write(str(path))


def load_toml(path) -> dict:
    path = Path(path)
    try:
        return load_toml_text(path.read_text())
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def load_toml_text(text: str) -> dict:
    return tomli.loads(text)


def dump_toml(data: dict, path) -> None:
    Path(path).write_text(tomli_w.dumps(data))


def params_to_dict(params: ExtrinsicParams) -> dict:
    """Angles in degrees, translations in meters."""
    ax, ay, az, tx, ty, tz = params.to_degrees()
    return {"alpha_x_deg": ax, "alpha_y_deg": ay, "alpha_z_deg": az, "t_x": tx, "t_y": ty, "t_z": tz}


def params_from_dict(d: dict) -> ExtrinsicParams:
    try:
        return ExtrinsicParams.from_degrees(
            d["alpha_x_deg"], d["alpha_y_deg"], d["alpha_z_deg"], d["t_x"], d["t_y"], d["t_z"]
        )
    except KeyError as exc:
        raise ConfigError(f"parameter block lacks {exc}") from exc


def sigmas_to_dict(sigmas) -> dict:
    s = np.asarray(sigmas, dtype=float)
    out = {}
    for i, name in enumerate(PARAM_NAMES):
        value = math.degrees(s[i]) if i < 3 else float(s[i])
        out[f"sigma_{name}_deg" if i < 3 else f"sigma_{name}"] = value
    return out


def _json_float(x):
    # JSON has no inf/nan; encode them as strings so reports stay strictly valid
    if isinstance(x, float) and not math.isfinite(x):
        return "nan" if math.isnan(x) else ("inf" if x > 0 else "-inf")
    return x


def _json_clean(obj):
    if isinstance(obj, dict):
        return {k: _json_clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_clean(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        return _json_float(float(obj))
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def _json_restore(obj):
    if isinstance(obj, dict):
        return {k: _json_restore(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_json_restore(v) for v in obj]
    if obj in ("nan", "inf", "-inf"):
        return float(obj)
    return obj


@dataclass
class CalibrationReport:
    """Serialized outcome of one sensor-pair calibration.

    ``params`` is stored in degrees and meters; ``covariance`` is 6x6 in
    radians and meters, ordered as :data:`calibkit.core.PARAM_NAMES`.
    """

    pair_id: tuple
    params: ExtrinsicParams
    covariance: np.ndarray
    history: list = field(default_factory=list)
    config: dict = field(default_factory=dict)
    status: str = "ok"
    converged: bool = False
    done: bool = False
    failure: Optional[str] = None
    version: str = __version__
    rotation_convention: str = ROTATION_CONVENTION

    def to_dict(self) -> dict:
        cov = np.asarray(self.covariance, dtype=float)
        return _json_clean(
            {
                "tool": "calibkit",
                "version": self.version,
                "rotation_convention": self.rotation_convention,
                "pair": {"reference": self.pair_id[0], "movable": self.pair_id[1]},
                "status": self.status,
                "converged": self.converged,
                "done": self.done,
                "failure": self.failure,
                "params": params_to_dict(self.params),
                "sigmas": sigmas_to_dict(np.sqrt(np.clip(np.diag(cov), 0.0, None))),
                "covariance_units": "rad, m",
                "covariance": cov.tolist(),
                "history": list(self.history),
                "config": self.config,
            }
        )

    @classmethod
    def from_dict(cls, d: dict) -> "CalibrationReport":
        d = _json_restore(d)
        return cls(
            pair_id=(d["pair"]["reference"], d["pair"]["movable"]),
            params=params_from_dict(d["params"]),
            covariance=np.array(d["covariance"], dtype=float),
            history=d.get("history", []),
            config=d.get("config", {}),
            status=d.get("status", "ok"),
            converged=d.get("converged", False),
            done=d.get("done", False),
            failure=d.get("failure"),
            version=d.get("version", ""),
            rotation_convention=d.get("rotation_convention", ROTATION_CONVENTION),
        )


def write_report(report: CalibrationReport, path) -> None:
    Path(path).write_text(json.dumps(report.to_dict(), indent=2, allow_nan=False) + "\n")


def read_report(path) -> CalibrationReport:
    path = Path(path)
    if path.suffix == ".toml":
        return read_ground_truth(path)
    return CalibrationReport.from_dict(json.loads(path.read_text()))


def write_ground_truth(truth: dict, path) -> None:
    """``truth`` maps (reference, movable) pairs to the true parameters."""
    doc = {
        "rotation_convention": ROTATION_CONVENTION,
        "pairs": [
            {"reference": ref, "movable": mov, **params_to_dict(p)} for (ref, mov), p in truth.items()
        ],
    }
    dump_toml(doc, path)


def read_ground_truth_pairs(path) -> dict:
    doc = load_toml(path)
    return {(p["reference"], p["movable"]): params_from_dict(p) for p in doc.get("pairs", [])}


def read_ground_truth(path, movable: Optional[str] = None) -> CalibrationReport:
    """A ground-truth file viewed as a report (zero covariance)."""
    pairs = read_ground_truth_pairs(path)
    if not pairs:
        raise ConfigError(f"{path}: no pairs")
    key = next((k for k in pairs if movable is None or k[1] == movable), None)
    if key is None:
        raise ConfigError(f"{path}: no pair for movable sensor '{movable}'")
    return CalibrationReport(key, pairs[key], np.zeros((6, 6)), status="ground_truth", converged=True, done=True)


SITE_LOG_COLUMNS = (
    ["site", "timestamp", "n_correspondences", "residual_mean", "residual_std"]
    + [f"{n}_deg" if n.startswith("alpha") else n for n in PARAM_NAMES]
    + [f"sigma_{n}_deg" if n.startswith("alpha") else f"sigma_{n}" for n in PARAM_NAMES]
    + ["accepted", "converged", "failure"]
)


def write_site_log(rows: list[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=SITE_LOG_COLUMNS, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: ("" if row.get(k) is None else row.get(k)) for k in SITE_LOG_COLUMNS})


def read_site_log(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def read_twist_csv(path):
    from .session import TwistSample

    samples = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        for lineno, row in enumerate(reader, start=1):
            if not row or row[0].strip().startswith("#"):
                continue
            if lineno == 1 and row[0].strip() == "timestamp":
                continue
            try:
                t, lin, ang = (float(v) for v in row[:3])
            except ValueError as exc:
                raise CloudFileError(f"{path}: line {lineno}: {exc}") from exc
            samples.append(TwistSample(t, lin, ang))
    return samples


def write_twist_csv(samples, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["timestamp", "linear", "angular"])
        for s in samples:
            writer.writerow([repr(s.timestamp), repr(s.linear_speed), repr(s.angular_speed)])
