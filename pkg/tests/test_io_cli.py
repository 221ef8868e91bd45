import math

import numpy as np
import pytest

from calibkit.cli import EXIT_OK, EXIT_QUALITY, EXIT_USAGE, main
from calibkit.config import config_from_dict, load_config
from calibkit.core import ExtrinsicParams, PointCloud
from calibkit.io import (
    CalibrationReport,
    CloudFileError,
    ConfigError,
    read_ground_truth,
    read_ground_truth_pairs,
    read_ply,
    read_report,
    read_site_log,
    read_twist_csv,
    write_ground_truth,
    write_ply,
    write_report,
    write_twist_csv,
)
from calibkit.scenario import load_scenario, materialize
from calibkit.session import TwistSample
from conftest import TRUE_OFFSET, corner_pair


def full_cloud(n=50, seed=0):
    rng = np.random.default_rng(seed)
    nrm = rng.normal(size=(n, 3))
    return PointCloud(
        rng.normal(size=(n, 3)) * 10,
        frame_id="scan",
        intensity=rng.uniform(0, 255, n),
        normals=nrm / np.linalg.norm(nrm, axis=1)[:, None],
        planarity=rng.uniform(0, 1, n),
    )


# -- files ---------------------------------------------------------------------


@pytest.mark.parametrize("binary", [True, False])
def test_ply_round_trip(tmp_path, binary):
    cloud = full_cloud()
    path = tmp_path / "scan.ply"
    write_ply(cloud, path, binary=binary)
    back = read_ply(path)
    assert back.frame_id == "scan"
    tol = 0 if binary else 1e-12
    np.testing.assert_allclose(back.positions, cloud.positions, atol=tol, rtol=0)
    np.testing.assert_allclose(back.intensity, cloud.intensity, atol=tol, rtol=tol)
    np.testing.assert_allclose(back.normals, cloud.normals, atol=1e-12)
    np.testing.assert_allclose(back.planarity, cloud.planarity, atol=tol)


def test_ply_positions_only(tmp_path):
    cloud = PointCloud(np.arange(12.0).reshape(4, 3))
    write_ply(cloud, tmp_path / "a.ply")
    back = read_ply(tmp_path / "a.ply")
    assert back.normals is None and back.intensity is None and back.planarity is None


def test_malformed_ascii_ply_names_line(tmp_path):
    path = tmp_path / "bad.ply"
    path.write_text(
        "ply\nformat ascii 1.0\nelement vertex 3\n"
        "property double x\nproperty double y\nproperty double z\nend_header\n"
        "0 0 0\n1 1 oops\n2 2 2\n"
    )
    with pytest.raises(CloudFileError, match="line 9"):
        read_ply(path)


def test_truncated_binary_ply_names_offset(tmp_path):
    path = tmp_path / "short.ply"
    write_ply(PointCloud(np.zeros((10, 3))), path)
    raw = path.read_bytes()
    path.write_bytes(raw[:-30])
    with pytest.raises(CloudFileError, match="byte offset"):
        read_ply(path)


def test_report_round_trip(tmp_path):
    cov = np.diag([1e-6, 2e-6, 3e-6, 0.0, 1e-4, math.inf])
    rep = CalibrationReport(("lidar1", "lidar2"), TRUE_OFFSET, cov, [{"site": 1}], {"match": {}}, done=True)
    write_report(rep, tmp_path / "r.json")
    back = read_report(tmp_path / "r.json")
    assert back.pair_id == ("lidar1", "lidar2")
    np.testing.assert_allclose(back.params.to_array(), TRUE_OFFSET.to_array(), atol=1e-15)
    np.testing.assert_array_equal(back.covariance, cov)
    assert back.done and back.history == [{"site": 1}]


def test_ground_truth_round_trip(tmp_path):
    truth = {("a", "b"): TRUE_OFFSET, ("a", "c"): ExtrinsicParams(0.1, 0, 0, 1, 2, 3)}
    write_ground_truth(truth, tmp_path / "gt.toml")
    back = read_ground_truth_pairs(tmp_path / "gt.toml")
    for key, g in truth.items():
        np.testing.assert_allclose(back[key].to_array(), g.to_array(), atol=1e-15)
    rep = read_ground_truth(tmp_path / "gt.toml", movable="c")
    assert rep.pair_id == ("a", "c") and not rep.covariance.any()
    with pytest.raises(ConfigError):
        read_ground_truth(tmp_path / "gt.toml", movable="zz")


def test_twist_csv_round_trip_and_errors(tmp_path):
    samples = [TwistSample(0.1 * i, 0.5, 0.01) for i in range(5)]
    write_twist_csv(samples, tmp_path / "t.csv")
    assert read_twist_csv(tmp_path / "t.csv") == samples
    (tmp_path / "bad.csv").write_text("timestamp,linear_speed,angular_speed\n0,0,0\n1,x,0\n")
    with pytest.raises(CloudFileError, match="line 3"):
        read_twist_csv(tmp_path / "bad.csv")


# -- config ---------------------------------------------------------------------


def test_config_units_and_overrides(tmp_path):
    path = tmp_path / "c.toml"
    path.write_text(
        "[match]\nmax_normal_angle_deg = 45.0\nnum_selected = 500\n"
        "[session]\nstop_sigma_angles_deg = 0.5\nreference = \"lidar1\"\n"
        "[prior]\nsigma_angle_deg = 2.0\nsigma_translation = 0.1\nfixed = [\"t_z\"]\n"
        "[prior.lidar2]\nalpha_z_deg = 90.0\nt_z = 1.5\n"
    )
    cfg = load_config(path)
    assert cfg.pipeline.match.max_normal_angle == pytest.approx(math.radians(45))
    assert cfg.pipeline.match.num_selected == 500
    assert cfg.session.stop_sigma_angles == pytest.approx(math.radians(0.5))
    assert cfg.reference == "lidar1"
    p = cfg.prior_for("lidar2")
    assert p.values.alpha_z == pytest.approx(math.pi / 2) and p.values.t_z == 1.5
    assert p.estimate_mask == (True,) * 5 + (False,)
    assert p.sigmas[0] == pytest.approx(math.radians(2.0))
    assert cfg.prior_for("other").values == ExtrinsicParams()


def test_config_rejects_unknown_keys():
    with pytest.raises(ConfigError):
        config_from_dict({"match": {"num_selectd": 3}})
    with pytest.raises(ConfigError):
        config_from_dict({"prior": {"fixed": ["t_w"]}})
    with pytest.raises(ConfigError):
        config_from_dict({"filters": {}})


def test_default_config():
    cfg = load_config(None)
    assert cfg.prior_for("x").sigmas == (math.inf,) * 6


# -- scenario directories ------------------------------------------------------


TINY_SCENE = {
    "name": "tiny",
    "seed": 3,
    "reference": "a",
    "twist": {"rate": 10.0, "drive_speed": 2.0, "drive_duration": 3.0, "stop_duration": 6.0},
    "sensors": {
        "a": {"pose": [0, 0, 0, 0, 0, 0], "noise": 0.005},
        "b": {"pose": [0.5, -0.3, 0.2, 2.0, -1.0, 3.0], "noise": 0.005},
    },
    "prior": {
        "angle_perturbation_deg": 1.0,
        "translation_perturbation": 0.02,
        "sigma_angle_deg": 3.0,
        "sigma_translation": 0.05,
    },
    "sites": [
        {
            "clutter_fraction": 0.05,
            "planes": [
                {"center": [8, 0, 1], "normal": [-1, 0, 0], "extent": [10, 4], "density": 30},
                {"center": [0, 8, 1], "normal": [0, -1, 0], "extent": [10, 4], "density": 30},
                {"center": [0, 0, -1.5], "normal": [0, 0, 1], "extent": [12, 12], "density": 30},
            ],
        }
    ]
    * 2,
}


def test_materialize_and_load(tmp_path):
    truth = materialize(TINY_SCENE, tmp_path)
    scenario, sensors = load_scenario(tmp_path)
    assert sensors == ["a", "b"]
    assert len(scenario.sites) == 2
    assert scenario.sites[1]["b"].acquired_at_site == 2
    assert read_ground_truth_pairs(tmp_path / "ground_truth.toml") == truth
    assert load_config(tmp_path / "config.toml").reference == "a"


def test_load_scenario_missing_dir(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_scenario(tmp_path / "nope")


# -- command line ----------------------------------------------------------------


def test_cli_missing_input_file(tmp_path):
    code = main(["calibrate-pair", str(tmp_path / "x.ply"), str(tmp_path / "y.ply"), "--output", str(tmp_path / "r.json")])
    assert code == EXIT_USAGE


def test_cli_bad_arguments():
    assert main(["calibrate-pair"]) == EXIT_USAGE
    assert main(["frobnicate", "--output", "x"]) == EXIT_USAGE


@pytest.fixture(scope="module")
def corner_files(tmp_path_factory):
    d = tmp_path_factory.mktemp("pair")
    ref, mov = corner_pair(points_per_side=4000, seed=7)
    write_ply(ref, d / "ref.ply")
    write_ply(mov, d / "mov.ply")
    return d


def test_cli_identical_clouds(corner_files, tmp_path):
    f = str(corner_files / "ref.ply")
    out = tmp_path / "same.json"
    assert main(["calibrate-pair", f, f, "--output", str(out)]) == EXIT_OK
    rep = read_report(out)
    assert np.max(np.abs(rep.params.to_array())) < 1e-6
    assert (tmp_path / "same.residuals.png").exists()


def test_cli_calibrate_synthetic_pair(corner_files, tmp_path):
    out = tmp_path / "pair.json"
    code = main(
        ["calibrate-pair", str(corner_files / "ref.ply"), str(corner_files / "mov.ply"), "--output", str(out), "--no-figures"]
    )
    assert code == EXIT_OK
    rep = read_report(out)
    err = rep.params.to_array() - TRUE_OFFSET.to_array()
    assert np.max(np.abs(np.degrees(err[:3]))) < 0.1 and np.max(np.abs(err[3:])) < 0.005
    assert rep.converged and rep.pair_id == ("ref", "mov")
    assert not (tmp_path / "pair.residuals.png").exists()


def test_cli_pair_failure_writes_report(tmp_path):
    write_ply(PointCloud(np.random.default_rng(0).normal(size=(5, 3))), tmp_path / "tiny.ply")
    out = tmp_path / "fail.json"
    assert main(["calibrate-pair", str(tmp_path / "tiny.ply"), str(tmp_path / "tiny.ply"), "--output", str(out)]) == EXIT_QUALITY
    assert read_report(out).status == "failed"


def test_cli_bad_config_is_usage_error(corner_files, tmp_path):
    bad = tmp_path / "bad.toml"
    bad.write_text("[match]\nbogus = 1\n")
    f = str(corner_files / "ref.ply")
    assert main(["calibrate-pair", f, f, "--config", str(bad), "--output", str(tmp_path / "o.json")]) == EXIT_USAGE


def test_cli_empty_scenario_dir(tmp_path):
    (tmp_path / "empty").mkdir()
    assert main(["run-session", str(tmp_path / "empty"), "--output", str(tmp_path / "out")]) == EXIT_USAGE


def test_cli_scenario_that_never_stops(tmp_path):
    materialize(TINY_SCENE, tmp_path / "sc")
    write_twist_csv([TwistSample(0.1 * i, 2.0, 0.0) for i in range(300)], tmp_path / "sc" / "twist.csv")
    out = tmp_path / "out"
    assert main(["run-session", str(tmp_path / "sc"), "--output", str(out)]) == EXIT_QUALITY
    assert read_site_log(out / "a_to_b.csv") == []
    assert not read_report(out / "a_to_b.json").done


def test_cli_tiny_session(tmp_path):
    assert main(["simulate", "--output", str(tmp_path / "sc"), _scene_file(tmp_path)]) == EXIT_OK
    out = tmp_path / "out"
    code = main(["run-session", str(tmp_path / "sc"), "--output", str(out)])
    rows = read_site_log(out / "a_to_b.csv")
    assert rows and rows[0]["accepted"] == "1"
    rep = read_report(out / "a_to_b.json")
    assert code == (EXIT_OK if rep.done else EXIT_QUALITY)
    for name in ("a_to_b_quality.png", "a_to_b_residuals.png"):
        assert (out / name).stat().st_size > 0


def _scene_file(tmp_path):
    import tomli_w

    path = tmp_path / "scene.toml"
    path.write_text(tomli_w.dumps(TINY_SCENE))
    return str(path)


def test_cli_simulate_is_deterministic(tmp_path):
    scene = _scene_file(tmp_path)
    assert main(["simulate", scene, "--output", str(tmp_path / "a"), "--seed", "5"]) == EXIT_OK
    assert main(["simulate", scene, "--output", str(tmp_path / "b"), "--seed", "5"]) == EXIT_OK
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    assert files
    for rel in files:
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()


@pytest.mark.slow
def test_cli_simulate_twelve_sites(tmp_path):
    assert main(["simulate", "twelve_sites", "--output", str(tmp_path)]) == EXIT_OK
    assert len([p for p in tmp_path.iterdir() if p.is_dir() and p.name.startswith("site_")]) == 12
    assert (tmp_path / "twist.csv").exists() and (tmp_path / "ground_truth.toml").exists()
