"""Acceptance criteria, one test each.

Every test records a ``PASS``/``FAIL`` line (shown in the terminal summary
and printed with ``-s``) before asserting. Tolerances are pinned here.
"""

import math
import time

import numpy as np
import pytest

from calibkit.adjust import ResidualBundle, jacobian_point_to_plane, robust_sigma, solve_gauss_markov
from calibkit.cli import EXIT_OK, main
from calibkit.core import ExtrinsicParams, ParamPrior, RankDeficiencyError
from calibkit.io import read_report, read_site_log
from calibkit.matching import run_icp
from calibkit.session import PipelineConfig, calibrate_pair
from calibkit.synth import perturb
from conftest import ACCEPTANCE_LINES, TRUE_OFFSET, corner_pair, prepared
from oracles import central_difference, residual_oracle

# pinned tolerances
ANGLE_TOL_DEG = 0.1
TRANS_TOL_M = 0.005
TIME_LIMIT_S = 10.0
JACOBIAN_REL_TOL = 1e-5
JACOBIAN_SAMPLES = 1000
MAD_REL_TOL = 0.05
MAD_HAND_VALUE = 1.4826
PRIOR_SIGMA = 0.01
BIG_CLOUD_POINTS = 50_000


def record(number: int, title: str, ok: bool, detail: str) -> None:
    line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {title}  ({detail})"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


def _errors(params, truth):
    d = params.to_array() - truth.to_array()
    return float(np.max(np.abs(np.degrees(d[:3])))), float(np.max(np.abs(d[3:])))


def test_criterion_1_corner_recovery():
    ref, mov = corner_pair(noise=0.005, points_per_side=10_000)
    worst_a = worst_t = worst_s = 0.0
    converged = True
    for seed in range(5):
        start = perturb(TRUE_OFFSET, math.radians(3.0), 0.03, seed=seed)
        t0 = time.perf_counter()
        res = calibrate_pair(ref, mov, ParamPrior.unconstrained(), PipelineConfig(), initial=start)
        elapsed = time.perf_counter() - t0
        ea, et = _errors(res.params, TRUE_OFFSET)
        worst_a, worst_t, worst_s = max(worst_a, ea), max(worst_t, et), max(worst_s, elapsed)
        converged &= res.converged
    ok = converged and worst_a <= ANGLE_TOL_DEG and worst_t <= TRANS_TOL_M and worst_s < TIME_LIMIT_S
    record(
        1,
        "corner scene recovered from 3 deg / 3 cm offsets",
        ok,
        f"max angle err {worst_a:.4f} deg, max trans err {worst_t * 1000:.2f} mm, slowest {worst_s:.2f} s",
    )


def test_criterion_2_jacobian():
    rng = np.random.default_rng(2)
    worst = 0.0
    for _ in range(JACOBIAN_SAMPLES):
        x = np.r_[rng.uniform(-math.pi, math.pi, 3), rng.uniform(-10, 10, 3)]
        p, q = rng.uniform(-20, 20, (2, 3))
        n = rng.normal(size=3)
        n /= np.linalg.norm(n)
        J = jacobian_point_to_plane(ExtrinsicParams.from_array(x), p, q, n)
        fd = central_difference(lambda y: residual_oracle(y, p, q, n), x, h=1e-6)
        worst = max(worst, float(np.max(np.abs(J - fd)) / max(1.0, np.max(np.abs(fd)))))
    record(2, "analytic Jacobian matches finite differences", worst <= JACOBIAN_REL_TOL, f"max rel err {worst:.2e}")


def test_criterion_3_mad():
    d = np.random.default_rng(3).normal(0.0, 0.02, 100_000)
    est = robust_sigma(d)
    hand = robust_sigma([1, 2, 3, 4, 100])
    ok = abs(est - 0.02) / 0.02 <= MAD_REL_TOL and hand == pytest.approx(MAD_HAND_VALUE, abs=1e-12)
    record(3, "MAD scale", ok, f"gaussian 0.02 -> {est:.5f}, hand case -> {hand:.6f}")


def test_criterion_4_prior_only():
    prior = ParamPrior(ExtrinsicParams(0.012, -0.034, 0.056, 0.1, -0.2, 0.3), (0.01,) * 6)
    empty = np.zeros((0, 3))
    res = solve_gauss_markov(ResidualBundle(empty, empty, empty, prior, 1.0), ExtrinsicParams())
    ok = res.params.to_array().tobytes() == prior.values.to_array().tobytes()
    record(4, "prior-only adjustment returns the prior bit-exactly", ok, f"estimate {res.params.to_array()}")


def test_criterion_5_single_plane():
    rng = np.random.default_rng(5)
    q = np.c_[rng.uniform(-10, 10, (2000, 2)), np.full(2000, -2.0)]
    n = np.tile([0.0, 0.0, 1.0], (2000, 1))
    p = q + rng.normal(0.0, 0.01, q.shape)
    direction = None
    try:
        solve_gauss_markov(ResidualBundle(p, q, n, ParamPrior.unconstrained(), 0.01), ExtrinsicParams())
    except RankDeficiencyError as exc:
        direction = exc.null_direction
    in_span = direction is not None and float(np.linalg.norm(direction[[2, 3, 4]])) > 1 - 1e-9
    prior = ParamPrior(ExtrinsicParams(), (PRIOR_SIGMA,) * 6)
    res = solve_gauss_markov(ResidualBundle(p, q, n, prior, 0.01), ExtrinsicParams())
    within = bool(np.all(np.abs(res.params.to_array()) <= 3 * res.sigmas))
    detail = "no rank error" if direction is None else f"null direction {np.round(direction, 3)}"
    record(5, "single plane: rank deficiency without priors, 3-sigma bounded with priors", in_span and within, detail)


@pytest.fixture(scope="module")
def twelve_sites(tmp_path_factory):
    root = tmp_path_factory.mktemp("twelve")
    assert main(["simulate", "twelve_sites", "--output", str(root / "scenario")]) == EXIT_OK
    codes = [
        main(["run-session", str(root / "scenario"), "--output", str(root / name), "--seed", "2022"])
        for name in ("run1", "run2")
    ]
    return root, codes


SIGMA_COLUMNS = ["sigma_alpha_x_deg", "sigma_alpha_y_deg", "sigma_alpha_z_deg", "sigma_t_x", "sigma_t_y", "sigma_t_z"]


def test_criterion_6_twelve_sites(twelve_sites):
    root, codes = twelve_sites
    out = root / "run1"
    ok, details = codes[0] == EXIT_OK, []
    reports = sorted(out.glob("*.json"))
    ok &= len(reports) == 2
    for rep_path in reports:
        rows = [r for r in read_site_log(rep_path.with_suffix(".csv")) if r["accepted"] == "1"]
        sig = np.array([[float(r[c]) for c in SIGMA_COLUMNS] for r in rows])
        monotone = bool(np.all(np.diff(sig, axis=0) <= 0.0)) if len(sig) else False
        rep = read_report(rep_path)
        done = rep.done
        ok &= monotone and done and rep.config["session"]["update_gate_factor"] == 1.0
        details.append(f"{rep_path.stem}: {len(rows)} accepted, monotone={monotone}, done={done}")
    record(6, "twelve_sites sigmas non-increasing and done", ok, "; ".join(details))


def test_criterion_7_masked_translations():
    ref, mov = corner_pair(points_per_side=4000, seed=70)
    ref, mov = prepared(ref), prepared(mov)
    fixed = ExtrinsicParams(0, 0, 0, TRUE_OFFSET.t_x, TRUE_OFFSET.t_y, TRUE_OFFSET.t_z)
    prior = ParamPrior(fixed, (math.inf,) * 6, (True, True, True, False, False, False))
    res = run_icp(ref, mov, ExtrinsicParams(), prior)
    bits = res.params.to_array()[3:].tobytes() == fixed.to_array()[3:].tobytes()
    C = res.covariance
    zero_rows = int(np.sum(np.all(C == 0.0, axis=1)))
    zero_cols = int(np.sum(np.all(C == 0.0, axis=0)))
    ok = bits and zero_rows == 3 and zero_cols == 3 and bool(np.all(C[3:, :] == 0))
    record(7, "fixed translations stay bit-identical, covariance has 3 zero rows/cols", ok, f"zero rows {zero_rows}, zero cols {zero_cols}")


def test_criterion_8_reproducible_session(twelve_sites):
    root, _ = twelve_sites
    files = sorted(p.name for p in (root / "run1").iterdir() if p.suffix in (".json", ".csv"))
    same = [(root / "run1" / f).read_bytes() == (root / "run2" / f).read_bytes() for f in files]
    ok = bool(files) and all(same)
    record(8, "run-session twice gives byte-identical reports and logs", ok, f"{sum(same)}/{len(files)} files identical")


def test_criterion_9_large_cloud_timing():
    per_side = BIG_CLOUD_POINTS // 3 + 1
    ref, mov = corner_pair(points_per_side=per_side, seed=90)
    start = perturb(TRUE_OFFSET, math.radians(2.0), 0.02, seed=9)
    t0 = time.perf_counter()
    res = calibrate_pair(ref, mov, ParamPrior.unconstrained(), PipelineConfig(), initial=start)
    elapsed = time.perf_counter() - t0
    ok = min(len(ref), len(mov)) >= BIG_CLOUD_POINTS and elapsed < TIME_LIMIT_S and res.converged
    record(9, "single-site calibration of 5e4-point clouds", ok, f"{len(ref)}/{len(mov)} points, {elapsed:.2f} s")
