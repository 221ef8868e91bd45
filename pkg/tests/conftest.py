import math
import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from calibkit.core import ExtrinsicParams  # noqa: E402
from calibkit.features import estimate_normals_planarity  # noqa: E402
from calibkit.filters import FilterConfig, apply_filters  # noqa: E402
from calibkit.synth import corner_scene, generate_scene, render_view  # noqa: E402

TRUE_OFFSET = ExtrinsicParams.from_degrees(2.0, -1.0, 3.0, 0.05, -0.03, 0.10)


def corner_pair(g=TRUE_OFFSET, noise=0.005, points_per_side=10_000, seed=0):
    """Reference and movable views of independently sampled corner worlds."""
    ref_world = generate_scene(corner_scene(points_per_side=points_per_side, seed=seed + 1))
    mov_world = generate_scene(corner_scene(points_per_side=points_per_side, seed=seed + 2))
    ref = render_view(ref_world, ExtrinsicParams(), noise, seed=seed + 3, frame_id="ref")
    mov = render_view(mov_world, g, noise, seed=seed + 4, frame_id="mov")
    return ref, mov


def prepared(cloud, cfg=FilterConfig()):
    return apply_filters(estimate_normals_planarity(cloud), cfg)


@pytest.fixture(scope="session")
def corner_clouds():
    ref, mov = corner_pair()
    return prepared(ref), prepared(mov)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_params(rng, angle=math.pi, trans=10.0):
    return ExtrinsicParams(*rng.uniform(-angle, angle, 3), *rng.uniform(-trans, trans, 3))


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
