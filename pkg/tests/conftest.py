import warnings

import numpy as np
import pytest

from mvnet.geometry import CameraExtrinsics, CameraIntrinsics, RgbdFrame
from mvnet.pipeline.scenes import SceneSpec, generate_scene


def pytest_configure(config):
    warnings.filterwarnings("ignore", message=".*outside the room.*")
    warnings.filterwarnings("ignore", message=".*sees nothing.*")


@pytest.fixture
def cam128():
    return CameraIntrinsics(fx=100.0, fy=100.0, cx=64.0, cy=64.0, width=128, height=128)


def flat_frame(H=16, W=16, depth=2.0, extr=None, frame_id="f", rgb=None, fx=20.0, labels=None):
    intr = CameraIntrinsics(fx=fx, fy=fx, cx=(W - 1) / 2, cy=(H - 1) / 2, width=W, height=H)
    if rgb is None:
        rgb = np.random.default_rng(0).uniform(0, 1, (H, W, 3))
    d = np.full((H, W), depth) if np.isscalar(depth) else depth
    return RgbdFrame(rgb, d, np.ones((H, W), bool), intr, extr or CameraExtrinsics(), frame_id, labels)


@pytest.fixture(scope="session")
def small_scenes():
    return [generate_scene(SceneSpec(seed=s)) for s in range(3)]


def random_rotation(rng):
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    R = np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])
    u, _, vt = np.linalg.svd(R)
    return u @ vt


ACCEPTANCE_KEY = pytest.StashKey[list]()


@pytest.fixture
def acceptance_line(request):
    """Print one PASS/FAIL line for a criterion and keep it for the end-of-run summary."""
    lines = request.config.stash.setdefault(ACCEPTANCE_KEY, [])

    def emit(number, ok, text):
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {text}"
        print(line)
        lines.append(line)
        return ok

    return emit


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(ACCEPTANCE_KEY, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
