import numpy as np
import pytest
import torch

from atvsnet.geometry import CameraModel, CameraPair


def rotation(ax: float, ay: float, az: float) -> np.ndarray:
    cx, sx, cy, sy, cz, sz = np.cos(ax), np.sin(ax), np.cos(ay), np.sin(ay), np.cos(az), np.sin(az)
    Rx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    Ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    Rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    return Rz @ Ry @ Rx


def pose(R=None, t=(0.0, 0.0, 0.0)) -> np.ndarray:
    E = np.eye(4)
    if R is not None:
        E[:3, :3] = R
    E[:3, 3] = t
    return E


def intrinsics(f=8.0, cx=3.5, cy=3.0) -> np.ndarray:
    return np.array([[f, 0.0, cx], [0.0, f, cy], [0.0, 0.0, 1.0]])


def camera(R=None, t=(0.0, 0.0, 0.0), size=(8, 7), f=8.0, cx=3.5, cy=3.0) -> CameraModel:
    return CameraModel(intrinsics(f, cx, cy), pose(R, t), size)


def pair(ref: CameraModel, src: CameraModel, dtype=torch.float64) -> CameraPair:
    return CameraPair.from_models(ref, src, dtype)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def translated_pair():
    ref = camera()
    src = camera(rotation(0.02, -0.04, 0.01), t=(-0.4, 0.05, 0.02))
    return ref, src


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
