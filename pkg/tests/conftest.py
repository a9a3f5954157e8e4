import numpy as np
import pytest

from fibra import geometry

ACCEPTANCE_LINES = []


def record(criterion, ok, detail=""):
    """Log one acceptance verdict for the terminal summary."""
    line = f"[{'PASS' if ok else 'FAIL'}] {criterion}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def cylinder_volume(n, radius, axis=(0.0, 0.0, 1.0), value=255):
    """Bright infinite cylinder through the centre of an n^3 volume.

    Returns the u8 volume, the unit axis and the boolean interior mask.
    """
    axis = geometry.normalize(axis)
    g = np.arange(n) + 0.5 - n / 2
    x, y, z = np.meshgrid(g, g, g, indexing="ij")
    p = np.stack([x, y, z], axis=-1)
    t = p @ axis
    rad = np.linalg.norm(p - t[..., None] * axis, axis=-1)
    inside = rad <= radius
    return np.where(inside, value, 0).astype(np.uint8), axis, inside
