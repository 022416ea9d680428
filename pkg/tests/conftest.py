import numpy as np
import pytest

from magcal.simulate import generate, preset


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def wam_clean():
    return generate(preset("wam", seed=1, sigma_mag=0.0, sigma_gyro=0.0))


@pytest.fixture(scope="session")
def wam_noisy():
    return generate(preset("wam", seed=1))


def random_spd(rng, det_one=False):
    m = rng.normal(size=(3, 3))
    a = m @ m.T + 0.5 * np.eye(3)
    if det_one:
        a = a / np.cbrt(np.linalg.det(a))
    return a


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def report_criterion():
    """Record one PASS/FAIL line; all lines are repeated in the terminal summary."""

    def record(number: int, passed: bool, detail: str) -> bool:
        line = f"CRITERION {number}: {'PASS' if passed else 'FAIL'} | {detail}"
        print(line)
        ACCEPTANCE_LINES.append(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
