import numpy as np
import pytest

from misaligned_oac.channel import SymbolBlock
from misaligned_oac.model import DeviceProfile, validate_geometry


def random_geometry(rng, M, *, cfo_max=0.0, unit_gain=False, min_gap=0.02):
    """Distinct sorted offsets with tau_1 = 0 and gaps of at least ``min_gap``."""
    while True:
        taus = np.sort(np.concatenate([[0.0], rng.uniform(0.0, 0.95, M - 1)]))
        if M == 1 or np.min(np.diff(np.append(taus, 1.0))) >= min_gap:
            break
    amps = np.ones(M) if unit_gain else rng.uniform(0.5, 1.5, M)
    phases = np.zeros(M) if unit_gain else rng.uniform(0.0, 2 * np.pi, M)
    cfos = rng.uniform(-cfo_max, cfo_max, M) if cfo_max else np.zeros(M)
    return validate_geometry(
        [DeviceProfile(float(t), float(a), float(p), float(c)) for t, a, p, c in zip(taus, amps, phases, cfos)]
    )


def random_block(rng, M, L):
    s = (rng.standard_normal((M, L)) + 1j * rng.standard_normal((M, L))) / np.sqrt(2)
    return SymbolBlock(s)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


# ---------------------------------------------------------------- acceptance summary

ACCEPTANCE_RESULTS = {}


def record_criterion(number, passed, detail):
    """Store one acceptance verdict; printed once at the end of the session."""
    line = f"CRITERION {number}: {'PASS' if passed else 'FAIL'} - {detail}"
    ACCEPTANCE_RESULTS[number] = line
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE_RESULTS, key=str):
        terminalreporter.write_line(ACCEPTANCE_RESULTS[number])
