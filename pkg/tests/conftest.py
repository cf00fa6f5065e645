import pytest

from mrpaxos.core import Tuning, simple_cluster
from mrpaxos.transport.simnet import SimNet, SimParams


@pytest.fixture
def quiet_ring():
    """One ring of three acceptors and a learner, without rate leveling skips."""
    return simple_cluster(1, {3: [0]}, tuning=Tuning(rate_leveling=False))


def traced_net(cfg, seed=1):
    return SimNet(cfg, seed, params=SimParams(trace_messages=True))


# --- acceptance verdict lines --------------------------------------------------------

VERDICTS: dict[int, tuple[bool, str]] = {}


def record_verdict(number: int, ok: bool, detail: str) -> str:
    VERDICTS[number] = (ok, detail)
    line = f"criterion {number}: {'PASS' if ok else 'FAIL'} ({detail})"
    print(line)
    return line


def pytest_terminal_summary(terminalreporter):
    if not VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(VERDICTS):
        ok, detail = VERDICTS[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'} ({detail})")
