import sys
from pathlib import Path

from hypothesis import HealthCheck, settings

sys.path.insert(0, str(Path(__file__).parent))

settings.register_profile("gemq", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("gemq")


def pytest_terminal_summary(terminalreporter):
    import toy

    if not toy.VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(toy.VERDICTS):
        terminalreporter.write_line(toy.VERDICTS[n])
