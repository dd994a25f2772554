import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))

import pytest


@pytest.fixture(scope="session")
def pasture_root(tmp_path_factory):
    """The five-image procedural demo dataset, written once per session."""
    from herdsynth.fixture import write_fixture

    root = tmp_path_factory.mktemp("pasture")
    write_fixture(root)
    return root


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is not None and mod.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(mod.RESULTS, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
