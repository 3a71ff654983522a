import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from groupnav.envgraph import build_bundle  # noqa: E402


@pytest.fixture(scope="session")
def small_bundle():
    return build_bundle(n_train_graphs=3, n_val_graphs=2, episodes_per_graph=6, n_nodes=30, area_side=24.0,
                        connect_radius=6.0, l_range=(6.0, 18.0), noise_sigma=1.0, epsilon=3.0, seed=11)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
