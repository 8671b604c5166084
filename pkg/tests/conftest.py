import json
import time
from pathlib import Path

import pytest

from coarsenkit import coeffs, expcli, profiles

ROOT = Path(__file__).resolve().parent.parent
SCENARIO_DIR = ROOT / "scenarios"


@pytest.fixture(scope="session")
def lsw():
    return coeffs.lsw()


@pytest.fixture(scope="session")
def quad():
    return coeffs.quadratic(-0.5, -1.0, 0.0)


@pytest.fixture(scope="session")
def linear_profile():
    return profiles.build({"kind": "power_law", "p": 1})


@pytest.fixture(scope="session")
def critical_profile():
    return profiles.build({"kind": "critical_exp"})


@pytest.fixture(scope="session")
def scenario_paths():
    return sorted(SCENARIO_DIR.glob("*.json"))


@pytest.fixture(scope="session")
def scenario_runs(tmp_path_factory, scenario_paths):
    """Every scenario in scenarios/, run once per session: name -> (summary, csv path)."""
    out = tmp_path_factory.mktemp("scenario_out")
    runs = {}
    for path in scenario_paths:
        sc = expcli.load_scenario(path)
        start = time.perf_counter()
        summary = expcli.run_scenario(sc, out)
        seconds = time.perf_counter() - start
        stored = json.loads((out / sc.summary_path).read_text())
        runs[sc.name] = {"summary": summary, "stored": stored, "csv": out / sc.series_path,
                        "seconds": seconds}
    return runs


ACCEPTANCE_LINES = []


@pytest.fixture
def verdict():
    """Record one PASS/FAIL line per acceptance criterion; returns the boolean."""

    def record(number, ok, detail):
        line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split(":")[0].split()[-1])):
            terminalreporter.write_line(line)
