import json
import time
from collections import defaultdict
from pathlib import Path

import pytest

GOLDEN = Path(__file__).with_name("golden_run.json")

_outcomes: dict[int, list[tuple[str, str]]] = defaultdict(list)


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number this test checks")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    if report.when == "call" or (report.when == "setup" and not report.passed):
        if hasattr(report, "wasxfail"):
            status = "xfail"
        elif report.skipped:
            status = "skipped"
        else:
            status = report.outcome
        _outcomes[marker.args[0]].append((item.name, status))


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_outcomes):
        results = _outcomes[n]
        ok = all(status == "passed" for _, status in results)
        bad = [f"{name} ({status})" for name, status in results if status != "passed"]
        line = f"criterion {n}: {'PASS' if ok else 'FAIL'}"
        if bad:
            line += "  " + ", ".join(bad)
        terminalreporter.write_line(line)


def output_digests(workdir: Path) -> dict[str, dict[str, str]]:
    """Output digests of every manifest under the workdir, keyed by manifest path."""
    return {
        str(p.relative_to(workdir)): json.loads(p.read_text())["outputs"]
        for p in sorted(workdir.rglob("*manifest.json"))
    }


def total_wall_clock(workdir: Path) -> float:
    return sum(json.loads(p.read_text()).get("wall_clock_s", 0.0) for p in workdir.rglob("*manifest.json"))


@pytest.fixture(scope="session")
def demo_dir(tmp_path_factory):
    """A fresh seed-0 demo run at default configuration."""
    from bailab.cli import main

    root = tmp_path_factory.mktemp("demo")
    started = time.time()
    assert main(["--workdir", str(root), "demo", "--seed", "0"]) == 0
    (root / "elapsed.txt").write_text(f"{time.time() - started:.1f}\n")
    return root


@pytest.fixture(scope="session")
def golden():
    return json.loads(GOLDEN.read_text())
