"""Shared fixtures for the test suite."""

import pytest

from vprdistill.cli import main


def pytest_configure(config):
    config._acceptance_lines = []


@pytest.fixture(scope="session")
def acceptance_report(request):
    """Collects one summary line per acceptance criterion for the run footer."""
    def record(line):
        request.config._acceptance_lines.append(line)
    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = getattr(config, "_acceptance_lines", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def cli_data(tmp_path_factory):
    """Small synthetic dataset generated through the synth subcommand."""
    out = tmp_path_factory.mktemp("cli") / "data"
    rc = main(["synth", "--out", str(out), "--seed", "7",
               "--places", "8", "--per-place", "4", "--queries-per-place", "1",
               "--noise", "0.05", "--drift", "1"])
    assert rc == 0
    return out
