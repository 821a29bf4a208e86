from importlib import resources
from pathlib import Path

import pytest

from grappa.gsl import parse
from grappa.sim import load_task

DATA = Path(str(resources.files("grappa").joinpath("data")))


def fixture_path(name: str) -> Path:
    return DATA / "fixtures" / name


def guidance_path(name: str) -> Path:
    return DATA / "guidance" / name


def transcript_path(name: str) -> Path:
    return DATA / "transcripts" / name


def load_guidance(name: str):
    return parse(guidance_path(name).read_text(encoding="utf-8"))


@pytest.fixture(scope="session")
def buttons_task():
    return load_task(fixture_path("buttons3.json"))


@pytest.fixture(scope="session")
def reach_task():
    return load_task(fixture_path("reach_sweep.json"))


@pytest.fixture(scope="session")
def chess_task():
    return load_task(fixture_path("chess.json"))


@pytest.fixture(scope="session")
def slide_task():
    return load_task(fixture_path("slide_block.json"))


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
