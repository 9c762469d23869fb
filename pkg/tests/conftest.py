"""Shared fixtures: deterministic scene banks reused across test modules."""

import numpy as np
import pytest

from scalerect import synth

_ACCEPTANCE_LINES = []


def record_acceptance(line: str) -> None:
    _ACCEPTANCE_LINES.append(line)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for line in _ACCEPTANCE_LINES:
        terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def scene_bank():
    """200 rigid-motion benchmark scenes, lambda_gt = -4, seeds 0..199."""
    return [synth.gen_scene(s) for s in range(200)]


@pytest.fixture(scope="session")
def translation_bank():
    """200 translated-repeat scenes for the proposal-quality protocol."""
    return [synth.gen_scene(s, motion="translation") for s in range(200)]


@pytest.fixture(scope="session")
def small_bank(scene_bank):
    return scene_bank[:20]


@pytest.fixture()
def rng():
    return np.random.default_rng(0)
