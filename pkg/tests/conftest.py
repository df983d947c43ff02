import os
import sys
from pathlib import Path

import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, str(Path(__file__).parent))

settings.register_profile(
    "default", max_examples=60, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.register_profile("thorough", max_examples=500, deadline=None)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

FIXTURES = Path(__file__).parent / "fixtures"


@pytest.fixture(scope="session")
def fixtures_dir() -> Path:
    return FIXTURES


@pytest.fixture(scope="session")
def synth_scene():
    from mff.synth import make_scene

    return make_scene(seed=7)


@pytest.fixture(scope="session")
def synth_root(tmp_path_factory, synth_scene):
    from mff.synth import write_scene

    return write_scene(synth_scene, tmp_path_factory.mktemp("synth"))


@pytest.fixture(scope="session")
def synth_manifests(synth_root):
    from mff.openlabel import build_manifest

    return build_manifest(synth_root)


_ACCEPTANCE: list[tuple[int, str]] = []


@pytest.fixture
def criterion():
    """Record one acceptance line, print it, and fail the test when the criterion fails."""

    def record(number: int, title: str, ok: bool, detail: str = "") -> None:
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {title}"
        if detail:
            line += f"  [{detail}]"
        _ACCEPTANCE.append((number, line))
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(_ACCEPTANCE):
            terminalreporter.write_line(line)
