import pytest

from texavatar.synth import Scene, gen_scene


@pytest.fixture(scope="session")
def limb_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("limb")
    gen_scene("limb", 0, out)
    return out


@pytest.fixture(scope="session")
def limb_scene(limb_dir):
    return Scene.load(limb_dir)


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(RESULTS):
            terminalreporter.write_line(RESULTS[n])
