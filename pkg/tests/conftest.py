import pytest

from advpatch.demo import build_demo


@pytest.fixture(scope="session")
def demo_dir(tmp_path_factory):
    """Bundled demo world, built once per test session."""
    out = tmp_path_factory.mktemp("demo_world")
    build_demo(out)
    return out
