import numpy as np
import pytest
from hypothesis import settings

from maeforge.mae import MaeConfig
from maeforge.vit import EncoderConfig

settings.register_profile("repo", deadline=None, max_examples=60)
settings.load_profile("repo")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_mae():
    """16x16 images, 4x4 patches, one block each side."""
    return MaeConfig(
        encoder=EncoderConfig(depth=1, width=8, heads=2),
        decoder_depth=1,
        decoder_width=8,
        decoder_heads=2,
        patch=4,
        image_side=16,
    )


# acceptance criteria report ---------------------------------------------------


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered by the test")
    config._criteria = []


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or rep.when not in ("setup", "call"):
        return
    if rep.when == "setup" and rep.passed:
        return
    detail = dict(item.user_properties).get("detail", "")
    item.config._criteria.append((mark.args[0], mark.args[1], rep.passed, detail))


def pytest_terminal_summary(terminalreporter, config):
    if not config._criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number, title, ok, detail in sorted(config._criteria):
        line = f"criterion {number:2d} {'PASS' if ok else 'FAIL'}  {title}"
        terminalreporter.write_line(f"{line}  ({detail})" if detail else line)
