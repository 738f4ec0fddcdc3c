import numpy as np
import pytest

from attnconv.data import write_ppm


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def make_tree(root, classes=("a", "b"), per_class=3, size=8, splits=("training",), seed=0):
    g = np.random.default_rng(seed)
    for split in splits:
        for c, name in enumerate(classes):
            d = root / split / name
            d.mkdir(parents=True, exist_ok=True)
            for i in range(per_class):
                img = np.full((3, size, size), 0.1, dtype=np.float32)
                img[c % 3] = 0.9
                img += g.uniform(0, 0.05, img.shape).astype(np.float32)
                write_ppm(d / f"{i:03d}.ppm", img)
    return root


@pytest.fixture
def fixture_tree(tmp_path):
    return make_tree(tmp_path / "ds")


# -- acceptance reporting ---------------------------------------------------------

_criteria: dict[int, tuple[str, bool, str, float]] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or report.when == "teardown" or (report.when == "setup" and report.passed):
        return
    number, title = mark.args
    detail = dict(item.user_properties).get("detail", "")
    _criteria[number] = (title, report.passed, detail, report.duration)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        title, passed, detail, secs = _criteria[number]
        line = f"{'PASS' if passed else 'FAIL'} [{number:2d}] {title} ({secs:.1f}s)"
        terminalreporter.write_line(line + (f": {detail}" if detail else ""))
