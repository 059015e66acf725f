import numpy as np
import pytest

from metamedseg.data import SliceDataset, Volume


def make_volume(dataset_id="toy", volume_id=0, depth=30, size=8, z=1, seed=0, present=None):
    """Tiny volume whose slice ``i`` carries the value ``i`` in its top-left pixel.

    ``present`` lists slices that get a non-empty mask (default: all).
    """
    rng = np.random.default_rng(seed)
    slices = rng.normal(size=(depth, size, size)).astype(np.float32)
    slices[:, 0, 0] = np.arange(depth)
    masks = np.zeros((depth, size, size), dtype=np.uint8)
    for i in (range(depth) if present is None else present):
        masks[i, 2:6, 2:6] = 1
    return Volume(dataset_id, volume_id, slices, masks, z)


def make_dataset(dataset_id="toy", n_volumes=3, depth=30, size=8, z=1, eligible=None):
    vols = [make_volume(dataset_id, v, depth, size, z, seed=v) for v in range(n_volumes)]
    elig = [np.arange(depth) if eligible is None else np.asarray(eligible) for _ in vols]
    return SliceDataset(dataset_id, dataset_id, z, vols, elig)


@pytest.fixture
def toy_dataset():
    return make_dataset()


# ---------------------------------------------------------------- acceptance reporting

_CRITERIA = {}
_NOTES = {}


def note(number, text):
    """Attach a measured value to a criterion's summary line."""
    _NOTES.setdefault(number, []).append(text)


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion check")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or (report.when != "call" and not report.failed):
        return
    number, title = marker.args
    _, ok, details = _CRITERIA.get(number, (title, True, []))
    _CRITERIA[number] = (title, ok and report.passed, details + [item.name])


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        title, ok, checks = _CRITERIA[number]
        terminalreporter.write_line(f"criterion {number}: {'PASS' if ok else 'FAIL'}  {title} ({len(checks)} checks)")
        for text in _NOTES.get(number, []):
            terminalreporter.write_line(f"    {text}")
