import pytest

from foundry import pipeline
from foundry.workload import preset

CRITERIA = {
    1: "end-to-end replay equivalence",
    2: "layout determinism",
    3: "template fraction",
    4: "construction-call reduction",
    5: "update vs build cost ordering",
    6: "grouping correctness",
    7: "failure fidelity",
    8: "rank sharing",
    9: "serialization performance and round trips",
    10: "no-warmup guarantee",
}

_outcomes = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion exercised by the test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    n = marker.args[0]
    if report.when == "call" or report.failed:
        prev = _outcomes.get(n, True)
        _outcomes[n] = prev and report.passed


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(CRITERIA):
        if n not in _outcomes:
            continue
        status = "PASS" if _outcomes[n] else "FAIL"
        terminalreporter.write_line(f"criterion {n:>2} {status}  {CRITERIA[n]}")


class SavedPreset:
    def __init__(self, name, saved, path):
        self.name = name
        self.saved = saved
        self.path = path
        self._refs = {}

    def archive(self):
        return pipeline.open_archive(self.path)

    def reference(self, rank=0, world=1):
        # dense workloads have no patches, so every rank expects the same traces
        key = (rank, world) if self.saved.patch_table else (0, 1)
        if key not in self._refs:
            self._refs[key] = pipeline.reference_traces(self.saved, *key)
        return self._refs[key]


_saved_cache = {}


@pytest.fixture(scope="session")
def saved_preset(tmp_path_factory):
    def get(name):
        if name not in _saved_cache:
            path = tmp_path_factory.mktemp(name) / "archive"
            saved = pipeline.save(preset(name), path)
            _saved_cache[name] = SavedPreset(name, saved, path)
        return _saved_cache[name]

    return get
