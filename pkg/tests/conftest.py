import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from ensemble_patch.detectors import make_toy_detector  # noqa: E402
from ensemble_patch.synthetic import make_dataset  # noqa: E402

TOY_INI = """\
[run]
seed = 0
output = out

[dataset]
images = ds/images
labels = ds/labels

[train]
epochs = 1
batch_size = 4
patch_size = 16,16

[adapter.a]
kind = toy
seed = 1
person_gain = 10
inhibit_angle = 150

[adapter.b]
kind = toy
seed = 2
inhibit_angle = 270
"""


@pytest.fixture
def toy_pair():
    a = make_toy_detector(seed=1, person_gain=10.0, inhibit_angle=150)
    b = make_toy_detector(seed=2, person_gain=1.0, inhibit_angle=270)
    return a, b


@pytest.fixture
def tiny_dataset():
    return make_dataset(6, seed=3)


@pytest.fixture
def toy_config(tmp_path, tiny_dataset):
    from ensemble_patch.data import write_dataset
    write_dataset(tiny_dataset, tmp_path / "ds")
    path = tmp_path / "toy.ini"
    path.write_text(TOY_INI)
    return path


_CRITERIA = {}


class _Criterion:
    def __init__(self, number, title):
        self.number, self.title, self.detail = number, title, ""

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        ok = exc_type is None
        if not ok and not self.detail:
            self.detail = f"{exc_type.__name__}: {exc}".splitlines()[0][:160]
        _CRITERIA[self.number] = (self.title, ok, self.detail)
        return False


@pytest.fixture
def criterion():
    """``with criterion(n, title) as c: ...`` records a pass/fail line for the summary."""
    return _Criterion


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        title, ok, detail = _CRITERIA[n]
        line = f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {title}"
        terminalreporter.write_line(line + (f"  ({detail})" if detail else ""))
