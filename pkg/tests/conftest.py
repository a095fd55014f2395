import numpy as np
import pytest
import torch

from synthbalance.data import ImageTensor, LabelledDataset, LabelledSample


@pytest.fixture(autouse=True)
def _deterministic_threads():
    torch.set_num_threads(1)
    yield


def make_dataset(n_benign: int, n_malignant: int, side: int = 8, seed: int = 0, prefix: str = "s") -> LabelledDataset:
    rng = np.random.default_rng(seed)
    samples = []
    for label, n in ((0, n_benign), (1, n_malignant)):
        for i in range(n):
            img = ImageTensor(rng.uniform(0, 255, size=(side, side, 3)), "raw_0_255")
            samples.append(LabelledSample(f"{prefix}{label}_{i:04d}", img, label))
    return LabelledDataset(tuple(samples))


_ACCEPTANCE_KEY = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_ACCEPTANCE_KEY] = []


@pytest.fixture
def acceptance(request):
    """Record one pass/fail line per acceptance criterion."""
    lines = request.config.stash[_ACCEPTANCE_KEY]

    def record(number: int, title: str, passed: bool, detail: str = "") -> None:
        line = f"criterion {number:>2} {'PASS' if passed else 'FAIL'}  {title}" + (f"  ({detail})" if detail else "")
        lines.append(line)
        print(line)
        assert passed, line

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_ACCEPTANCE_KEY, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
