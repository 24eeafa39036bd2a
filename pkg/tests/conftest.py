import pytest
import torch

from smvcenet.data import FoldSpec, generate_synthetic_dataset

torch.set_num_threads(1)
torch.use_deterministic_algorithms(True)


@pytest.fixture(scope="session")
def synth_root(tmp_path_factory):
    root = tmp_path_factory.mktemp("synthA")
    generate_synthetic_dataset(root, 48, 64, 4, seed=0)
    return root


@pytest.fixture(scope="session")
def synth(synth_root):
    from smvcenet.data import load_dataset
    return load_dataset(synth_root)


@pytest.fixture
def fold4():
    return FoldSpec(0, {3, 4}, {1, 2}, 4)


ACCEPTANCE_LINES = {}


def record_criterion(number: int, passed: bool, detail: str) -> bool:
    """Store one acceptance line; printed now and again in the terminal summary."""
    line = f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES[number] = line
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for number in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[number])
