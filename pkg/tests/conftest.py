import pytest
import torch

from promptus.data import generate_synthetic_dataset
from promptus.model import build_model, toy_config

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def synth_small(tmp_path_factory):
    out = tmp_path_factory.mktemp("synth_small")
    records = generate_synthetic_dataset(
        {"positions": {"breast": 12, "cardiac": 8}, "image_size": 64, "seed": 3, "dataset_id": "toyset"}, out
    )
    return out, records


@pytest.fixture
def toy_model():
    return build_model(toy_config(), seed=0)


def pytest_terminal_summary(terminalreporter):
    from helpers import ACCEPTANCE_LINES

    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda entry: int(entry.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
