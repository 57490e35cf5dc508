import pytest
import torch

from advpurify.data import SyntheticSpec, generate_synthetic

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def small_dataset():
    return generate_synthetic(SyntheticSpec(n_samples=400, seed=11))


def pytest_terminal_summary(terminalreporter):
    from test_acceptance import RESULTS

    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(RESULTS):
            terminalreporter.write_line(RESULTS[n])
