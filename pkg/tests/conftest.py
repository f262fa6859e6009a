import pytest
from hypothesis import HealthCheck, settings

from alquery.core import save_dataset
from alquery.synthgen import generate_dataset
from helpers import ACCEPTANCE, tiny_spec

settings.register_profile("default", max_examples=50, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture(scope="session")
def tiny_dataset():
    return generate_dataset(tiny_spec())


@pytest.fixture(scope="session")
def tiny_dataset_dir(tmp_path_factory, tiny_dataset):
    return save_dataset(tiny_dataset, tmp_path_factory.mktemp("tiny") / "data")


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[k])
