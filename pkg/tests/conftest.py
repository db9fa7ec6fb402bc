import pytest

from vlbind.backend import make_synthetic_backend
from vlbind.scenegen import GeneratorConfig, generate_dataset


@pytest.fixture(scope="session")
def backend():
    return make_synthetic_backend()


@pytest.fixture(scope="session")
def ds2():
    return generate_dataset(GeneratorConfig("2x2", k=1, seed=0))


@pytest.fixture(scope="session")
def ds3():
    return generate_dataset(GeneratorConfig("3x3", k=1, seed=0))


@pytest.fixture(scope="session")
def ds3_low():
    return generate_dataset(GeneratorConfig("3x3", entropy="low", k=1, seed=1))
