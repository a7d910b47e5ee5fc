import pytest

from fleet_fixture import standard_servers
from mcpforge.mockbed import MockFleet


@pytest.fixture(scope="session")
def fleet():
    with MockFleet(standard_servers()) as f:
        yield f


@pytest.fixture()
def servers():
    return standard_servers()
