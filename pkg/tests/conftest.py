import pytest

from rainbowlab import diffcore as dc


@pytest.fixture(autouse=True)
def default_precision():
    dc.set_precision(64)
    yield
    dc.set_precision(64)
