import os
import pathlib

import pytest

DATA = pathlib.Path(os.environ.get("TWS_TEST_DATA", pathlib.Path(__file__).parents[1] / "data"))


@pytest.fixture
def tiny_config_path():
    return DATA / "tiny_config.json"


@pytest.fixture
def tiny_config(tiny_config_path):
    return tiny_config_path.read_text()
