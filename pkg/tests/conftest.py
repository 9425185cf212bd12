import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from sgr.providers import MockProvider  # noqa: E402


def make_mock(dim=8, relation_dim=6, seed=7, **kwargs) -> MockProvider:
    return MockProvider(seed=seed, embedding_dim=dim, relation_dim=relation_dim, **kwargs)


@pytest.fixture
def mock_provider():
    return make_mock()
