from __future__ import annotations

import pytest

from synthdata import synthetic_mixed_catalog


@pytest.fixture
def mixed_catalog():
    return synthetic_mixed_catalog()
