import numpy as np
import pytest

from panolabel import ClassCatalog


@pytest.fixture
def catalog():
    # 2 stuff + 2 thing classes keeps hand-checked cases small.
    return ClassCatalog(
        (
            (0, "road", False),
            (1, "sky", False),
            (2, "car", True),
            (3, "person", True),
        )
    )


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
