import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from synth import make_desk_corpus  # noqa: E402


@pytest.fixture(scope="session")
def desk_corpus():
    return make_desk_corpus(n_train=2000, n_test=400, seed=11)


@pytest.fixture(scope="session")
def small_corpus():
    return make_desk_corpus(n_train=200, n_test=80, seed=5, name="desk-small")
