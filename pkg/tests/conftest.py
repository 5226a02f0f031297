import random

import pytest

from moldae.datagen import random_corpus


@pytest.fixture(scope="session")
def small_corpus():
    """300 random synthetic SMILES, session-cached."""
    return random_corpus(300, seed=11)


@pytest.fixture(scope="session")
def corpus_10k():
    """10k synthetic SMILES used by fidelity scans."""
    return random_corpus(10_000, seed=23)


@pytest.fixture()
def rng():
    return random.Random(1234)
