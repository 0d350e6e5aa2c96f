from __future__ import annotations

import numpy as np
import pytest
from hypothesis import settings

from glonerf.dataset import load_dataset
from glonerf.synthetic import generate_synthetic

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_corpus(tmp_path_factory):
    """Six 24x24 synthetic objects with their paired eval views."""
    from glonerf.synthetic import SyntheticSceneSpec

    root = tmp_path_factory.mktemp("corpus") / "data"
    generate_synthetic(root, 6, seed=3, spec=SyntheticSceneSpec(image_size=24))
    return root


@pytest.fixture(scope="session")
def small_dataset(small_corpus):
    return load_dataset(small_corpus)


def pytest_terminal_summary(terminalreporter):
    mod = __import__("sys").modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for n in sorted(results):
            terminalreporter.write_line(results[n])
