import numpy as np
import pytest

from adaptany.benchmark import make_procedural_manifest

CATEGORIES = ["alpha", "beta", "gamma", "delta"]


@pytest.fixture(scope="session")
def bench_root(tmp_path_factory):
    return tmp_path_factory.mktemp("bench")


@pytest.fixture(scope="session")
def small_source(bench_root):
    """Tiny labeled synthetic-domain manifest (flat style)."""
    return make_procedural_manifest("flat", CATEGORIES, 12,
                                    bench_root / "src", 1,
                                    domain_tag="synthetic")


@pytest.fixture(scope="session")
def small_target(bench_root):
    """Tiny labeled target-domain manifest (textured style)."""
    return make_procedural_manifest("textured", CATEGORIES, 8,
                                    bench_root / "tgt", 2,
                                    domain_tag="target")


@pytest.fixture()
def rand_images():
    return np.random.default_rng(0).random((6, 16, 16, 3))
