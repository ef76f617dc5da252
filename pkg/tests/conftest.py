import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from hiergibbs.model import ModelInstance, ns3, s3, simulate_data, weakly_symmetric
from hiergibbs.tree import build_tree

settings.register_profile(
    "default",
    max_examples=40,
    deadline=None,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


def log_uniform(rng, lo=-3.0, hi=3.0, size=None):
    return np.exp(rng.uniform(lo, hi, size))


def random_s3(rng, max_dim=4, data=True):
    I, J, K = rng.integers(1, max_dim + 1, 3)
    a, b, e = log_uniform(rng, size=3)
    m = s3(int(I), int(J), int(K), a, b, e)
    return simulate_data(m, 0.0, int(rng.integers(2**32))) if data else m


def random_ns3(rng, max_groups=4, max_cells=4, max_k=6):
    I = int(rng.integers(1, max_groups + 1))
    J = rng.integers(1, max_cells + 1, I)
    sa = log_uniform(rng)
    sb = log_uniform(rng, size=I)
    se = [log_uniform(rng, size=j) for j in J]
    K = [rng.integers(1, max_k + 1, j) for j in J]
    return ns3(sa, sb, se, K)


def random_tree(rng, depth, max_children=3):
    """Unbalanced tree with all leaves at ``depth - 1``."""
    branching = []
    width = 1
    for _ in range(depth - 1):
        counts = [int(c) for c in rng.integers(1, max_children + 1, width)]
        branching.append(counts)
        width = sum(counts)
    return build_tree(branching)


def random_weakly_symmetric(rng, depth=4, max_children=3):
    tree = random_tree(rng, depth, max_children)
    prec = log_uniform(rng, -2, 2, depth - 1)
    return weakly_symmetric(tree, prec, float(log_uniform(rng, -2, 2)), int(rng.integers(1, 4)))


def random_node_model(rng, depth=3, max_children=3):
    """Fully heterogeneous precisions and replicate counts on a random tree."""
    tree = random_tree(rng, depth, max_children)
    tau = np.zeros(tree.n_nodes)
    tau[1:] = log_uniform(rng, -2, 2, tree.n_nodes - 1)
    m = len(tree.leaves)
    return ModelInstance(tree, tau, log_uniform(rng, -2, 2, m), rng.integers(1, 5, m))


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def pytest_terminal_summary(terminalreporter):
    import sys

    module = sys.modules.get("test_acceptance")
    results = getattr(module, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for n in sorted(results):
            terminalreporter.write_line(results[n])
