import numpy as np
import pytest
from scipy import sparse

from cortex import CortexGraph


def random_spd(rng, n, ridge=0.5):
    A = rng.standard_normal((n, n))
    return A @ A.T / n + ridge * np.eye(n)


def ar_matrix(n, r):
    idx = np.arange(n)
    return r ** np.abs(np.subtract.outer(idx, idx))


def path_graph(n):
    """Grafo caminho 0-1-...-(n-1), sem faces."""
    edges = np.array([[i, i + 1] for i in range(n - 1)], dtype=np.int64).reshape(-1, 2)
    A = sparse.coo_matrix((np.ones(len(edges)), (edges[:, 0], edges[:, 1])), shape=(n, n))
    return CortexGraph(np.zeros((n, 3)), np.empty((0, 3), dtype=np.int64), edges, (A + A.T).tocsr())


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
