import numpy as np

from spinforge.sampler import SparseIsingModel
from spinforge.topology import NodeRole, Topology


def toy_model(w: float = -1.0, beta: float = 1.0) -> SparseIsingModel:
    t = Topology(2, np.array([[0, 1]]), (NodeRole("hidden", 1),) * 2)
    return SparseIsingModel(t, np.array([w]), np.zeros(2), beta)


def random_graph(n: int, max_degree: int, rng: np.random.Generator, tries: int = None) -> np.ndarray:
    """Random simple graph with degree <= max_degree, built by rejection of candidate pairs."""
    deg = np.zeros(n, dtype=int)
    edges = set()
    for _ in range(tries or 3 * n * max_degree):
        i, j = sorted(rng.choice(n, 2, replace=False))
        if (i, j) in edges or deg[i] >= max_degree or deg[j] >= max_degree:
            continue
        if rng.random() < 0.5:
            edges.add((i, j))
            deg[i] += 1
            deg[j] += 1
    return np.array(sorted(edges), dtype=np.int64).reshape(-1, 2)


def random_model(n: int, max_degree: int, scale: float, rng: np.random.Generator,
                 beta: float = 1.0, bias_scale: float | None = None) -> SparseIsingModel:
    edges = random_graph(n, max_degree, rng)
    t = Topology(n, edges, (NodeRole("hidden", 1),) * n)
    bs = scale if bias_scale is None else bias_scale
    return SparseIsingModel(t, rng.uniform(-scale, scale, len(edges)), rng.uniform(-bs, bs, n), beta)
