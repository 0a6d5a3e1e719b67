"""Brute-force matching oracles and greedy-optimal fixture builder for tests."""
import itertools

import numpy as np


def all_matchings(sim, tau):
    """Every one-to-one matching using only entries >= tau."""
    r, c = sim.shape
    allowed = [(i, j) for i in range(r) for j in range(c) if sim[i, j] >= tau]
    for size in range(min(r, c) + 1):
        for combo in itertools.combinations(allowed, size):
            rows = {i for i, _ in combo}
            cols = {j for _, j in combo}
            if len(rows) == size and len(cols) == size:
                yield combo


def max_card_then_weight(sim, tau):
    return set(max(all_matchings(sim, tau), key=lambda m: (len(m), sum(sim[i, j] for i, j in m))))


def lexicographic_max(sim, tau):
    """Matching whose descending weight sequence is lexicographically largest."""
    return set(max(all_matchings(sim, tau), key=lambda m: sorted((sim[i, j] for i, j in m), reverse=True)))


def greedy_optimal_fixture(rng, max_side=4, tau=0.5):
    """Block whose planted matching is both the greedy and the optimal answer.

    Planted entries lie in [0.6, 1] and strictly dominate every other entry of
    their row and column; all entries outside planted rows x planted columns
    are below ``tau``.
    """
    r, c = rng.integers(1, max_side + 1, size=2)
    size = int(rng.integers(0, min(r, c) + 1))
    rows = rng.choice(r, size, replace=False)
    cols = rng.choice(c, size, replace=False)
    vals = rng.uniform(0.6, 1.0, size)
    sim = rng.uniform(0.0, tau * 0.999, (r, c))
    row_best = {int(i): v for i, v in zip(rows, vals)}
    col_best = {int(j): v for j, v in zip(cols, vals)}
    for i in row_best:
        for j in col_best:
            cap = min(row_best[i], col_best[j])
            sim[i, j] = rng.uniform(0.0, cap * 0.999)
    for i, j, v in zip(rows, cols, vals):
        sim[i, j] = v
    return sim, {(int(i), int(j)) for i, j in zip(rows, cols)}


def random_graph_neighbors(rng, n, p):
    adj = rng.random((n, n)) < p
    np.fill_diagonal(adj, False)
    adj = adj | adj.T
    return [np.flatnonzero(adj[i]) for i in range(n)]
