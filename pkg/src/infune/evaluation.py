"""Ranking evaluation with hit-precision@k."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ContractError
from .neighborhood import rank_order, total_similarity

RESULT_FIELDS = ("variant", "eta", "lambda", "seed", "hit_precision", "n_test")


def h_score(position, k=30):
    """Per-user score ``(k - (hit - 1)) / k`` for a hit inside the top k, else 0."""
    if k < 1:
        raise ConfigError("k must be at least 1")
    if position is None or position < 1 or position > k:
        return 0.0
    return (k - (position - 1)) / k


def hit_precision(positions, k=30):
    """Mean ``h_score`` over test users; ``None`` marks a miss."""
    positions = list(positions)
    if not positions:
        raise ContractError("hit precision needs at least one test user")
    return sum(h_score(p, k) for p in positions) / len(positions)


def hit_position(scores, true_col):
    """1-based rank of ``true_col`` under descending scores, ties to the smaller index."""
    scores = np.asarray(scores)
    s = scores[true_col]
    idx = np.arange(len(scores))
    return int(1 + np.sum(scores > s) + np.sum((scores == s) & (idx < true_col)))


@dataclass
class RankedUser:
    source: int
    true_target: int
    hit: int | None  # position within the top k, None on a miss
    top: list  # [(target, r_node, r_nei, r_total), ...]


@dataclass
class ScoreReport:
    users: list
    k: int
    hit_precision: float
    meta: dict = field(default_factory=dict)

    def write_detail(self, path, source_users=None, target_users=None):
        def name(users, i):
            return users[i] if users is not None else i

        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["source_id", "hit_position", "top1_target", "top1_score"])
            for u in self.users:
                top = u.top[0] if u.top else None
                w.writerow([
                    name(source_users, u.source),
                    "" if u.hit is None else u.hit,
                    "" if top is None else name(target_users, top[0]),
                    "" if top is None else repr(float(top[3])),
                ])


def rank_candidates(test_pairs, node_scores, k=30, c=250, lam=0.0, nei_scorer=None):
    """Rank every target for each test source user and score the hits.

    ``node_scores[n]`` holds ``r_node`` of test user ``n`` against all
    targets.  With ``lam > 0`` the top-``c`` candidates by ``r_node`` are
    re-scored with ``r_total`` using ``nei_scorer(rows, cols)``; the other
    targets keep ``r_node / (1 + lam)`` (their neighbourhood term is taken
    as zero) and the union is ranked.
    """
    test_pairs = np.asarray(test_pairs, dtype=np.int64).reshape(-1, 2)
    node_scores = np.asarray(node_scores, dtype=np.float64)
    if node_scores.shape[0] != len(test_pairs):
        raise ContractError("node_scores must have one row per test pair")
    if lam < 0:
        raise ConfigError(f"lambda must be non-negative, got {lam}")
    use_nei = lam > 0
    if use_nei and nei_scorer is None:
        raise ContractError("lambda > 0 needs a neighbourhood scorer")
    n_tgt = node_scores.shape[1]
    c = min(c, n_tgt)

    nei_full = np.zeros_like(node_scores)
    if use_nei:
        cands = np.stack([rank_order(row)[:c] for row in node_scores]) if len(test_pairs) else np.zeros((0, c), int)
        rows = np.repeat(test_pairs[:, 0], c)
        r_nei = np.asarray(nei_scorer(rows, cands.ravel())).reshape(len(test_pairs), c)
        np.put_along_axis(nei_full, cands, r_nei, axis=1)
        total = total_similarity(node_scores, nei_full, lam)
    else:
        total = node_scores

    users, positions = [], []
    for n, (i, t) in enumerate(test_pairs):
        order = rank_order(total[n])
        pos = hit_position(total[n], t)
        hit = pos if pos <= k else None
        top = [(int(j), float(node_scores[n, j]), float(nei_full[n, j]), float(total[n, j])) for j in order[:k]]
        users.append(RankedUser(int(i), int(t), hit, top))
        positions.append(hit)
    return ScoreReport(users, k, hit_precision(positions, k), {"lambda": lam, "c": c})


def expected_random_hit_precision(n_targets, k=30):
    """Closed-form expectation for a uniformly random ranking."""
    k_eff = min(k, n_targets)
    return sum((k - p + 1) / k for p in range(1, k_eff + 1)) / n_targets


def write_results(path, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=RESULT_FIELDS, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({f: (repr(r[f]) if isinstance(r[f], float) else r[f]) for f in RESULT_FIELDS})


def read_results(path):
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def summarize(rows, by=("variant", "eta", "lambda")):
    """Mean and standard deviation of hit precision grouped over seeds."""
    groups = {}
    for r in rows:
        key = tuple(r[b] for b in by)
        groups.setdefault(key, []).append(float(r["hit_precision"]))
    return {key: (float(np.mean(v)), float(np.std(v)), len(v)) for key, v in groups.items()}
