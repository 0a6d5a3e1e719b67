"""Pair-adaptive neighbourhood embeddings for re-ranking candidate pairs.

For a candidate pair (i, j) the first-order neighbourhoods are split into
potentially matched and unmatched neighbours under a one-to-one (at most)
constraint, each part is mean-aggregated, and the concatenation with the
node embedding goes through a shared two-layer encoder.  The truncated
cosine of the two sides is the neighbourhood similarity.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, NonFiniteError
from .fusion import _plateaued, node_similarity_matrix

log = logging.getLogger(__name__)


@dataclass
class NeighborhoodConfig:
    hidden: int = 512
    tau: float = 0.5
    negatives: int = 5
    candidates: int = 250
    lr: float = 1e-3
    epochs: int = 50
    batch_size: int = 256
    seed: int = 0
    min_delta: float = 1e-4
    window: int = 5

    def validate(self):
        if self.hidden < 1 or self.negatives < 1 or self.candidates < 1:
            raise ConfigError("hidden, negatives and candidates must be positive")
        if self.epochs < 0 or self.batch_size < 1 or self.lr <= 0:
            raise ConfigError("epochs >= 0, batch_size >= 1 and lr > 0 required")
        if not 0.0 <= self.tau <= 1.0:
            raise ConfigError(f"tau must lie in [0, 1], got {self.tau}")

    def to_dict(self):
        return asdict(self)


@dataclass(frozen=True)
class NeighborPartition:
    matched_src: tuple
    unmatched_src: tuple
    matched_tgt: tuple
    unmatched_tgt: tuple
    matching: tuple  # ((source neighbour, target neighbour), ...)


def greedy_matching(sim, tau):
    """Greedy one-to-one matching on a similarity block.

    Entries are visited in descending order (ties by row-major position) and
    accepted while both endpoints are free and the score is at least ``tau``.
    Returns ``[(row, col), ...]``.
    """
    sim = np.asarray(sim)
    if sim.size == 0:
        return []
    n_cols = sim.shape[1]
    flat = sim.ravel()
    order = np.argsort(-flat, kind="stable")
    used_r, used_c, out = set(), set(), []
    limit = min(sim.shape)
    for k in order:
        if flat[k] < tau:
            break
        r, c = divmod(int(k), n_cols)
        if r in used_r or c in used_c:
            continue
        used_r.add(r)
        used_c.add(c)
        out.append((r, c))
        if len(out) == limit:
            break
    return out


def _partition(ns, nt, sim, tau):
    pairs = greedy_matching(sim, tau)
    mr = {r for r, _ in pairs}
    mc = {c for _, c in pairs}
    return NeighborPartition(
        tuple(int(ns[r]) for r, _ in pairs),
        tuple(int(n) for k, n in enumerate(ns) if k not in mr),
        tuple(int(nt[c]) for _, c in pairs),
        tuple(int(n) for k, n in enumerate(nt) if k not in mc),
        tuple((int(ns[r]), int(nt[c])) for r, c in pairs),
    )


def match_neighbors(i, j, z_source, z_target, nbrs_source, nbrs_target, tau=0.5):
    """Partition the neighbourhoods of source user ``i`` and target user ``j``."""
    ns, nt = nbrs_source[i], nbrs_target[j]
    sim = node_similarity_matrix(z_source[ns], z_target[nt]) if len(ns) and len(nt) else np.zeros((len(ns), len(nt)))
    return _partition(ns, nt, sim, tau)


def aggregate(indices, z):
    """Mean of ``z`` over ``indices``; an empty set gives the zero vector."""
    indices = np.asarray(indices, dtype=np.int64)
    if not len(indices):
        return np.zeros(z.shape[1])
    return z[indices].mean(axis=0)


def pair_inputs(partition, i, j, z_source, z_target):
    """Encoder inputs ``z ⊕ h+ ⊕ h-`` for both sides of a candidate pair."""
    src = np.concatenate([z_source[i], aggregate(partition.matched_src, z_source),
                          aggregate(partition.unmatched_src, z_source)])
    tgt = np.concatenate([z_target[j], aggregate(partition.matched_tgt, z_target),
                          aggregate(partition.unmatched_tgt, z_target)])
    return src, tgt


class NeighborhoodEncoder:
    """Two-layer perceptron from ``3 d`` to ``d`` shared by both networks."""

    def __init__(self, dim, hidden, rng):
        self.dim = dim
        self.mlp = T.MLP2("enc_nei", 3 * dim, hidden, dim, rng)

    def params(self):
        return self.mlp.params()

    def __call__(self, inputs):
        return self.mlp(inputs)

    def load_arrays(self, arrays):
        for name, p in self.params().items():
            if name not in arrays or arrays[name].shape != p.shape:
                raise ContractError(f"checkpoint lacks a matching {name}")
            p.value[...] = arrays[name]


def neighborhood_embed(z, h_plus, h_minus, enc):
    """``ENC_nei(z ⊕ h+ ⊕ h-)`` as a Tensor (rows or a single vector)."""
    z, h_plus, h_minus = (T.constant(v) for v in (z, h_plus, h_minus))
    if not (z.shape == h_plus.shape == h_minus.shape) or z.shape[-1] != enc.dim:
        raise ContractError(f"neighbourhood inputs must all have dim {enc.dim}")
    return enc(T.concat([z, h_plus, h_minus], axis=-1))


def neighborhood_similarity(enc, src_inputs, tgt_inputs):
    """``cos+(h_i|j, h_j|i)`` for stacked encoder inputs, as a Tensor."""
    return T.cos_plus(enc(src_inputs), enc(tgt_inputs))


def total_similarity(r_node, r_nei, lam):
    """``(r_node + lam * r_nei) / (1 + lam)``."""
    if lam < 0:
        raise ConfigError(f"lambda must be non-negative, got {lam}")
    return (np.asarray(r_node) + lam * np.asarray(r_nei)) / (1.0 + lam)


class PairFeaturizer:
    """Caches neighbourhood partitions and encoder inputs per candidate pair.

    Node embeddings are frozen in this phase, so inputs never change.
    """

    def __init__(self, embeddings, nbrs_source, nbrs_target, tau):
        self.zs, self.zt = embeddings.source, embeddings.target
        self.nbrs_source, self.nbrs_target = nbrs_source, nbrs_target
        self.tau = tau
        self._rows = {}
        self._cache = {}

    def _row_block(self, i):
        block = self._rows.get(i)
        if block is None:
            ns = self.nbrs_source[i]
            block = node_similarity_matrix(self.zs[ns], self.zt) if len(ns) else np.zeros((0, len(self.zt)))
            self._rows[i] = block
        return block

    def partition(self, i, j):
        ns, nt = self.nbrs_source[i], self.nbrs_target[j]
        sim = self._row_block(i)[:, nt] if len(ns) and len(nt) else np.zeros((len(ns), len(nt)))
        return _partition(ns, nt, sim, self.tau)

    def inputs(self, rows, cols):
        src = np.empty((len(rows), 3 * self.zs.shape[1]))
        tgt = np.empty_like(src)
        for k, (i, j) in enumerate(zip(np.asarray(rows).tolist(), np.asarray(cols).tolist())):
            hit = self._cache.get((i, j))
            if hit is None:
                hit = pair_inputs(self.partition(i, j), i, j, self.zs, self.zt)
                self._cache[(i, j)] = hit
            src[k], tgt[k] = hit
        return src, tgt


@dataclass
class CandidateIndex:
    sources: np.ndarray  # (n,)
    targets: np.ndarray  # (n, C) sorted by descending r_node, ties by target index
    scores: np.ndarray  # (n, C)

    def row(self, i):
        k = int(np.searchsorted(self.sources, i))
        if k >= len(self.sources) or self.sources[k] != i:
            raise KeyError(i)
        return self.targets[k], self.scores[k]

    def save(self, path, source_users, target_users):
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            for s, ts, sc in zip(self.sources, self.targets, self.scores):
                for rank, (t, v) in enumerate(zip(ts, sc), 1):
                    fh.write(f"{source_users[s]}\t{rank}\t{target_users[t]}\t{v!r}\n")


def rank_order(scores):
    """Indices sorting ``scores`` descending, ties broken by smaller index."""
    return np.lexsort((np.arange(scores.shape[-1]), -scores))


def build_candidates(embeddings, sources, c):
    """Top-``c`` target users for each source user by node similarity."""
    sources = np.unique(np.asarray(sources, dtype=np.int64))
    c = min(c, embeddings.target.shape[0])
    sim = node_similarity_matrix(embeddings.source, embeddings.target, sources)
    targets = np.empty((len(sources), c), dtype=np.int64)
    scores = np.empty((len(sources), c))
    for k in range(len(sources)):
        top = rank_order(sim[k])[:c]
        targets[k], scores[k] = top, sim[k, top]
    return CandidateIndex(sources, targets, scores)


@dataclass
class NeighborhoodResult:
    encoder: NeighborhoodEncoder
    history: list  # (epoch, loss)
    steps: int


def train_neighborhood(train_pairs, embeddings, nbrs_source, nbrs_target, candidates, cfg,
                       featurizer=None):
    """Fit the neighbourhood encoder on training anchors with frozen node embeddings.

    Each anchor (i, a(i)) is a positive with target 1; ``cfg.negatives``
    negatives per positive are drawn uniformly from i's candidate list
    (excluding a(i)) with target 0.  The loss is the same squared error
    normalised by ``M = (K + 1) * #anchors``.
    """
    cfg.validate()
    train_pairs = np.asarray(train_pairs, dtype=np.int64).reshape(-1, 2)
    if not len(train_pairs):
        raise ContractError("neighbourhood training needs at least one training anchor")
    rng = np.random.default_rng(cfg.seed)
    dim = embeddings.source.shape[1]
    enc = NeighborhoodEncoder(dim, cfg.hidden, rng)
    params = enc.params()
    opt = T.Adam(params, lr=cfg.lr)
    feats = featurizer or PairFeaturizer(embeddings, nbrs_source, nbrs_target, cfg.tau)
    k = cfg.negatives
    m = (k + 1) * len(train_pairs)
    pools = []
    for i, a in train_pairs:
        cand, _ = candidates.row(int(i))
        pool = cand[cand != a]
        pools.append(pool if len(pool) else np.delete(np.arange(embeddings.target.shape[0]), a))
    history, totals = [], []
    n_iter = max(1, -(-len(train_pairs) // cfg.batch_size))

    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(train_pairs))
        epoch_loss = 0.0
        for sel in np.array_split(order, n_iter):
            if not len(sel):
                continue
            rows = train_pairs[sel, 0]
            cols = train_pairs[sel, 1]
            negs = np.stack([pools[s][rng.integers(len(pools[s]), size=k)] for s in sel])
            all_rows = np.concatenate([rows, np.repeat(rows, k)])
            all_cols = np.concatenate([cols, negs.ravel()])
            target = np.concatenate([np.ones(len(rows)), np.zeros(len(rows) * k)])
            src, tgt = feats.inputs(all_rows, all_cols)
            r = neighborhood_similarity(enc, src, tgt)
            loss = T.scale(T.squared_error(r, target), 1.0 / m)
            if not np.isfinite(loss.value):
                raise NonFiniteError(f"neighbourhood loss diverged at epoch {epoch}")
            T.backward(loss, params)
            opt.step()
            epoch_loss += float(loss.value)
        history.append((epoch, epoch_loss))
        totals.append(epoch_loss)
        if _plateaued(totals, cfg.window, cfg.min_delta):
            log.info("neighbourhood early stop at epoch %d", epoch)
            break
    return NeighborhoodResult(enc, history, opt.step_count)


def score_pairs(enc, featurizer, rows, cols, batch=4096):
    """Neighbourhood similarity for many candidate pairs (numpy array)."""
    rows, cols = np.asarray(rows), np.asarray(cols)
    out = np.empty(len(rows))
    for lo in range(0, len(rows), batch):
        src, tgt = featurizer.inputs(rows[lo:lo + batch], cols[lo:lo + batch])
        out[lo:lo + batch] = neighborhood_similarity(enc, src, tgt).value
    return out
