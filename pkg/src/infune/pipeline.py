"""End-to-end runs: grounds, fusion, neighbourhood enhancement, ranking."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import ground as G
from .config import derive_seed, parse_variant
from .dataset import TRAIN, split_anchors
from .errors import ContractError
from .evaluation import rank_candidates
from .fusion import node_similarity_matrix, train_fusion
from .neighborhood import PairFeaturizer, build_candidates, score_pairs, train_neighborhood

log = logging.getLogger(__name__)


@dataclass
class PairData:
    source: object
    target: object
    anchors: object  # unsplit AnchorSet

    def __post_init__(self):
        self.nbrs_source = self.source.neighbors()
        self.nbrs_target = self.target.neighbors()


def static_grounds(data, theta):
    """Grounds that do not depend on the anchor split."""
    return {
        "structure_source": G.structure_ground(data.source, theta),
        "structure_target": G.structure_ground(data.target, theta),
        "profile": G.profile_ground(data.source, data.target, theta),
        "content": G.content_ground(data.source, data.target, theta),
    }


def split_for(data, eta, seed):
    anchors = split_anchors(data.anchors, eta, derive_seed(seed, "split", eta))
    train = anchors.indices(data.source, data.target, TRAIN)
    test = anchors.indices(data.source, data.target, "test")
    return anchors, train, test


@dataclass
class TrainedRun:
    fusion: object
    neighborhood: object  # None when enhancement is off
    featurizer: object
    train_pairs: np.ndarray
    test_pairs: np.ndarray


def train_run(data, grounds, cfg, features, eta, seed, enhance=True):
    """Train fusion (and optionally enhancement) for one variant/eta/seed cell."""
    _, train, test = split_for(data, eta, seed)
    grounds = dict(grounds)
    grounds["label"] = G.label_ground(train, data.source.n_users, data.target.n_users, cfg.theta)
    fusion = train_fusion(grounds, cfg.train_config(features, derive_seed(seed, "fusion", eta)),
                          data.source.n_users, data.target.n_users)
    nei = feats = None
    if enhance:
        ncfg = cfg.nei_config(derive_seed(seed, "neighborhood", eta))
        feats = PairFeaturizer(fusion.embeddings, data.nbrs_source, data.nbrs_target, ncfg.tau)
        cand = build_candidates(fusion.embeddings, train[:, 0], ncfg.candidates)
        nei = train_neighborhood(train, fusion.embeddings, data.nbrs_source, data.nbrs_target, cand, ncfg,
                                 featurizer=feats)
    return TrainedRun(fusion, nei, feats, train, test)


def evaluate_run(run, cfg, lam, bidirectional=False):
    """Score the test anchors; returns a :class:`ScoreReport` (forward direction)."""
    emb = run.fusion.embeddings
    scorer = None
    if lam > 0:
        if run.neighborhood is None:
            raise ContractError("lambda > 0 needs a trained neighbourhood encoder")
        enc = run.neighborhood.encoder
        scorer = lambda rows, cols: score_pairs(enc, run.featurizer, rows, cols)  # noqa: E731
    node = node_similarity_matrix(emb.source, emb.target, run.test_pairs[:, 0])
    report = rank_candidates(run.test_pairs, node, cfg.k, cfg.candidates, lam, scorer)
    if bidirectional:
        rev_pairs = run.test_pairs[:, ::-1]
        rev_node = node_similarity_matrix(emb.target, emb.source, rev_pairs[:, 0])
        rev_scorer = None if scorer is None else (lambda rows, cols: scorer(cols, rows))
        rev = rank_candidates(rev_pairs, rev_node, cfg.k, cfg.candidates, lam, rev_scorer)
        report.meta["forward"] = report.hit_precision
        report.meta["reverse"] = rev.hit_precision
        report.hit_precision = (report.hit_precision + rev.hit_precision) / 2
    return report


def run_experiment_grid(data, cfg, variants=None, etas=None, lambdas=None, seeds=None, grounds=None,
                        progress=None):
    """Full factorial runs; returns one result row per (variant, eta, lambda, seed).

    A ``-ne`` variant suffix restricts that variant to ``lambda = 0``.
    """
    variants = variants if variants is not None else cfg.grid_variants.split(",")
    etas = etas if etas is not None else cfg.etas()
    lambdas = lambdas if lambdas is not None else cfg.lambdas()
    seeds = seeds if seeds is not None else cfg.seeds()
    parsed = [(v, *parse_variant(v)) for v in variants]
    if grounds is None:
        grounds = static_grounds(data, cfg.theta)
    rows = []
    for name, features, ne in parsed:
        lams = [lam for lam in lambdas if ne or lam == 0] or [0.0]
        for eta in etas:
            for seed in seeds:
                run = train_run(data, grounds, cfg, features, eta, seed, enhance=any(lam > 0 for lam in lams))
                for lam in lams:
                    rep = evaluate_run(run, cfg, lam, cfg.bidirectional)
                    row = {"variant": name, "eta": float(eta), "lambda": float(lam), "seed": int(seed),
                           "hit_precision": float(rep.hit_precision), "n_test": len(run.test_pairs)}
                    rows.append(row)
                    if progress:
                        progress(row)
    return rows
