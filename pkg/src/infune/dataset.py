"""Paired social networks, anchor links, file I/O and a synthetic generator."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, ContractError, DataFormatError

log = logging.getLogger(__name__)

TRAIN, TEST = "train", "test"


@dataclass(frozen=True)
class SocialNetwork:
    users: tuple
    edges: np.ndarray  # (E, 2) int64 internal ids, directed src -> dst
    screen_names: tuple
    documents: tuple  # one token tuple per user

    def __post_init__(self):
        if len(set(self.users)) != len(self.users):
            raise ContractError("user ids must be unique")
        n = len(self.users)
        if len(self.screen_names) != n or len(self.documents) != n:
            raise ContractError("screen_names/documents must have one entry per user")
        edges = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        if edges.size and (edges.min() < 0 or edges.max() >= n):
            raise ContractError("edge endpoint out of range")
        object.__setattr__(self, "edges", edges)

    @property
    def n_users(self):
        return len(self.users)

    @property
    def n_edges(self):
        return len(self.edges)

    def index(self):
        return {u: k for k, u in enumerate(self.users)}

    def out_neighbors(self):
        out = [[] for _ in range(self.n_users)]
        for s, d in self.edges:
            out[s].append(int(d))
        return out

    def neighbors(self):
        """First-order neighbours ignoring direction, as sorted index arrays."""
        nb = [set() for _ in range(self.n_users)]
        for s, d in self.edges:
            nb[s].add(int(d))
            nb[d].add(int(s))
        return [np.array(sorted(x), dtype=np.int64) for x in nb]

    def in_degree(self):
        return np.bincount(self.edges[:, 1], minlength=self.n_users) if self.n_edges else np.zeros(self.n_users, int)


def make_network(users, edges=(), screen_names=None, documents=None):
    """Build a network from user ids and ``(src_id, dst_id)`` pairs.

    Self-loops and duplicate edges are dropped.
    """
    users = tuple(users)
    idx = {u: k for k, u in enumerate(users)}
    seen, kept = set(), []
    for s, d in edges:
        a, b = idx[s], idx[d]
        if a == b or (a, b) in seen:
            continue
        seen.add((a, b))
        kept.append((a, b))
    names = tuple(screen_names) if screen_names is not None else ("",) * len(users)
    docs = tuple(tuple(d) for d in documents) if documents is not None else ((),) * len(users)
    return SocialNetwork(users, np.array(kept, dtype=np.int64).reshape(-1, 2), names, docs)


@dataclass
class AnchorSet:
    pairs: list  # (source user id, target user id)
    split: list = field(default_factory=list)  # parallel tags, TRAIN/TEST; empty = unsplit

    def __post_init__(self):
        src = [a for a, _ in self.pairs]
        tgt = [b for _, b in self.pairs]
        if len(set(src)) != len(src) or len(set(tgt)) != len(tgt):
            raise ContractError("anchor links must be one-to-one")
        if self.split and len(self.split) != len(self.pairs):
            raise ContractError("split tags must parallel the anchor pairs")

    def __len__(self):
        return len(self.pairs)

    def subset(self, tag):
        return [p for p, t in zip(self.pairs, self.split) if t == tag]

    @property
    def train(self):
        return self.subset(TRAIN)

    @property
    def test(self):
        return self.subset(TEST)

    def indices(self, source, target, tag=None):
        """Anchor pairs as an (n, 2) array of internal indices."""
        pairs = self.pairs if tag is None else self.subset(tag)
        si, ti = source.index(), target.index()
        try:
            out = [(si[a], ti[b]) for a, b in pairs]
        except KeyError as exc:
            raise ContractError(f"anchor references unknown user {exc.args[0]!r}") from None
        return np.array(out, dtype=np.int64).reshape(-1, 2)


def split_anchors(anchors, eta, seed):
    """Tag ``ceil(eta * n)`` anchors as train and the rest as test."""
    if not 0 < eta < 1:
        raise ConfigError(f"eta must lie in (0, 1), got {eta}")
    n = len(anchors)
    n_train = math.ceil(round(eta * n, 9))
    order = np.random.default_rng(seed).permutation(n)
    tags = [TEST] * n
    for k in order[:n_train]:
        tags[k] = TRAIN
    return AnchorSet(list(anchors.pairs), tags)


# ------------------------------------------------------------------ file I/O


def load_network(edges_path, profiles_path=None, contents_path=None):
    """Read one network from ``edges.tsv`` and optional profile/content files.

    Users are numbered in order of first appearance (profiles, then edges,
    then contents), so a saved network reloads in the same order.  Missing
    screen names become empty strings.
    """
    order, idx = [], {}

    def intern(u):
        if u not in idx:
            idx[u] = len(order)
            order.append(u)
        return idx[u]

    names = {}
    if profiles_path is not None and Path(profiles_path).exists():
        with open(profiles_path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                line = line.rstrip("\n")
                if not line:
                    continue
                parts = line.split("\t")
                if len(parts) != 2 or not parts[0]:
                    raise DataFormatError(f"{profiles_path}:{lineno}: expected 'user<TAB>name', got {line!r}")
                intern(parts[0])
                names[parts[0]] = parts[1]

    edges, seen = [], set()
    with open(edges_path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            parts = line.split("\t") if "\t" in line else line.split()
            if len(parts) != 2 or not parts[0] or not parts[1]:
                raise DataFormatError(f"{edges_path}:{lineno}: expected 'src<TAB>dst', got {line!r}")
            a, b = intern(parts[0]), intern(parts[1])
            if a == b:
                log.warning("%s:%d: dropping self-loop on %r", edges_path, lineno, parts[0])
                continue
            if (a, b) not in seen:
                seen.add((a, b))
                edges.append((a, b))

    if names:
        dangling = [u for u in order if u not in names]
        if dangling:
            log.warning("%d users in %s have no profile entry; names imputed as ''", len(dangling), profiles_path)

    docs = {}
    if contents_path is not None and Path(contents_path).exists():
        with open(contents_path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                if not line.strip():
                    continue
                try:
                    rec = json.loads(line)
                    user, tokens = str(rec["user"]), rec["tokens"]
                except (ValueError, KeyError, TypeError) as exc:
                    raise DataFormatError(f"{contents_path}:{lineno}: {exc}") from None
                if not isinstance(tokens, list):
                    raise DataFormatError(f"{contents_path}:{lineno}: 'tokens' must be a list")
                intern(user)
                docs[user] = tuple(str(t) for t in tokens)

    return SocialNetwork(
        tuple(order),
        np.array(edges, dtype=np.int64).reshape(-1, 2),
        tuple(names.get(u, "") for u in order),
        tuple(docs.get(u, ()) for u in order),
    )


def save_network(net, directory):
    """Write ``edges.tsv``, ``profiles.tsv`` and ``contents.jsonl`` into ``directory``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    users = net.users
    with open(directory / "edges.tsv", "w", encoding="utf-8", newline="\n") as fh:
        for s, d in net.edges:
            fh.write(f"{users[s]}\t{users[d]}\n")
    with open(directory / "profiles.tsv", "w", encoding="utf-8", newline="\n") as fh:
        for u, name in zip(users, net.screen_names):
            fh.write(f"{u}\t{name}\n")
    with open(directory / "contents.jsonl", "w", encoding="utf-8", newline="\n") as fh:
        for u, doc in zip(users, net.documents):
            fh.write(json.dumps({"user": u, "tokens": list(doc)}, ensure_ascii=False) + "\n")
    return [directory / "edges.tsv", directory / "profiles.tsv", directory / "contents.jsonl"]


def load_network_dir(directory):
    directory = Path(directory)
    return load_network(directory / "edges.tsv", directory / "profiles.tsv", directory / "contents.jsonl")


def save_anchors(anchors, path):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for a, b in anchors.pairs:
            fh.write(f"{a}\t{b}\n")


def load_anchors(path):
    pairs = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise DataFormatError(f"{path}:{lineno}: expected 'source<TAB>target', got {line!r}")
            pairs.append((parts[0], parts[1]))
    return AnchorSet(pairs)


# ------------------------------------------------------------ synthetic data

ALPHABET = "abcdefghijklmnopqrstuvwxyz0123456789"
SYLLABLES = (
    "an", "bo", "chen", "da", "el", "fei", "gu", "hua", "jin", "ka", "li", "ming",
    "na", "ou", "pei", "qi", "ren", "sun", "tao", "wei", "xi", "yu", "zh", "lo",
    "mi", "ra", "to", "ve", "ya", "zo",
)


@dataclass(frozen=True)
class SynthConfig:
    n_users: int = 500
    attach_m: int = 4
    reciprocity: float = 0.3
    edge_keep_prob: float = 0.8
    name_noise: float = 0.2
    name_drop_prob: float = 0.25
    name_syllables: int = 2
    vocab_size: int = 600
    topics: int = 20
    topic_concentration: float = 0.05
    user_topic_concentration: float = 0.3
    doc_length: int = 40
    content_drift: float = 0.3
    seed: int = 0

    def validate(self):
        if self.n_users < 1:
            raise ConfigError("n_users must be at least 1")
        if self.attach_m < 1:
            raise ConfigError("attach_m must be at least 1")
        for name in ("reciprocity", "edge_keep_prob", "name_noise", "name_drop_prob", "content_drift"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1], got {v}")
        if self.vocab_size < 1 or self.topics < 1 or self.doc_length < 0:
            raise ConfigError("vocab_size and topics must be positive, doc_length non-negative")

    def to_dict(self):
        return asdict(self)


def _preferential_attachment(n, m, reciprocity, rng):
    """Directed graph where each new node follows ``m`` nodes chosen by in-degree + 1."""
    edges = set()
    indeg = np.zeros(n)
    for t in range(1, n):
        k = min(m, t)
        w = indeg[:t] + 1.0
        targets = rng.choice(t, size=k, replace=False, p=w / w.sum())
        for d in targets:
            edges.add((t, int(d)))
            indeg[d] += 1
            if rng.random() < reciprocity:
                edges.add((int(d), t))
                indeg[t] += 1
    return sorted(edges)


def _perturb_name(name, p, rng):
    if p <= 0:
        return name
    out = []
    for ch in name:
        u = rng.random()
        if u < p / 3:
            out.append(ALPHABET[rng.integers(len(ALPHABET))])
        elif u < 2 * p / 3:
            out.append(ch)
            out.append(ALPHABET[rng.integers(len(ALPHABET))])
        elif u < p:
            continue
        else:
            out.append(ch)
    return "".join(out)


def generate_pair(cfg):
    """Sample a base user population and two noisy views of it.

    Returns ``(source, target, anchors)``; every user is anchored.  Target
    users are relabelled by a random permutation so that internal order
    carries no alignment signal.
    """
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    n = cfg.n_users

    base_edges = _preferential_attachment(n, cfg.attach_m, cfg.reciprocity, rng)

    base_names = []
    for _ in range(n):
        k = cfg.name_syllables + int(rng.integers(0, 2))
        name = "".join(SYLLABLES[rng.integers(len(SYLLABLES))] for _ in range(k))
        if rng.random() < 0.5:
            name += str(int(rng.integers(0, 100)))
        base_names.append(name)

    topic_word = rng.dirichlet(np.full(cfg.vocab_size, cfg.topic_concentration), size=cfg.topics)
    user_topics = rng.dirichlet(np.full(cfg.topics, cfg.user_topic_concentration), size=n)
    noise_topics = rng.dirichlet(np.full(cfg.topics, cfg.user_topic_concentration), size=n)
    vocab = [f"w{k}" for k in range(cfg.vocab_size)]

    src_docs, tgt_docs = [], []
    for u in range(n):
        words = _sample_words(user_topics[u], topic_word, cfg.doc_length, rng)
        drift = rng.random(cfg.doc_length) < cfg.content_drift
        replacement = _sample_words(noise_topics[u], topic_word, cfg.doc_length, rng)
        src_docs.append(tuple(vocab[w] for w in words))
        tgt_docs.append(tuple(vocab[r if d else w] for w, r, d in zip(words, replacement, drift)))

    src_keep = rng.random(len(base_edges)) < cfg.edge_keep_prob
    tgt_keep = rng.random(len(base_edges)) < cfg.edge_keep_prob

    src_names = [("" if rng.random() < cfg.name_drop_prob else nm) for nm in base_names]
    tgt_names = [("" if rng.random() < cfg.name_drop_prob else _perturb_name(nm, cfg.name_noise, rng))
                 for nm in base_names]

    perm = rng.permutation(n)  # base user u sits at target position perm[u]
    src_users = [f"s{u}" for u in range(n)]
    tgt_users = [None] * n
    names_t, docs_t = [None] * n, [None] * n
    for u in range(n):
        p = int(perm[u])
        tgt_users[p] = f"t{p}"
        names_t[p] = tgt_names[u]
        docs_t[p] = tgt_docs[u]

    src_e = [(a, b) for (a, b), keep in zip(base_edges, src_keep) if keep]
    tgt_e = [(int(perm[a]), int(perm[b])) for (a, b), keep in zip(base_edges, tgt_keep) if keep]

    source = SocialNetwork(tuple(src_users), np.array(src_e, dtype=np.int64).reshape(-1, 2),
                           tuple(src_names), tuple(src_docs))
    target = SocialNetwork(tuple(tgt_users), np.array(sorted(tgt_e), dtype=np.int64).reshape(-1, 2),
                           tuple(names_t), tuple(docs_t))
    anchors = AnchorSet([(f"s{u}", f"t{int(perm[u])}") for u in range(n)])
    return source, target, anchors


def _sample_words(mixture, topic_word, length, rng):
    if length == 0:
        return np.zeros(0, dtype=np.int64)
    topics = rng.choice(len(mixture), size=length, p=mixture)
    cdf = np.cumsum(topic_word[topics], axis=1)
    u = rng.random(length)[:, None] * cdf[:, -1:]
    return np.minimum((cdf < u).sum(axis=1), topic_word.shape[1] - 1)


def shared_edge_count(source, target, anchors):
    """Source edges whose anchored endpoints are also linked in the target."""
    si, ti = source.index(), target.index()
    mapping = {si[a]: ti[b] for a, b in anchors.pairs if a in si and b in ti}
    tgt_edges = {(int(a), int(b)) for a, b in target.edges}
    return sum(1 for a, b in source.edges
               if int(a) in mapping and int(b) in mapping and (mapping[int(a)], mapping[int(b)]) in tgt_edges)
