"""Ground-truth similarity structures and negative sampling.

Each ground stores every materialised entry ``g_ij`` (sparse), the per-row
positive set obtained from the theta-quantile split, and the noise
distribution ``P(j) ~ d_j ** 0.75`` used to draw negatives.
"""
from __future__ import annotations

import logging
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import sparse

from .errors import ConfigError, DataFormatError

log = logging.getLogger(__name__)

STRUCTURE, PROFILE, CONTENT, LABEL = "structure", "profile", "content", "label"
KINDS = (STRUCTURE, PROFILE, CONTENT, LABEL)
NOISE_POWER = 0.75
MATERIALIZE_MIN = 1e-6
MAX_RESAMPLE = 10


# ------------------------------------------------------------- string & text


def levenshtein(a, b):
    """Edit distance with unit insert/delete/substitute costs."""
    if len(a) < len(b):
        a, b = b, a
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, 1):
        cur = [i]
        for j, cb in enumerate(b, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ca != cb)))
        prev = cur
    return prev[-1]


def levenshtein_many(a, others):
    """Edit distance from ``a`` to each string in ``others``, vectorised over ``others``."""
    n = len(others)
    if n == 0:
        return np.zeros(0, dtype=np.int64)
    lengths = np.array([len(s) for s in others], dtype=np.int64)
    width = int(lengths.max()) if n else 0
    chars = np.full((n, max(width, 1)), -1, dtype=np.int64)
    for k, s in enumerate(others):
        if s:
            chars[k, :len(s)] = [ord(c) for c in s]
    prev = np.tile(np.arange(width + 1, dtype=np.int64), (n, 1))
    for i, ca in enumerate(a, 1):
        cur = np.empty_like(prev)
        cur[:, 0] = i
        sub = (chars != ord(ca)).astype(np.int64)
        for j in range(1, width + 1):
            cur[:, j] = np.minimum(np.minimum(prev[:, j] + 1, cur[:, j - 1] + 1), prev[:, j - 1] + sub[:, j - 1])
        prev = cur
    return prev[np.arange(n), lengths]


def name_similarity(a, b):
    """``1 - lev(a, b) / max(|a|, |b|)``; zero when either name is empty."""
    if not a or not b:
        return 0.0
    return 1.0 - levenshtein(a, b) / max(len(a), len(b))


def tfidf_vectors(documents):
    """L2-normalised TF-IDF rows for a list of token sequences.

    Term frequency is log-scaled (``1 + log tf``) and IDF is smoothed
    (``log((1 + n) / (1 + df)) + 1``).  Empty documents give zero rows.
    """
    vocab = {}
    rows, cols, vals = [], [], []
    for r, doc in enumerate(documents):
        for term, tf in sorted(Counter(doc).items()):
            c = vocab.setdefault(term, len(vocab))
            rows.append(r)
            cols.append(c)
            vals.append(1.0 + math.log(tf))
    n = len(documents)
    mat = sparse.csr_matrix((vals, (rows, cols)), shape=(n, len(vocab)), dtype=np.float64)
    df = np.bincount(mat.indices, minlength=len(vocab))
    idf = np.log((1.0 + n) / (1.0 + df)) + 1.0
    mat = mat @ sparse.diags(idf)
    norms = np.sqrt(np.asarray(mat.multiply(mat).sum(axis=1)).ravel())
    inv = np.divide(1.0, norms, out=np.zeros_like(norms), where=norms > 0)
    return sparse.csr_matrix(sparse.diags(inv) @ mat), vocab


# ------------------------------------------------------------------- quantile


def row_quantile(values, n_cols, theta):
    """Linear-interpolated theta-quantile of a row given only its nonzero (non-negative) values.

    Matches ``np.quantile(dense_row, theta)`` where ``dense_row`` has
    ``n_cols - len(values)`` implicit zeros.
    """
    if not 0.0 <= theta <= 1.0:
        raise ConfigError(f"theta must lie in [0, 1], got {theta}")
    values = np.sort(np.asarray(values, dtype=np.float64))
    n_zero = n_cols - len(values)

    def at(k):
        return 0.0 if k < n_zero else values[k - n_zero]

    h = (n_cols - 1) * theta
    lo = int(math.floor(h))
    hi = min(lo + 1, n_cols - 1)
    a, b = at(lo), at(hi)
    return a + (h - lo) * (b - a)


def quantile_split(row, theta):
    """Boolean mask of entries ``>= q`` where ``q`` is the row's theta-quantile.

    Ties at the quantile count as positive.
    """
    row = np.asarray(row, dtype=np.float64)
    if not 0.0 <= theta <= 1.0:
        raise ConfigError(f"theta must lie in [0, 1], got {theta}")
    q = np.quantile(row, theta)
    return row >= q


# --------------------------------------------------------------------- ground


@dataclass
class SimilarityGround:
    kind: str
    n_rows: int
    n_cols: int
    theta: float
    keys: np.ndarray  # sorted row * n_cols + col of every materialised entry
    values: np.ndarray
    positive: np.ndarray  # bool mask over keys
    noise_weights: np.ndarray
    stats: dict = field(default_factory=dict)

    @classmethod
    def from_matrix(cls, kind, matrix, theta):
        """Build from a sparse matrix; only stored nonzeros are materialised."""
        if kind not in KINDS:
            raise ConfigError(f"unknown ground kind {kind!r}")
        if not 0.0 <= theta <= 1.0:
            raise ConfigError(f"theta must lie in [0, 1], got {theta}")
        m = sparse.csr_matrix(matrix, dtype=np.float64)
        m.eliminate_zeros()
        m.sort_indices()
        n_rows, n_cols = m.shape
        positive = np.zeros(m.nnz, dtype=bool)
        all_equal = 0
        for i in range(n_rows):
            lo, hi = m.indptr[i], m.indptr[i + 1]
            vals = m.data[lo:hi]
            if hi - lo in (0, n_cols) and (hi == lo or np.all(vals == vals[0])):
                all_equal += 1
            q = row_quantile(vals, n_cols, theta)
            positive[lo:hi] = vals >= q
        rows = np.repeat(np.arange(n_rows, dtype=np.int64), np.diff(m.indptr))
        keys = rows * n_cols + m.indices.astype(np.int64)
        d = np.bincount(m.indices, weights=np.abs(m.data), minlength=n_cols)
        stats = {"materialized": int(m.nnz), "positives": int(positive.sum()), "all_equal_rows": all_equal}
        return cls(kind, n_rows, n_cols, theta, keys, m.data.copy(), positive, noise_distribution(d), stats)

    # -- queries

    def lookup(self, rows, cols):
        """Ground value for each ``(rows[k], cols[k])``; unmaterialised entries are 0."""
        rows = np.asarray(rows, dtype=np.int64)
        cols = np.asarray(cols, dtype=np.int64)
        q = rows * self.n_cols + cols
        pos = np.searchsorted(self.keys, q)
        pos_c = np.minimum(pos, len(self.keys) - 1) if len(self.keys) else pos
        hit = (pos < len(self.keys)) & (self.keys[pos_c] == q) if len(self.keys) else np.zeros(q.shape, bool)
        out = np.zeros(q.shape, dtype=np.float64)
        out[hit] = self.values[pos_c[hit]]
        return out

    def is_positive(self, rows, cols):
        rows = np.asarray(rows, dtype=np.int64)
        cols = np.asarray(cols, dtype=np.int64)
        q = rows * self.n_cols + cols
        if not len(self.keys):
            return np.zeros(q.shape, dtype=bool)
        pos = np.minimum(np.searchsorted(self.keys, q), len(self.keys) - 1)
        return (self.keys[pos] == q) & self.positive[pos]

    def positive_pairs(self):
        """``(rows, cols, values)`` of every positive entry, row-major."""
        k = self.keys[self.positive]
        return k // self.n_cols, k % self.n_cols, self.values[self.positive]

    def positives(self, i):
        rows, cols, vals = self.positive_pairs()
        sel = rows == i
        return list(zip(cols[sel].tolist(), vals[sel].tolist()))

    def positive_counts(self):
        rows = self.keys[self.positive] // self.n_cols
        return np.bincount(rows, minlength=self.n_rows)

    @property
    def n_positives(self):
        return int(self.positive.sum())

    def normalizer(self, k):
        """The constant ``M = (K + 1) * sum_i |U+(i)|``."""
        return (k + 1) * self.n_positives

    def negatives(self, i):
        """Complement of row ``i``'s positive set."""
        pos = {c for c, _ in self.positives(i)}
        return [j for j in range(self.n_cols) if j not in pos]

    def dense(self):
        out = np.zeros((self.n_rows, self.n_cols))
        out.flat[self.keys] = self.values
        return out

    # -- persistence

    def save(self, path, extra=None):
        """Write the header, positive entries, other materialised entries and noise weights."""
        rows, cols = self.keys // self.n_cols, self.keys % self.n_cols
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(f"# kind={self.kind} theta={self.theta!r} rows={self.n_rows} cols={self.n_cols}\n")
            for key, val in sorted((extra or {}).items()):
                fh.write(f"# {key}={val}\n")
            for label, mask in (("positives", self.positive), ("others", ~self.positive)):
                fh.write(f"## {label} {int(mask.sum())}\n")
                for r, c, g in zip(rows[mask], cols[mask], self.values[mask]):
                    fh.write(f"{r}\t{c}\t{float(g)!r}\n")
            fh.write("## noise\n")
            fh.write(" ".join(repr(float(w)) for w in self.noise_weights) + "\n")

    @classmethod
    def load(cls, path):
        header, extra = {}, {}
        sections = {"positives": [], "others": []}
        noise = None
        current = None
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                line = line.rstrip("\n")
                if line.startswith("## "):
                    current = line[3:].split()[0]
                    continue
                if line.startswith("# "):
                    target = extra if header else header
                    for tok in line[2:].split():
                        k, _, v = tok.partition("=")
                        target[k] = v
                    continue
                if current == "noise":
                    noise = np.array([float(x) for x in line.split()]) if line else np.zeros(0)
                elif current in sections:
                    parts = line.split("\t")
                    if len(parts) != 3:
                        raise DataFormatError(f"{path}:{lineno}: expected 'row<TAB>col<TAB>g'")
                    sections[current].append((int(parts[0]), int(parts[1]), float(parts[2]), current == "positives"))
        try:
            kind, theta = header["kind"], float(header["theta"])
            n_rows, n_cols = int(header["rows"]), int(header["cols"])
        except KeyError as exc:
            raise DataFormatError(f"{path}: missing header field {exc.args[0]}") from None
        entries = sorted(sections["positives"] + sections["others"], key=lambda e: e[0] * n_cols + e[1])
        keys = np.array([r * n_cols + c for r, c, _, _ in entries], dtype=np.int64)
        values = np.array([g for _, _, g, _ in entries], dtype=np.float64)
        positive = np.array([p for *_, p in entries], dtype=bool)
        g = cls(kind, n_rows, n_cols, theta, keys, values, positive,
                noise if noise is not None else np.full(n_cols, 1.0 / max(n_cols, 1)))
        g.stats = {"materialized": len(keys), "positives": int(positive.sum()), **extra}
        return g


def noise_distribution(d):
    """``d ** 0.75`` normalised; all-zero mass falls back to uniform."""
    w = np.power(np.abs(np.asarray(d, dtype=np.float64)), NOISE_POWER)
    total = w.sum()
    if total <= 0:
        return np.full(len(w), 1.0 / max(len(w), 1))
    return w / total


def sample_negatives(ground, rows, k, rng):
    """Draw ``k`` noise columns per entry of ``rows`` (shape ``(len(rows), k)``).

    Draws that hit the row's positive set are redrawn up to ``MAX_RESAMPLE``
    times; a draw still positive after that is kept (its true ``g`` then
    serves as the regression target).
    """
    rows = np.atleast_1d(np.asarray(rows, dtype=np.int64))
    w = ground.noise_weights
    cdf = np.cumsum(w)
    cdf /= cdf[-1]

    def draw(size):
        return np.minimum(np.searchsorted(cdf, rng.random(size), side="right"), len(w) - 1)

    out = draw((len(rows), k))
    rr = np.repeat(rows[:, None], k, axis=1)
    for _ in range(MAX_RESAMPLE):
        bad = ground.is_positive(rr, out)
        n_bad = int(bad.sum())
        if not n_bad:
            break
        out[bad] = draw(n_bad)
    return out


# ------------------------------------------------------------- constructors


def structure_ground(net, theta=0.99):
    """Directed adjacency indicator ``g_ij = 1`` iff edge i -> j."""
    n = net.n_users
    m = sparse.csr_matrix((np.ones(net.n_edges), (net.edges[:, 0], net.edges[:, 1])), shape=(n, n))
    m.data[:] = 1.0
    return SimilarityGround.from_matrix(STRUCTURE, m, theta)


def profile_matrix(src, tgt, threshold=MATERIALIZE_MIN):
    rows, cols, vals = [], [], []
    tgt_names = list(tgt.screen_names)
    tgt_len = np.array([len(s) for s in tgt_names])
    nonempty = np.flatnonzero(tgt_len > 0)
    cand = [tgt_names[j] for j in nonempty]
    for i, name in enumerate(src.screen_names):
        if not name or not len(nonempty):
            continue
        d = levenshtein_many(name, cand)
        sim = 1.0 - d / np.maximum(len(name), tgt_len[nonempty])
        keep = sim >= threshold
        rows.extend([i] * int(keep.sum()))
        cols.extend(nonempty[keep].tolist())
        vals.extend(sim[keep].tolist())
    return sparse.csr_matrix((vals, (rows, cols)), shape=(src.n_users, tgt.n_users), dtype=np.float64)


def profile_ground(src, tgt, theta=0.99):
    """Normalised Levenshtein similarity of screen names across the two networks."""
    return SimilarityGround.from_matrix(PROFILE, profile_matrix(src, tgt), theta)


def content_matrix(src, tgt, threshold=MATERIALIZE_MIN):
    vecs, _ = tfidf_vectors(list(src.documents) + list(tgt.documents))
    a, b = vecs[: src.n_users], vecs[src.n_users:]
    sim = sparse.csr_matrix(a @ b.T)
    sim.data = np.minimum(np.maximum(sim.data, 0.0), 1.0)
    sim.data[sim.data < threshold] = 0.0
    sim.eliminate_zeros()
    return sim


def content_ground(src, tgt, theta=0.99):
    """Truncated cosine between TF-IDF document vectors over a joint vocabulary."""
    return SimilarityGround.from_matrix(CONTENT, content_matrix(src, tgt), theta)


def label_ground(train_pairs, n_src, n_tgt, theta=0.99):
    """Indicator of training anchor links (``train_pairs`` are index pairs)."""
    train_pairs = np.asarray(train_pairs, dtype=np.int64).reshape(-1, 2)
    m = sparse.csr_matrix((np.ones(len(train_pairs)), (train_pairs[:, 0], train_pairs[:, 1])),
                          shape=(n_src, n_tgt))
    return SimilarityGround.from_matrix(LABEL, m, theta)


def load_or_build(path, build, expect):
    """Reuse a cached ground at ``path`` when its header matches ``expect``."""
    path = Path(path)
    if path.exists():
        try:
            g = SimilarityGround.load(path)
        except DataFormatError:
            log.warning("ignoring unreadable ground cache %s", path)
        else:
            if all(str(g.stats.get(k)) == str(v) for k, v in expect.items()):
                return g, True
    g = build()
    g.save(path, expect)
    return g, False
