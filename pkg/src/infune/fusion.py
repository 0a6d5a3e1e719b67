"""Information fusion: unified embeddings trained through feature encoders.

Every user owns one trainable vector per network.  Feature encoders map it
into structure/profile/content spaces, where truncated-cosine decoders must
reproduce the ground-truth similarities; two further encoders map the
vectors into a common space supervised by the training anchors.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, NonFiniteError
from .ground import sample_negatives

log = logging.getLogger(__name__)

SOURCE, TARGET = "source", "target"
FEATURES = {"s": "structure", "p": "profile", "c": "content"}
VARIANTS = ("s", "p", "c", "sp", "sc", "pc", "spc")
TASKS = ("structure_source", "structure_target", "profile", "content", "label")


@dataclass
class TrainConfig:
    dim: int = 256
    hidden: int = 512
    theta: float = 0.99
    negatives: int = 5
    lr: float = 1e-3
    epochs: int = 50
    batch_size: int = 256
    seed: int = 0
    features: str = "spc"
    weights: dict = field(default_factory=dict)
    min_delta: float = 1e-4
    window: int = 5

    def validate(self):
        if self.dim < 1 or self.hidden < 1:
            raise ConfigError("dim and hidden must be positive")
        if not 0.0 <= self.theta <= 1.0:
            raise ConfigError(f"theta must lie in [0, 1], got {self.theta}")
        if self.negatives < 1:
            raise ConfigError("need at least one negative sample")
        if self.epochs < 0 or self.batch_size < 1 or self.lr <= 0:
            raise ConfigError("epochs >= 0, batch_size >= 1 and lr > 0 required")
        check_variant(self.features)
        unknown = set(self.weights) - set(TASKS)
        if unknown:
            raise ConfigError(f"unknown loss-weight keys {sorted(unknown)}")

    def to_dict(self):
        return asdict(self)


def check_variant(features):
    if not features or set(features) - set(FEATURES) or len(set(features)) != len(features):
        raise ConfigError(f"invalid feature variant {features!r}; use a subset of 'spc'")
    return "".join(f for f in "spc" if f in features)


def tasks_for(features):
    """Loss terms used by a feature variant; the label term is always present."""
    features = check_variant(features)
    names = []
    if "s" in features:
        names += ["structure_source", "structure_target"]
    if "p" in features:
        names.append("profile")
    if "c" in features:
        names.append("content")
    return names + ["label"]


@dataclass
class NodeEmbeddings:
    source: np.ndarray
    target: np.ndarray


class EncoderBank:
    """All trainable fusion parameters.

    Feature encoders and the edge transformation are shared by both
    networks; the two common-space encoders are network specific but
    start from identical weights.
    """

    def __init__(self, n_source, n_target, dim, hidden, rng):
        self.dim, self.hidden = dim, hidden
        self.X = {
            SOURCE: T.embedding(rng, n_source, dim, "X_source"),
            TARGET: T.embedding(rng, n_target, dim, "X_target"),
        }
        self.enc = {f: T.MLP2(f"enc_{f}", dim, hidden, dim, rng) for f in "spc"}
        self.phi = T.MLP2("phi", dim, hidden, dim, rng)
        self.common = {SOURCE: T.MLP2("enc_s2c", dim, hidden, dim, rng),
                       TARGET: T.MLP2("enc_t2c", dim, hidden, dim, rng)}
        # Both networks start in the same common space; they are trained apart.
        for a, b in zip(self.common[SOURCE].params().values(), self.common[TARGET].params().values()):
            b.value[...] = a.value

    def params(self):
        out = {x.name: x for x in self.X.values()}
        for m in (*self.enc.values(), self.phi, *self.common.values()):
            out.update(m.params())
        return out

    def node_embeddings(self):
        return NodeEmbeddings(
            self.common[SOURCE](self.X[SOURCE]).value.copy(),
            self.common[TARGET](self.X[TARGET]).value.copy(),
        )

    def load_arrays(self, arrays):
        params = self.params()
        missing = set(params) - set(arrays)
        if missing:
            raise ContractError(f"checkpoint lacks parameters {sorted(missing)}")
        for name, p in params.items():
            if arrays[name].shape != p.shape:
                raise ContractError(f"{name}: checkpoint shape {arrays[name].shape} != {p.shape}")
            p.value[...] = arrays[name]


def reconstruct(bank, feature, rows, cols, network=None):
    """Reconstructed similarity ``r_ij`` for each ``(rows[k], cols[k])`` as a Tensor.

    ``feature`` is one of ``structure`` (needs ``network``; both users come
    from it), ``profile``, ``content`` or ``label`` (rows from the source
    network, columns from the target network).
    """
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)
    if feature == "structure":
        if network not in (SOURCE, TARGET):
            raise ContractError("structure similarity is intra-network; pass network='source' or 'target'")
        x = bank.X[network]
        enc = bank.enc["s"]
        return T.cos_plus(enc(T.gather(x, rows)), bank.phi(enc(T.gather(x, cols))))
    if network is not None:
        raise ContractError(f"{feature} similarity is inter-network; network must not be given")
    xs, xt = T.gather(bank.X[SOURCE], rows), T.gather(bank.X[TARGET], cols)
    if feature in ("profile", "content"):
        enc = bank.enc[feature[0]]
        return T.cos_plus(enc(xs), enc(xt))
    if feature == "label":
        return T.cos_plus(bank.common[SOURCE](xs), bank.common[TARGET](xt))
    raise ContractError(f"unknown feature {feature!r}")


def task_spec(name):
    """``(feature, network)`` for a loss-term name."""
    if name == "structure_source":
        return "structure", SOURCE
    if name == "structure_target":
        return "structure", TARGET
    if name in ("profile", "content", "label"):
        return name, None
    raise ConfigError(f"unknown loss term {name!r}")


def sampled_loss(ground, bank, rows, cols, k, rng, feature, network=None, normalizer=None):
    """Negative-sampled squared loss for a batch of positive pairs.

    Sums ``(r_ij - g_ij)^2`` over the batch plus ``k`` noise draws per
    positive, divided by ``M = (k + 1) * (#positives in the ground)``.
    """
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)
    m = normalizer if normalizer is not None else ground.normalizer(k)
    negs = sample_negatives(ground, rows, k, rng)
    all_rows = np.concatenate([rows, np.repeat(rows, k)])
    all_cols = np.concatenate([cols, negs.ravel()])
    target = ground.lookup(all_rows, all_cols)
    r = reconstruct(bank, feature, all_rows, all_cols, network)
    return T.scale(T.squared_error(r, target), 1.0 / max(m, 1))


def exhaustive_loss(ground, bank, k, feature, network=None):
    """Expected value of the sampled loss summed over every positive pair.

    Negatives are averaged analytically under the noise distribution with
    the same bounded redraw rule as :func:`sample_negatives`.
    """
    from .ground import MAX_RESAMPLE

    rows, cols, vals = ground.positive_pairs()
    m = ground.normalizer(k)
    r_pos = reconstruct(bank, feature, rows, cols, network).value
    total = float(np.sum((r_pos - vals) ** 2))
    w = ground.noise_weights
    all_cols = np.arange(ground.n_cols)
    for i, count in enumerate(ground.positive_counts()):
        if not count:
            continue
        ii = np.full(ground.n_cols, i)
        err = (reconstruct(bank, feature, ii, all_cols, network).value - ground.lookup(ii, all_cols)) ** 2
        pos = ground.is_positive(ii, all_cols)
        p_pos = float(w[pos].sum())
        stuck = p_pos ** (MAX_RESAMPLE + 1)
        e_neg = float(np.sum(w[~pos] * err[~pos]) / (1 - p_pos)) if p_pos < 1 else 0.0
        e_pos = float(np.sum(w[pos] * err[pos]) / p_pos) if p_pos > 0 else 0.0
        total += count * k * ((1 - stuck) * e_neg + stuck * e_pos)
    return total / m


@dataclass
class FusionResult:
    bank: EncoderBank
    embeddings: NodeEmbeddings
    history: list  # (epoch, term, loss)
    terms: tuple
    steps: int


def train_fusion(grounds, cfg, n_source, n_target):
    """Minimise the summed sampled losses of the active terms with Adam.

    ``grounds`` maps term names (see ``TASKS``) to grounds; terms outside
    ``cfg.features`` are ignored.  Each epoch shuffles every term's
    positives and cuts them into the same number of mini-batches, so one
    optimiser step sees one batch from every term and an epoch visits each
    positive exactly once.
    """
    cfg.validate()
    terms = tasks_for(cfg.features)
    missing = [t for t in terms if t not in grounds]
    if missing:
        raise ContractError(f"missing grounds for terms {missing}")
    rng = np.random.default_rng(cfg.seed)
    bank = EncoderBank(n_source, n_target, cfg.dim, cfg.hidden, rng)
    params = bank.params()
    opt = T.Adam(params, lr=cfg.lr)
    pos = {t: grounds[t].positive_pairs()[:2] for t in terms}
    norm = {t: grounds[t].normalizer(cfg.negatives) for t in terms}
    weight = {t: float(cfg.weights.get(t, 1.0)) for t in terms}
    live = [t for t in terms if len(pos[t][0])]
    history, totals = [], []

    for epoch in range(1, cfg.epochs + 1):
        n_iter = max(1, -(-max((len(pos[t][0]) for t in live), default=1) // cfg.batch_size))
        batches = {}
        for t in live:
            order = rng.permutation(len(pos[t][0]))
            batches[t] = np.array_split(order, n_iter)
        epoch_loss = dict.fromkeys(terms, 0.0)
        for it in range(n_iter):
            loss = None
            for t in live:
                sel = batches[t][it]
                if not len(sel):
                    continue
                feature, network = task_spec(t)
                term = sampled_loss(grounds[t], bank, pos[t][0][sel], pos[t][1][sel],
                                    cfg.negatives, rng, feature, network, norm[t])
                epoch_loss[t] += float(term.value)
                if weight[t] != 1.0:
                    term = T.scale(term, weight[t])
                loss = term if loss is None else T.add(loss, term)
            if loss is None:
                continue
            if not np.isfinite(loss.value):
                raise NonFiniteError(f"fusion loss diverged at epoch {epoch}, iteration {it}")
            T.backward(loss, params)
            opt.step()
        for t in terms:
            history.append((epoch, t, epoch_loss[t]))
        totals.append(sum(weight[t] * epoch_loss[t] for t in terms))
        log.debug("fusion epoch %d loss %.6f", epoch, totals[-1])
        if _plateaued(totals, cfg.window, cfg.min_delta):
            log.info("fusion early stop at epoch %d", epoch)
            break

    return FusionResult(bank, bank.node_embeddings(), history, tuple(terms), opt.step_count)


def _plateaued(totals, window, min_delta):
    if window < 1 or len(totals) < 2 * window:
        return False
    prev = np.mean(totals[-2 * window:-window])
    last = np.mean(totals[-window:])
    return prev - last < min_delta


def node_similarity(z_source, z_target, i, j):
    """``cos+(z_i, z_j)`` between a source and a target user."""
    return float(T.cos_plus(z_source[i], z_target[j]).value)


def node_similarity_matrix(z_source, z_target, rows=None):
    """Truncated cosine of the selected source rows against every target user."""
    zs = z_source if rows is None else z_source[np.asarray(rows)]
    a = _unit(zs)
    b = _unit(z_target)
    return np.maximum(a @ b.T, 0.0)


def _unit(z):
    n = np.linalg.norm(z, axis=1, keepdims=True)
    return np.divide(z, n, out=np.zeros_like(z), where=n > 0)
