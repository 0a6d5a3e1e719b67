"""Flat run configuration: defaults < key=value file < command-line flags."""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path

from .dataset import SynthConfig
from .errors import ConfigError
from .fusion import TrainConfig, check_variant
from .neighborhood import NeighborhoodConfig

# Fields that only say where things live or how fast to go; they do not
# change any result and are left out of the config hash.
NON_RESULT_FIELDS = ("data_dir", "workdir", "threads")


@dataclass
class RunConfig:
    # synthetic data
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
    data_seed: int = 0
    # information fusion
    dim: int = 256
    hidden: int = 512
    theta: float = 0.99
    negatives: int = 5
    lr: float = 1e-3
    epochs: int = 50
    batch_size: int = 256
    min_delta: float = 1e-4
    window: int = 5
    variant: str = "spc"
    # neighbourhood enhancement
    nei_hidden: int = 512
    tau: float = 0.5
    candidates: int = 250
    nei_lr: float = 1e-3
    nei_epochs: int = 50
    lam: float = 0.2
    # evaluation
    k: int = 30
    eta: float = 0.5
    seed: int = 0
    bidirectional: bool = False
    grid_variants: str = "s,p,c,sp,sc,pc,spc"
    grid_etas: str = "0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9"
    grid_lambdas: str = "0,0.2"
    grid_seeds: str = "0"
    # locations and resources
    data_dir: str = "data"
    workdir: str = "runs"
    threads: int = 1

    def validate(self):
        self.synth().validate()
        self.train_config(parse_variant(self.variant)[0], 0).validate()
        self.nei_config(0).validate()
        if not 0 < self.eta < 1:
            raise ConfigError(f"eta must lie in (0, 1), got {self.eta}")
        if self.lam < 0:
            raise ConfigError(f"lam must be non-negative, got {self.lam}")
        if self.k < 1 or self.threads < 1:
            raise ConfigError("k and threads must be positive")
        for v in split_list(self.grid_variants):
            parse_variant(v)
        for lam in self.lambdas():
            if lam < 0:
                raise ConfigError(f"grid lambda must be non-negative, got {lam}")
        for eta in self.etas():
            if not 0 < eta < 1:
                raise ConfigError(f"grid eta must lie in (0, 1), got {eta}")
        self.seeds()
        return self

    # -- derived views

    def synth(self):
        names = {f.name for f in fields(SynthConfig)} - {"seed"}
        return SynthConfig(seed=self.data_seed, **{n: getattr(self, n) for n in names})

    def train_config(self, features, seed):
        return TrainConfig(dim=self.dim, hidden=self.hidden, theta=self.theta, negatives=self.negatives,
                           lr=self.lr, epochs=self.epochs, batch_size=self.batch_size, seed=seed,
                           features=features, min_delta=self.min_delta, window=self.window)

    def nei_config(self, seed):
        return NeighborhoodConfig(hidden=self.nei_hidden, tau=self.tau, negatives=self.negatives,
                                  candidates=self.candidates, lr=self.nei_lr, epochs=self.nei_epochs,
                                  batch_size=self.batch_size, seed=seed, min_delta=self.min_delta,
                                  window=self.window)

    def etas(self):
        return [float(x) for x in split_list(self.grid_etas)]

    def lambdas(self):
        return [float(x) for x in split_list(self.grid_lambdas)]

    def seeds(self):
        try:
            return [int(x) for x in split_list(self.grid_seeds)]
        except ValueError:
            raise ConfigError(f"grid_seeds must be integers, got {self.grid_seeds!r}") from None

    def to_dict(self):
        return asdict(self)

    def result_dict(self):
        return {k: v for k, v in asdict(self).items() if k not in NON_RESULT_FIELDS}

    def config_hash(self):
        blob = json.dumps(self.result_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:12]

    def with_updates(self, updates):
        data = self.to_dict()
        for key, raw in updates.items():
            if key not in data:
                raise ConfigError(f"unknown config key {key!r}")
            data[key] = coerce(key, raw)
        return RunConfig(**data)


_TYPES = {f.name: f.type for f in fields(RunConfig)}


def coerce(key, raw):
    kind = _TYPES[key]
    if not isinstance(raw, str):
        return raw
    try:
        if kind == "bool":
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {kind}") from None
    return raw


def split_list(text):
    return [x.strip() for x in str(text).split(",") if x.strip()]


def parse_variant(name):
    """``'spc'`` -> ``('spc', True)``; a ``-ne`` suffix disables neighbourhood enhancement."""
    base, _, suffix = name.partition("-")
    if suffix not in ("", "ne"):
        raise ConfigError(f"invalid variant {name!r}")
    return check_variant(base), suffix != "ne"


def read_config_file(path):
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"{path}:{lineno}: expected key=value")
        out[key.strip()] = value.strip()
    return out


def write_config_file(cfg, path):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for k, v in cfg.to_dict().items():
            fh.write(f"{k} = {v}\n")


def load_config(path=None, overrides=None):
    cfg = RunConfig()
    if path is not None:
        cfg = cfg.with_updates(read_config_file(path))
    if overrides:
        cfg = cfg.with_updates(overrides)
    return cfg.validate()


def derive_seed(seed, *labels):
    """Stable 32-bit sub-seed for a pipeline stage."""
    blob = json.dumps([seed, *labels], sort_keys=True, default=str).encode()
    return int.from_bytes(hashlib.sha256(blob).digest()[:4], "little")
