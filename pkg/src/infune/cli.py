"""Command-line entry point: ``infune generate|prepare|train|enhance|eval|grid``.

Configuration precedence is flags > ``--config`` file > defaults.  Every
stage after ``generate`` writes into ``<workdir>/run-<config hash>/`` and
records itself in that directory's ``manifest.json``; a stage whose inputs
and outputs are unchanged is skipped.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import time
from dataclasses import fields
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__
from . import ground as G
from . import tensor as T
from .config import RunConfig, derive_seed, load_config, parse_variant, write_config_file
from .dataset import TRAIN, AnchorSet, generate_pair, load_anchors, load_network_dir, save_anchors, save_network
from .errors import ConfigError, DataFormatError, InfuneError, NonFiniteError, StageError
from .evaluation import write_results
from .fusion import EncoderBank, FusionResult, tasks_for, train_fusion
from .neighborhood import (NeighborhoodEncoder, NeighborhoodResult, PairFeaturizer, build_candidates,
                           train_neighborhood)
from .pipeline import PairData, TrainedRun, evaluate_run, run_experiment_grid, split_for

log = logging.getLogger("infune")

COMMANDS = ("generate", "prepare", "train", "enhance", "eval", "grid")
EXIT_CODES = {ConfigError: 2, StageError: 3, DataFormatError: 4, NonFiniteError: 5}


# ------------------------------------------------------------------ helpers


def sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def read_json(path):
    return json.loads(Path(path).read_text(encoding="utf-8"))


def run_dir(cfg):
    return Path(cfg.workdir) / f"run-{cfg.config_hash()}"


DATA_FILES = ("source/edges.tsv", "source/profiles.tsv", "source/contents.jsonl",
              "target/edges.tsv", "target/profiles.tsv", "target/contents.jsonl", "anchors.tsv")


def data_fingerprint(data_dir):
    """Hash of the dataset files, so downstream stages notice changed inputs."""
    data_dir = Path(data_dir)
    missing = [f for f in DATA_FILES if not (data_dir / f).exists()]
    if missing:
        raise StageError("data", f"{data_dir} lacks {', '.join(missing)}; run `infune generate` "
                                 f"or place dataset files there")
    h = hashlib.sha256()
    for f in DATA_FILES:
        h.update(f.encode())
        h.update(sha256_file(data_dir / f).encode())
    return h.hexdigest()


def load_data(cfg):
    d = Path(cfg.data_dir)
    data_fingerprint(d)
    return PairData(load_network_dir(d / "source"), load_network_dir(d / "target"), load_anchors(d / "anchors.tsv"))


class RunManifest:
    """Per-run record of finished stages, their input keys and output hashes."""

    def __init__(self, cfg):
        self.dir = run_dir(cfg)
        self.path = self.dir / "manifest.json"
        if self.path.exists():
            self.data = read_json(self.path)
        else:
            self.data = {"config_hash": cfg.config_hash(), "config": cfg.result_dict(), "stages": {}}

    def stage(self, name):
        return self.data["stages"].get(name)

    def require(self, stage, needed):
        rec = self.stage(needed)
        if rec is None or not self._outputs_intact(rec):
            raise StageError(stage, f"missing upstream stage '{needed}' in {self.dir}; "
                                    f"run `infune {needed}` with the same configuration first")
        return rec

    def _outputs_intact(self, rec):
        return all((self.dir / f).exists() and sha256_file(self.dir / f) == h for f, h in rec["outputs"].items())

    def up_to_date(self, name, key):
        rec = self.stage(name)
        return rec is not None and rec["key"] == key and self._outputs_intact(rec)

    def record(self, name, key, outputs, info=None):
        self.data["stages"][name] = {
            "key": key,
            "outputs": {str(Path(f).relative_to(self.dir)): sha256_file(f) for f in outputs},
            "info": info or {},
        }
        write_json(self.path, self.data)


def stage_key(*parts):
    return hashlib.sha256(json.dumps(parts, sort_keys=True).encode()).hexdigest()[:16]


# ------------------------------------------------------------------ commands


def cmd_generate(cfg, args):
    out = Path(cfg.data_dir)
    synth = cfg.synth()
    src, tgt, anchors = generate_pair(synth)
    files = save_network(src, out / "source") + save_network(tgt, out / "target")
    save_anchors(anchors, out / "anchors.tsv")
    files.append(out / "anchors.tsv")
    manifest = {
        "config": synth.to_dict(),
        "seed": synth.seed,
        "config_hash": cfg.config_hash(),
        "files": {str(Path(f).relative_to(out)): sha256_file(f) for f in files},
        "file_count": len(files) + 1,
        "stats": {"source_users": src.n_users, "target_users": tgt.n_users, "source_edges": src.n_edges,
                  "target_edges": tgt.n_edges, "anchors": len(anchors)},
    }
    write_json(out / "manifest.json", manifest)
    print(f"generate: wrote {manifest['file_count']} files to {out}")
    return 0


def ground_path(rd, name):
    return rd / "grounds" / f"{name}.ground"


def cmd_prepare(cfg, args):
    man = RunManifest(cfg)
    rd = man.dir
    fp = data_fingerprint(cfg.data_dir)
    key = stage_key("prepare", fp, cfg.theta, cfg.eta, cfg.seed)
    if man.up_to_date("prepare", key):
        print(f"prepare: up to date ({rd})")
        return 0
    rd.mkdir(parents=True, exist_ok=True)
    (rd / "grounds").mkdir(exist_ok=True)
    write_config_file(cfg, rd / "config.txt")
    data = load_data(cfg)
    builders = {
        "structure_source": lambda: G.structure_ground(data.source, cfg.theta),
        "structure_target": lambda: G.structure_ground(data.target, cfg.theta),
        "profile": lambda: G.profile_ground(data.source, data.target, cfg.theta),
        "content": lambda: G.content_ground(data.source, data.target, cfg.theta),
    }
    outputs, info = [], {}
    for name, build in builders.items():
        path = ground_path(rd, name)
        g, hit = G.load_or_build(path, build, {"data": fp[:16], "theta": repr(cfg.theta)})
        outputs.append(path)
        info[name] = {"positives": g.n_positives, "materialized": len(g.keys), "cached": hit}
    anchors, _, _ = split_for(data, cfg.eta, cfg.seed)
    save_split(anchors, rd / "split.tsv")
    outputs.append(rd / "split.tsv")
    man.record("prepare", key, outputs, info)
    print(f"prepare: grounds and split written to {rd}")
    return 0


def save_split(anchors, path):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for (a, b), tag in zip(anchors.pairs, anchors.split):
            fh.write(f"{a}\t{b}\t{tag}\n")


def load_split(path):
    pairs, tags = [], []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.rstrip("\n").split("\t")
            if len(parts) != 3:
                raise DataFormatError(f"{path}:{lineno}: expected 'source<TAB>target<TAB>split'")
            pairs.append((parts[0], parts[1]))
            tags.append(parts[2])
    return AnchorSet(pairs, tags)


def load_grounds(rd, features):
    return {t: G.SimilarityGround.load(ground_path(rd, t)) for t in tasks_for(features) if t != "label"}


def split_indices(rd, data):
    split = load_split(rd / "split.tsv")
    return split.indices(data.source, data.target, TRAIN), split.indices(data.source, data.target, "test")


def cmd_train(cfg, args):
    man = RunManifest(cfg)
    rd = man.dir
    up = man.require("train", "prepare")
    features, _ = parse_variant(cfg.variant)
    key = stage_key("train", up["key"], features)
    if man.up_to_date("train", key):
        print(f"train: up to date ({rd})")
        return 0
    data = load_data(cfg)
    train, _ = split_indices(rd, data)
    grounds = load_grounds(rd, features)
    grounds["label"] = G.label_ground(train, data.source.n_users, data.target.n_users, cfg.theta)
    seed = derive_seed(cfg.seed, "fusion", cfg.eta)
    t0 = time.time()
    res = train_fusion(grounds, cfg.train_config(features, seed), data.source.n_users, data.target.n_users)
    ck = T.save_checkpoint(rd / "fusion.npz", res.bank.params(), res.steps, seed,
                           {"dim": cfg.dim, "hidden": cfg.hidden, "features": features})
    emb_s = write_embeddings(rd / "embeddings_source.txt", data.source.users, res.embeddings.source)
    emb_t = write_embeddings(rd / "embeddings_target.txt", data.target.users, res.embeddings.target)
    with open(rd / "train_log.csv", "w", encoding="utf-8", newline="\n") as fh:
        fh.write("epoch,ground,loss\n")
        for epoch, term, loss in res.history:
            fh.write(f"{epoch},{term},{loss!r}\n")
    man.record("train", key, [ck, emb_s, emb_t, rd / "train_log.csv"],
               {"steps": res.steps, "epochs": res.history[-1][0] if res.history else 0})
    print(f"train: {res.steps} steps in {time.time() - t0:.1f}s; checkpoint {ck}")
    return 0


def write_embeddings(path, users, z):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for u, row in zip(users, z):
            fh.write(u + "\t" + " ".join(repr(float(v)) for v in row) + "\n")
    return path


def restore_fusion(cfg, rd, data):
    arrays, header = T.load_checkpoint(rd / "fusion.npz")
    meta = header["meta"]
    bank = EncoderBank(data.source.n_users, data.target.n_users, meta["dim"], meta["hidden"],
                       np.random.default_rng(0))
    bank.load_arrays(arrays)
    return FusionResult(bank, bank.node_embeddings(), [], tuple(tasks_for(meta["features"])), header["step"])


def cmd_enhance(cfg, args):
    man = RunManifest(cfg)
    rd = man.dir
    up = man.require("enhance", "train")
    key = stage_key("enhance", up["key"])
    if man.up_to_date("enhance", key):
        print(f"enhance: up to date ({rd})")
        return 0
    data = load_data(cfg)
    train, _ = split_indices(rd, data)
    fusion = restore_fusion(cfg, rd, data)
    seed = derive_seed(cfg.seed, "neighborhood", cfg.eta)
    ncfg = cfg.nei_config(seed)
    feats = PairFeaturizer(fusion.embeddings, data.nbrs_source, data.nbrs_target, ncfg.tau)
    cand = build_candidates(fusion.embeddings, train[:, 0], ncfg.candidates)
    cand.save(rd / "candidates.tsv", data.source.users, data.target.users)
    res = train_neighborhood(train, fusion.embeddings, data.nbrs_source, data.nbrs_target, cand, ncfg,
                             featurizer=feats)
    ck = T.save_checkpoint(rd / "neighborhood.npz", res.encoder.params(), res.steps, seed,
                           {"dim": cfg.dim, "hidden": cfg.nei_hidden})
    with open(rd / "enhance_log.csv", "w", encoding="utf-8", newline="\n") as fh:
        fh.write("epoch,loss\n")
        for epoch, loss in res.history:
            fh.write(f"{epoch},{loss!r}\n")
    man.record("enhance", key, [rd / "candidates.tsv", ck, rd / "enhance_log.csv"], {"steps": res.steps})
    print(f"enhance: {res.steps} steps; checkpoint {ck}")
    return 0


def cmd_eval(cfg, args):
    man = RunManifest(cfg)
    rd = man.dir
    up = man.require("eval", "train")
    _, enhance = parse_variant(cfg.variant)
    lam = cfg.lam if enhance else 0.0
    parts = [up["key"], lam, cfg.k, cfg.candidates, cfg.bidirectional]
    if lam > 0:
        parts.append(man.require("eval", "enhance")["key"])
    key = stage_key("eval", *parts)
    if man.up_to_date("eval", key):
        print(f"eval: up to date ({rd})")
        return 0
    data = load_data(cfg)
    train, test = split_indices(rd, data)
    fusion = restore_fusion(cfg, rd, data)
    nei = feats = None
    if lam > 0:
        arrays, header = T.load_checkpoint(rd / "neighborhood.npz")
        enc = NeighborhoodEncoder(header["meta"]["dim"], header["meta"]["hidden"], np.random.default_rng(0))
        enc.load_arrays(arrays)
        nei = NeighborhoodResult(enc, [], header["step"])
        feats = PairFeaturizer(fusion.embeddings, data.nbrs_source, data.nbrs_target, cfg.tau)
    run = TrainedRun(fusion, nei, feats, train, test)
    report = evaluate_run(run, cfg, lam, cfg.bidirectional)
    row = {"variant": cfg.variant, "eta": float(cfg.eta), "lambda": float(lam), "seed": int(cfg.seed),
           "hit_precision": float(report.hit_precision), "n_test": len(test)}
    write_results(rd / "results.csv", [row])
    report.write_detail(rd / "detail.csv", data.source.users, data.target.users)
    man.record("eval", key, [rd / "results.csv", rd / "detail.csv"], {"hit_precision": row["hit_precision"]})
    print(f"eval: hit-precision@{cfg.k} = {report.hit_precision:.4f} over {len(test)} test users")
    return 0


def cmd_grid(cfg, args):
    rd = run_dir(cfg)
    out = rd / "grid"
    fp = data_fingerprint(cfg.data_dir)
    man = RunManifest(cfg)
    key = stage_key("grid", fp)
    if man.up_to_date("grid", key):
        print(f"grid: up to date ({out})")
        return 0
    out.mkdir(parents=True, exist_ok=True)
    write_config_file(cfg, rd / "config.txt")
    data = load_data(cfg)
    variants = cfg.grid_variants.split(",")

    def progress(row):
        print("grid: " + " ".join(f"{k}={v}" for k, v in row.items()), flush=True)

    rows = run_experiment_grid(data, cfg, variants=[v.strip() for v in variants if v.strip()], progress=progress)
    write_results(out / "results.csv", rows)
    man.record("grid", key, [out / "results.csv"], {"rows": len(rows)})
    print(f"grid: {len(rows)} rows written to {out / 'results.csv'}")
    return 0


HANDLERS = {"generate": cmd_generate, "prepare": cmd_prepare, "train": cmd_train, "enhance": cmd_enhance,
            "eval": cmd_eval, "grid": cmd_grid}


# ------------------------------------------------------------------ parsing


def build_parser():
    parser = argparse.ArgumentParser(prog="infune", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="key=value configuration file")
    common.add_argument("-v", "--verbose", action="count", default=0, help="more logging (repeatable)")
    group = common.add_argument_group("configuration overrides")
    for f in fields(RunConfig):
        flag = "--" + f.name.replace("_", "-")
        group.add_argument(flag, dest=f.name, default=None, metavar=f.name.upper(),
                           help=f"(default: {f.default})")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    helps = {
        "generate": "sample a synthetic network pair into --data-dir",
        "prepare": "build ground-truth caches and the anchor split",
        "train": "train the information fusion component",
        "enhance": "train the neighbourhood enhancement component",
        "eval": "rank test anchors and report hit-precision@k",
        "grid": "run the variant x eta x lambda x seed grid",
    }
    for name in COMMANDS:
        sub.add_parser(name, parents=[common], help=helps[name], description=helps[name])
    return parser


def config_from_args(args):
    overrides = {f.name: getattr(args, f.name) for f in fields(RunConfig) if getattr(args, f.name) is not None}
    return load_config(args.config, overrides)


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = config_from_args(args)
        with threadpool_limits(limits=cfg.threads):
            return HANDLERS[args.command](cfg, args)
    except InfuneError as exc:
        msg = str(exc) if isinstance(exc, StageError) else f"[{args.command}] {exc}"
        print(f"infune: error: {msg}", file=sys.stderr)
        return next((code for cls, code in EXIT_CODES.items() if isinstance(exc, cls)), 1)
    except (FileNotFoundError, ValueError) as exc:
        print(f"infune: error: [{args.command}] {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
