"""Command line front end: train, attack, ers, export-embeddings, verify.

Settings come from built-in defaults, then an optional ``--config`` file of
``key = value`` lines, then ``--set key=value`` overrides, then dedicated
flags. The resolved settings are hashed (sha256 over sorted ``key=value``
lines, excluding ``out`` and ``jobs``) and the hash is stamped into every
output file.

Exit codes: 0 success, 2 usage/configuration/missing file, 3 data format,
4 numeric failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys

import numpy as np

from . import model as M
from .attacks import KINDS, AttackSpec, Budget, Gallery, run_attack, write_trials_csv
from .dataset import load_idx, stratified_split, synth_blobs
from .defense import DEFENSES, DefenseConfig, train, write_history_csv
from .ers import ProtocolConfig, run_protocol
from .errors import ConfigError, RanklabError
from .ranking import RankingIndex, export_embeddings_csv
from .triplet import STRATEGIES

DEFAULTS = {
    # data
    "dataset": "synth",
    "images": "",
    "labels": "",
    "synth_classes": 4,
    "synth_per_class": 64,
    "synth_hw": 28,
    "synth_sigma": 0.1,
    "train_per_class": 32,
    "gallery_per_class": 0,  # 0: every sample not used for training
    "split_seed": 0,
    # model and training
    "arch": "c2f2",
    "dim": 32,
    "defense": "none",
    "epochs": 16,
    "batch_size": 128,
    "lr": 1e-3,
    "beta": 0.2,
    "strategy": "uniform",
    "inner_eps": 77.0 / 255.0,
    "inner_eta": 32,
    # attacks and protocol
    "attack": "CA+",
    "eps": 77.0 / 255.0,
    "eta": 32,
    "w": 1,
    "G": 5,
    "zeta": 2e4,
    "k": 4,
    "trials": 0,  # 0: min(|X|, 500)
    "chunk": 50,
    # run
    "seed": 0,
    "out": "out",
    "jobs": 1,
}
UNHASHED = ("out", "jobs")
SNAPSHOT = "config.txt"


def _coerce(key, value):
    default = DEFAULTS[key]
    try:
        if isinstance(default, bool):
            return str(value).lower() in ("1", "true", "yes")
        if isinstance(default, int):
            return int(value)
        if isinstance(default, float):
            return float(value)
    except ValueError as exc:
        raise ConfigError(f"{key}: cannot parse {value!r} as {type(default).__name__}") from exc
    return str(value)


def parse_config_text(text, source="<config>"):
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{n}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in DEFAULTS:
            raise ConfigError(f"{source}:{n}: unknown setting {key!r}")
        out[key] = _coerce(key, value)
    return out


def read_config(path):
    if not os.path.exists(path):
        raise FileNotFoundError(f"config file not found: {path}")
    with open(path) as fh:
        return parse_config_text(fh.read(), path)


def canonical(cfg):
    return "".join(f"{k}={cfg[k]!r}\n" for k in sorted(cfg) if k not in UNHASHED)


def config_hash(cfg):
    return hashlib.sha256(canonical(cfg).encode()).hexdigest()[:16]


def stamp(cfg):
    return f"config_hash: {config_hash(cfg)}"


def write_snapshot(cfg, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, SNAPSHOT), "w") as fh:
        fh.write(f"# {stamp(cfg)}\n")
        for k in sorted(cfg):
            if k not in UNHASHED:
                fh.write(f"{k} = {cfg[k]}\n")


def defense_name(value):
    """Canonical spelling of a defense name (matching is case-insensitive)."""
    for d in DEFENSES:
        if d.lower() == str(value).lower():
            return d
    return str(value)


def validate(cfg):
    cfg["defense"] = defense_name(cfg["defense"])
    if cfg["dataset"] not in ("synth", "idx"):
        raise ConfigError("dataset must be 'synth' or 'idx'")
    if cfg["arch"] not in M.ARCHS:
        raise ConfigError(f"arch must be one of {M.ARCHS}")
    if cfg["defense"] not in DEFENSES:
        raise ConfigError(f"defense must be one of {DEFENSES}")
    if cfg["attack"] not in KINDS:
        raise ConfigError(f"attack must be one of {KINDS}")
    if cfg["strategy"] not in STRATEGIES:
        raise ConfigError(f"strategy must be one of {STRATEGIES}")
    if cfg["jobs"] < 1:
        raise ConfigError("jobs must be >= 1")
    return cfg


# --- data --------------------------------------------------------------------

def load_dataset(cfg):
    if cfg["dataset"] == "idx":
        for key in ("images", "labels"):
            if not cfg[key]:
                raise ConfigError(f"dataset=idx needs {key}=PATH")
            if not os.path.exists(cfg[key]):
                raise FileNotFoundError(f"{key} file not found: {cfg[key]}")
        return load_idx(cfg["images"], cfg["labels"])
    return synth_blobs(cfg["synth_classes"], cfg["synth_per_class"], cfg["synth_hw"], cfg["synth_sigma"],
                       cfg["split_seed"])


def split(cfg):
    """(train, gallery) sets derived deterministically from the config."""
    data = load_dataset(cfg)
    train_set, rest = stratified_split(data, cfg["train_per_class"], cfg["split_seed"])
    if cfg["gallery_per_class"] > 0:
        rest, _ = stratified_split(rest, cfg["gallery_per_class"], cfg["split_seed"] + 1)
    return train_set, rest


def load_model(cfg, path, dataset):
    if not os.path.exists(path):
        raise FileNotFoundError(f"checkpoint not found: {path}")
    model, _ = M.load_checkpoint(path)
    if model.input_shape != tuple(dataset.image_shape):
        raise ConfigError(f"checkpoint expects inputs {model.input_shape}, dataset has {dataset.image_shape}")
    if model.arch != cfg["arch"] or model.D != cfg["dim"]:
        raise ConfigError(f"checkpoint holds {model.arch} D={model.D}, config asks for {cfg['arch']} D={cfg['dim']}")
    return model


# --- subcommands ---------------------------------------------------------------

def cmd_train(cfg, args):
    train_set, gallery = split(cfg)
    model = M.build(cfg["arch"], cfg["dim"], train_set.image_shape, cfg["seed"])
    dcfg = DefenseConfig(cfg["defense"], Budget(cfg["inner_eps"], eta=cfg["inner_eta"]), cfg["beta"],
                         cfg["epochs"], cfg["batch_size"], cfg["lr"], cfg["seed"], cfg["strategy"])
    out = cfg["out"]
    write_snapshot(cfg, out)

    def report(row):
        print(f"epoch {row['epoch']:3d}  R@1 {row['R@1']:6.2f}  loss {row['loss']:.4f}  "
              f"inner {row['inner']:.4f}  spread {row['spread']:.3f}", file=sys.stderr)
    history = train(model, train_set, dcfg, val=gallery, out_dir=out, stamp=stamp(cfg), progress=report)
    model.save(os.path.join(out, "model.ckpt"), metadata=stamp(cfg))
    write_history_csv(history, os.path.join(out, "history.csv"), stamp(cfg))
    print(os.path.join(out, "model.ckpt"))
    return 0


def _trials(cfg):
    return None if cfg["trials"] == 0 else cfg["trials"]


def cmd_attack(cfg, args):
    _, gallery_set = split(cfg)
    model = load_model(cfg, args.checkpoint, gallery_set)
    gallery = Gallery(model, gallery_set)
    spec = AttackSpec(cfg["attack"], Budget(cfg["eps"], eta=cfg["eta"]), cfg["w"], cfg["G"], cfg["zeta"],
                      cfg["k"], cfg["seed"])
    trials = ProtocolConfig(trials=_trials(cfg)).resolve_trials(len(gallery))
    outcome, rows = run_attack(model, gallery, spec, trials, chunk=cfg["chunk"], jobs=cfg["jobs"])
    os.makedirs(cfg["out"], exist_ok=True)
    write_snapshot(cfg, cfg["out"])
    slug = cfg["attack"].replace("+", "plus").replace("-", "minus")
    path = os.path.join(cfg["out"], f"attack_{slug}.csv")
    write_trials_csv(rows, path, stamp(cfg), wall_time=args.wall_time)
    for metric, scores in outcome.scores.items():
        print(f"{metric}: mean {float(np.mean(scores)):.4f} over {len(scores)} trials")
    print(path)
    return 0


def cmd_ers(cfg, args):
    _, gallery_set = split(cfg)
    model = load_model(cfg, args.checkpoint, gallery_set)
    pcfg = ProtocolConfig(_trials(cfg), cfg["eps"], cfg["eta"], cfg["w"], cfg["G"], cfg["zeta"], cfg["k"],
                          cfg["seed"], cfg["chunk"])
    report = run_protocol(model, gallery_set, pcfg, {"config_hash": config_hash(cfg)}, jobs=cfg["jobs"],
                          progress=lambda run, s: print(f"{run}: {s}", file=sys.stderr))
    report.write(cfg["out"])
    write_snapshot(cfg, cfg["out"])
    sys.stdout.write(report.table())
    return 0


def cmd_export(cfg, args):
    _, gallery_set = split(cfg)
    model = load_model(cfg, args.checkpoint, gallery_set)
    index = RankingIndex(model.embed(gallery_set.images), gallery_set.labels)
    os.makedirs(cfg["out"], exist_ok=True)
    write_snapshot(cfg, cfg["out"])
    path = os.path.join(cfg["out"], "embeddings.csv")
    export_embeddings_csv(index, path, stamp(cfg))
    print(path)
    return 0


def embedded_hash(path):
    """The config hash stamped into an output file, or None."""
    if path.endswith(".ckpt"):
        _, meta = M.load_checkpoint(path)
        text = meta
    elif path.endswith(".json"):
        with open(path) as fh:
            return json.load(fh).get("provenance", {}).get("config_hash")
    else:
        with open(path) as fh:
            text = fh.readline()
    marker = "config_hash: "
    return text.split(marker, 1)[1].strip() if marker in text else None


def cmd_verify(cfg, args):
    """Recompute the hash of each directory's config snapshot and compare to every stamped file."""
    failures = 0
    for target in args.paths:
        files = [os.path.join(target, f) for f in sorted(os.listdir(target))] if os.path.isdir(target) else [target]
        snap = os.path.join(target if os.path.isdir(target) else os.path.dirname(target) or ".", SNAPSHOT)
        if not os.path.exists(snap):
            raise FileNotFoundError(f"no {SNAPSHOT} next to {target}")
        resolved = dict(DEFAULTS)
        resolved.update(read_config(snap))
        want = config_hash(resolved)
        for f in files:
            if os.path.basename(f) == SNAPSHOT or not f.endswith((".csv", ".json", ".txt", ".ckpt")):
                continue
            got = embedded_hash(f)
            ok = got == want
            failures += not ok
            print(f"{'ok ' if ok else 'BAD'} {f} ({got} vs {want})")
    return 0 if failures == 0 else 2


COMMANDS = {"train": cmd_train, "attack": cmd_attack, "ers": cmd_ers, "export-embeddings": cmd_export,
            "verify": cmd_verify}


def build_parser():
    p = argparse.ArgumentParser(prog="ranklab", description=__doc__.split("\n\n")[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, needs_checkpoint=False):
        sp.add_argument("--config", help="key = value settings file")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one setting")
        sp.add_argument("--out", help="output directory (default: out)")
        sp.add_argument("--seed", type=int, help="master seed (default: 0)")
        sp.add_argument("--dataset", choices=("synth", "idx"))
        sp.add_argument("--images", help="IDX image file (gzip accepted)")
        sp.add_argument("--labels", help="IDX label file (gzip accepted)")
        sp.add_argument("--arch", choices=M.ARCHS)
        sp.add_argument("--dim", type=int, help="embedding dimension D (default: 32)")
        sp.add_argument("--jobs", type=int, help="worker processes for attack trials (default: 1)")
        if needs_checkpoint:
            sp.add_argument("--checkpoint", required=True, help="model checkpoint file")

    t = sub.add_parser("train", help="train an embedding model, optionally with a defense")
    common(t)
    t.add_argument("--defense", type=defense_name, choices=DEFENSES, help="adversarial training method (default: none)")
    t.add_argument("--epochs", type=int, help="training epochs (default: 16)")
    t.add_argument("--batch-size", dest="batch_size", type=int, help="SPC-2 batch size (default: 128)")
    t.add_argument("--lr", type=float, help="Adam learning rate (default: 1e-3)")
    t.add_argument("--beta", type=float, help="triplet margin (default: 0.2)")
    t.add_argument("--strategy", choices=STRATEGIES, help="triplet miner (default: uniform)")

    a = sub.add_parser("attack", help="run one attack over protocol trials and write per-trial CSV")
    common(a, True)
    a.add_argument("--attack", choices=KINDS, help="attack objective (default: CA+)")
    a.add_argument("--eps", type=float, help="l-inf budget (default: 77/255)")
    a.add_argument("--eta", type=int, help="PGD iterations (default: 32)")
    a.add_argument("--w", type=int, help="query/candidate set size (default: 1)")
    a.add_argument("--trials", type=int, help="number of trials, 0 for min(|X|, 500)")
    a.add_argument("--wall-time", dest="wall_time", action="store_true", help="add a wall_time column")

    e = sub.add_parser("ers", help="benign metrics, the ten ERS attacks and the aggregate score")
    common(e, True)
    e.add_argument("--eps", type=float, help="l-inf budget (default: 77/255)")
    e.add_argument("--eta", type=int, help="PGD iterations (default: 32)")
    e.add_argument("--trials", type=int, help="number of trials, 0 for min(|X|, 500)")

    x = sub.add_parser("export-embeddings", help="write gallery embeddings as CSV")
    common(x, True)

    v = sub.add_parser("verify", help="check the config hash stamped into output files")
    v.add_argument("paths", nargs="+", help="output directories or files")
    return p


def resolve(args):
    cfg = dict(DEFAULTS)
    if getattr(args, "config", None):
        cfg.update(read_config(args.config))
    for item in getattr(args, "set", []) or []:
        cfg.update(parse_config_text(item, "--set"))
    for key in DEFAULTS:
        value = getattr(args, key, None)
        if value is not None:
            cfg[key] = _coerce(key, value)
    return validate(cfg)


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve(args) if args.command != "verify" else dict(DEFAULTS)
        return COMMANDS[args.command](cfg, args)
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except RanklabError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
