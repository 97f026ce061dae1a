"""Desk-scale MNIST fixtures for the acceptance suite, cached on disk.

Training and protocol runs are keyed by every setting that affects them, so a
cache hit returns exactly what a fresh run would produce.
"""

import json
import os
from pathlib import Path

import numpy as np

from ranklab import model as M
from ranklab.attacks import AttackSpec, Budget, Gallery, run_attack
from ranklab.dataset import load_idx, stratified_split
from ranklab.defense import DefenseConfig, train
from ranklab.ers import ErsReport, ProtocolConfig, run_protocol

ROOT = Path(__file__).resolve().parent.parent
CACHE = Path(os.environ.get("RANKLAB_CACHE", ROOT / ".cache" / "acceptance"))
IMAGES = ROOT / "data" / "mnist5k" / "images-idx3-ubyte.gz"
LABELS = ROOT / "data" / "mnist5k" / "labels-idx1-ubyte.gz"
TRAIN_PER_CLASS = 200  # 2,000-sample training subset; the other 3,000 images form the gallery
STRONG = 77 / 255
VERSION = 1
REPORT_LINES = []  # "CRITERION n: ..." lines, echoed in the pytest summary


def mnist_split():
    data = load_idx(IMAGES, LABELS)
    return stratified_split(data, TRAIN_PER_CLASS, seed=0)


def _key(*parts):
    return "_".join(str(p).replace("/", "-") for p in (f"v{VERSION}",) + parts)


def trained_model(kind, epochs, seed, inner_eta=32, log=print):
    """C2F2 (D=32) trained on the subset with defense ``kind``; returns (model, history)."""
    CACHE.mkdir(parents=True, exist_ok=True)
    key = _key(kind, f"e{epochs}", f"s{seed}", f"ieta{inner_eta}")
    ckpt, hist = CACHE / f"{key}.ckpt", CACHE / f"{key}.history.json"
    if ckpt.exists() and hist.exists():
        model, _ = M.load_checkpoint(ckpt)
        return model, json.loads(hist.read_text())
    train_set, gallery = mnist_split()
    model = M.c2f2(32, seed=seed)
    cfg = DefenseConfig(kind, budget=Budget(STRONG, eta=inner_eta), epochs=epochs, seed=seed)
    history = train(model, train_set, cfg, val=gallery,
                    progress=lambda r: log(f"  {kind} seed {seed} epoch {r['epoch']} R@1 {r['R@1']:.1f}"))
    model.save(ckpt, metadata=key)
    hist.write_text(json.dumps(history))
    return model, history


def ers_report(model, tag, trials, seed, epsilon=STRONG, eta=32):
    """Protocol report for a cached model (``tag`` names the model in the cache)."""
    CACHE.mkdir(parents=True, exist_ok=True)
    path = CACHE / f"{_key(tag, 'ers', f'T{trials}', f's{seed}', f'eps{epsilon:.6f}', f'eta{eta}')}.json"
    if path.exists():
        return ErsReport.from_json(path.read_text())
    _, gallery = mnist_split()
    rep = run_protocol(model, gallery, ProtocolConfig(trials=trials, epsilon=epsilon, eta=eta, seed=seed))
    path.write_text(rep.to_json())
    return rep


def attack_mean(model, tag, kind, trials, seed, epsilon, eta=32):
    """Mean per-metric scores of one attack; cached like ``ers_report``."""
    CACHE.mkdir(parents=True, exist_ok=True)
    path = CACHE / f"{_key(tag, kind, f'T{trials}', f's{seed}', f'eps{epsilon:.6f}', f'eta{eta}')}.json"
    if path.exists():
        return json.loads(path.read_text())
    _, gallery = mnist_split()
    out, _ = run_attack(model, Gallery(model, gallery), AttackSpec(kind, Budget(epsilon, eta=eta), seed=seed),
                        trials)
    means = {m: float(np.mean(s)) for m, s in out.scores.items()}
    path.write_text(json.dumps(means, sort_keys=True))
    return means
