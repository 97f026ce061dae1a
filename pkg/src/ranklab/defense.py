"""Triplet training with optional adversarial defenses.

kind    training loss on a mined triplet (a, p, n)
none    L(a, p, n)
EST     L(a*, p*, n*), every member replaced by its max-embedding-shift adversary
REST    L(a, p*, n*), anchor kept clean
SES     L(a, p, n) + mean over triplets of the three embedding shifts
ACT     L(a, p', n'), where p' and n' are perturbed jointly to collapse onto
        each other (simultaneous sign steps on both)

Adversaries come from PGD against the current parameters and are treated as
constants in the parameter gradient. Training uses adversarial samples only
(no clean/adversarial mixing).
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .attacks import Budget, pgd, shift_distance
from .dataset import spc2_epoch
from .errors import ContractError, NumericError
from .model import AdamState, sgd_adam_step
from .ranking import RankingIndex, pairwise_distances, recall_at_k
from .triplet import DEFAULT_MARGIN, mine, triplet_hinge

DEFENSES = ("none", "EST", "REST", "SES", "ACT")
STRONG_EPSILON = 77.0 / 255.0
FAST_ETA = 8


@dataclass(frozen=True)
class DefenseConfig:
    kind: str = "none"
    budget: Budget = field(default_factory=lambda: Budget(STRONG_EPSILON, eta=32))
    beta: float = DEFAULT_MARGIN
    epochs: int = 16
    batch_size: int = 128
    lr: float = 1e-3
    seed: int = 0
    strategy: str = "uniform"

    def __post_init__(self):
        if self.kind not in DEFENSES:
            raise ContractError(f"unknown defense {self.kind!r}; choose from {DEFENSES}")
        if self.epochs < 0 or self.lr <= 0 or not self.beta > 0:
            raise ContractError("epochs >= 0, lr > 0 and beta > 0 required")


def max_shift_adversary(model, x, budget):
    """Inputs within ``budget`` that push embeddings furthest from the clean ones.

    Returns ``(x_adv, final_shift)``.
    """
    anchor = model.embed(x)
    x_adv, trace = pgd(model, x, lambda e: -shift_distance(e, anchor), budget)
    return x_adv, -trace[-1]


def collapse_adversary(model, xp, xn, budget):
    """Jointly perturb positives and negatives towards each other in embedding space.

    Returns ``(xp_adv, xn_adv, final_distance)``.
    """
    m = len(xp)

    def pair_distance(e):
        d = T.row_distance(e[:m], e[m:])
        return T.concat([d, d]) * 0.5

    x_adv, trace = pgd(model, np.concatenate([xp, xn]), pair_distance, budget)
    return x_adv[:m], x_adv[m:], trace[-1, :m]


def _triplet_mean(e_a, e_p, e_n, beta):
    return triplet_hinge(e_a, e_p, e_n, beta).mean()


def est_batch_loss(model, x, triplets, cfg):
    """EST loss for batch images ``x`` and position triplets; returns (loss, inner)."""
    x_adv, shift = max_shift_adversary(model, x, cfg.budget)
    e = model(x_adv)
    A, P, N = triplets.anchors, triplets.positives, triplets.negatives
    return _triplet_mean(e[A], e[P], e[N], cfg.beta), float(shift.mean())


def rest_batch_loss(model, x, triplets, cfg):
    x_adv, shift = max_shift_adversary(model, x, cfg.budget)
    n = len(x)
    e = model(np.concatenate([x, x_adv]))
    A, P, N = triplets.anchors, triplets.positives, triplets.negatives
    return _triplet_mean(e[A], e[P + n], e[N + n], cfg.beta), float(shift.mean())


def ses_batch_loss(model, x, triplets, cfg):
    x_adv, shift = max_shift_adversary(model, x, cfg.budget)
    n = len(x)
    e = model(np.concatenate([x, x_adv]))
    clean, adv = e[:n], e[n:]
    A, P, N = triplets.anchors, triplets.positives, triplets.negatives
    s = T.row_distance(adv, clean)
    penalty = (s[A] + s[P] + s[N]).mean()
    return _triplet_mean(clean[A], clean[P], clean[N], cfg.beta) + penalty, float(shift.mean())


def act_batch_loss(model, x, triplets, cfg):
    A, P, N = triplets.anchors, triplets.positives, triplets.negatives
    xp, xn, dist = collapse_adversary(model, x[P], x[N], cfg.budget)
    m = len(A)
    e = model(np.concatenate([x[A], xp, xn]))
    return _triplet_mean(e[:m], e[m:2 * m], e[2 * m:], cfg.beta), float(dist.mean())


def vanilla_batch_loss(model, x, triplets, cfg):
    e = model(x)
    A, P, N = triplets.anchors, triplets.positives, triplets.negatives
    return _triplet_mean(e[A], e[P], e[N], cfg.beta), float("nan")


BATCH_LOSSES = {"none": vanilla_batch_loss, "EST": est_batch_loss, "REST": rest_batch_loss,
                "SES": ses_batch_loss, "ACT": act_batch_loss}


def embedding_spread(emb):
    """Mean pairwise distance; values near 0 signal model collapse."""
    d = pairwise_distances(emb, emb)
    n = len(emb)
    return float(d.sum() / max(n * (n - 1), 1))


HISTORY_FIELDS = ("epoch", "R@1", "loss", "inner", "spread")


def train(model, dataset, cfg, val=None, out_dir=None, stamp=None, progress=None):
    """Train ``model`` in place; returns the per-epoch history (list of dicts).

    ``val`` (a LabeledImageSet, defaults to the training set) feeds the R@1
    and spread columns. With ``out_dir`` a checkpoint is written after each
    epoch together with ``history.csv``.
    """
    dataset.check_spc2()
    val = dataset if val is None else val
    rng = np.random.default_rng(np.random.SeedSequence([int(cfg.seed), 7]))
    state = AdamState()
    batch_loss = BATCH_LOSSES[cfg.kind]
    history = []
    for epoch in range(1, cfg.epochs + 1):
        losses, inner = [], []
        for step, batch in enumerate(spc2_epoch(dataset, cfg.batch_size, rng)):
            x = dataset.images[batch.indices]
            labels = dataset.labels[batch.indices]
            triplets = mine(batch, model.embed(x), labels, cfg.strategy, cfg.beta, rng)
            if len(triplets) == 0:
                continue
            model.zero_grad()
            loss, inner_obj = batch_loss(model, x, triplets, cfg)
            if not np.isfinite(loss.item()):
                raise NumericError(f"loss became {loss.item()} at epoch {epoch}, step {step} "
                                   f"({cfg.kind}, lr={cfg.lr})", iteration=step)
            loss.backward()
            sgd_adam_step(model, None, cfg.lr, state)
            losses.append(loss.item())
            inner.append(inner_obj)
        emb = model.embed(val.images)
        index = RankingIndex(emb, val.labels)
        row = {
            "epoch": epoch,
            "R@1": recall_at_k(index, 1),
            "loss": float(np.mean(losses)) if losses else float("nan"),
            "inner": float(np.mean(inner)) if inner else float("nan"),
            "spread": embedding_spread(emb),
        }
        history.append(row)
        if progress:
            progress(row)
        if out_dir is not None:
            os.makedirs(out_dir, exist_ok=True)
            model.save(os.path.join(out_dir, f"epoch{epoch:03d}.ckpt"), metadata=stamp or "")
            write_history_csv(history, os.path.join(out_dir, "history.csv"), stamp)
    return history


def write_history_csv(history, path, comment=None):
    with open(path, "w", newline="") as fh:
        if comment:
            fh.write(f"# {comment}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(HISTORY_FIELDS)
        for row in history:
            w.writerow([row[f] if f == "epoch" else repr(float(row[f])) for f in HISTORY_FIELDS])
