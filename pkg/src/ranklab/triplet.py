"""Triplet ranking loss, its closed-form gradients, and triplet miners.

Miners work on an SPC-2 batch: every sample is an anchor and its pair
partner is the positive. Strategies:

uniform   negative uniform over other-class batch members
semihard  negative with d(a,p) < d(a,n) < d(a,p) + beta
softhard  hardest (farthest) same-class positive in the batch, then a
          random negative closer than that positive
distance  negative drawn with weight inversely proportional to the density
          of pairwise distances on the unit sphere in R^D, distances clipped
          to [0.5, 1.4] (distance-weighted sampling)

The softhard and distance rules reproduce the usual metric-learning
benchmark definitions. Any miner whose candidate set is empty falls back to
uniform for that anchor.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ContractError, DegenerateInputError

STRATEGIES = ("uniform", "semihard", "softhard", "distance")
DEFAULT_MARGIN = 0.2


@dataclass(frozen=True)
class Margin:
    beta: float = DEFAULT_MARGIN

    def __post_init__(self):
        if not (np.isfinite(self.beta) and self.beta > 0):
            raise ContractError(f"margin must be finite and > 0, got {self.beta}")

    def __float__(self):
        return float(self.beta)


def _beta(beta):
    return float(beta.beta if isinstance(beta, Margin) else Margin(float(beta)).beta)


def triplet_hinge(q, p, n, beta=DEFAULT_MARGIN):
    """Per-triplet ``[beta + d(q,p) - d(q,n)]_+`` as a (B,) tensor."""
    return T.hinge(_beta(beta) + T.row_distance(q, p) - T.row_distance(q, n))


def triplet_loss(q, p, n, beta=DEFAULT_MARGIN):
    """Mean triplet hinge over rows of (B, D) embeddings; a scalar tensor."""
    return triplet_hinge(q, p, n, beta).mean()


def analytic_triplet_grads(v_q, v_p, v_n):
    """Gradients of ``beta + d(q,p) - d(q,n)`` for an active triplet.

    Works on single vectors (D,) or stacked rows (B, D); the margin drops out.
    """
    v_q, v_p, v_n = (np.asarray(v, dtype=np.float64) for v in (v_q, v_p, v_n))
    qp = v_q - v_p
    qn = v_q - v_n
    dqp = np.linalg.norm(qp, axis=-1, keepdims=True)
    dqn = np.linalg.norm(qn, axis=-1, keepdims=True)
    if np.any(dqp == 0) or np.any(dqn == 0):
        raise DegenerateInputError("anchor coincides with positive or negative")
    u_p = qp / dqp
    u_n = qn / dqn
    return u_p - u_n, -u_p, u_n


@dataclass(frozen=True)
class TripletBatch:
    """Triplets as positions inside a source batch plus their dataset ids."""

    anchors: np.ndarray
    positives: np.ndarray
    negatives: np.ndarray
    source: object = None

    def __len__(self):
        return len(self.anchors)

    def ids(self):
        idx = np.asarray(self.source.indices)
        return idx[self.anchors], idx[self.positives], idx[self.negatives]

    def validate(self, labels):
        """Check label invariants given per-position labels of the source batch."""
        la, lp, ln = labels[self.anchors], labels[self.positives], labels[self.negatives]
        if not (np.all(la == lp) and np.all(la != ln) and np.all(self.anchors != self.positives)):
            raise ContractError("triplet batch violates label invariants")
        return True


def _sphere_log_density(d, dim):
    # log density of distances between uniform points on S^{dim-1}
    return (2.0 - dim) * np.log(d) - 0.5 * (dim - 3) * np.log(np.maximum(1.0 - 0.25 * d * d, 1e-12))


def mine(batch, embeddings, labels, strategy="uniform", beta=DEFAULT_MARGIN, rng=None):
    """Draw one negative per anchor.

    ``embeddings`` and ``labels`` are aligned with the batch positions.
    Anchors with no other-class member in the batch are skipped.
    """
    if strategy not in STRATEGIES:
        raise ContractError(f"unknown mining strategy {strategy!r}; choose from {STRATEGIES}")
    beta = _beta(beta)
    rng = np.random.default_rng() if rng is None else rng
    emb = np.asarray(embeddings, dtype=np.float64)
    labels = np.asarray(labels)
    B = len(labels)
    if B % 2 or emb.shape[0] != B:
        raise ContractError("mining needs an even-sized SPC-2 batch with one embedding per sample")
    d = np.sqrt(np.maximum(((emb[:, None, :] - emb[None, :, :]) ** 2).sum(-1), 0.0))
    partner = np.arange(B) ^ 1
    dim = emb.shape[1]
    A, P, N = [], [], []
    for a in range(B):
        neg = np.flatnonzero(labels != labels[a])
        if len(neg) == 0:
            continue
        p = partner[a]
        cand = neg
        if strategy == "semihard":
            dn = d[a, neg]
            cand = neg[(dn > d[a, p]) & (dn < d[a, p] + beta)]
        elif strategy == "softhard":
            pos = np.flatnonzero((labels == labels[a]) & (np.arange(B) != a))
            p = pos[np.argmax(d[a, pos])]
            cand = neg[d[a, neg] < d[a, p]]
        if strategy == "distance":
            dn = np.clip(d[a, neg], 0.5, 1.4)
            logw = -_sphere_log_density(dn, dim)
            w = np.exp(logw - logw.max())
            n = neg[rng.choice(len(neg), p=w / w.sum())]
        else:
            if len(cand) == 0:
                cand = neg
            n = cand[rng.integers(len(cand))]
        A.append(a)
        P.append(p)
        N.append(n)
    as_arr = lambda v: np.asarray(v, dtype=np.intp)
    return TripletBatch(as_arr(A), as_arr(P), as_arr(N), batch)
