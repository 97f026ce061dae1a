"""PGD engine and the ranking attack objectives.

Every attack perturbs one image per trial. Trials are stacked into a batch
and pushed through a single forward/backward pass per PGD step; because each
trial's loss depends only on its own input, the per-trial gradients are
exactly those of independent runs.

Conventions shared by all objectives:

* gallery embeddings are computed once and held constant;
* a query drawn from the gallery never competes against its own entry;
* a perturbed candidate's original gallery entry stays in the gallery;
* CA/QA losses are plain sums of margin-0 hinges.
"""

from __future__ import annotations

import csv
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ContractError, NumericError
from .ranking import RankingIndex, pairwise_distances, ranks_from_distances, top1_pool_size
from .tensor import Tensor

KINDS = ("CA+", "CA-", "QA+", "QA-", "SPQA+", "SPQA-", "TMA", "ES", "LTM", "GTM", "GTT")
# metrics written by each attack kind
METRICS = {
    "CA+": ("CA+",), "CA-": ("CA-",), "QA+": ("QA+",), "QA-": ("QA-",),
    "SPQA+": ("SPQA+", "SP"), "SPQA-": ("SPQA-", "SP"),
    "TMA": ("TMA",), "ES": ("ES:D", "ES:R"), "LTM": ("LTM",), "GTM": ("GTM",), "GTT": ("GTT",),
}
XI_MAX = 1e9
SHIFT_EPS = 1e-6  # offset inside the max-shift distance; keeps the clean start off the kink


def auto_alpha(epsilon):
    return max(1.0 / 255.0, round(epsilon * 255.0 / 25.0) / 255.0)


@dataclass(frozen=True)
class Budget:
    """l-inf radius, step size and iteration count of a PGD run."""

    epsilon: float
    alpha: float = None
    eta: int = 32

    def __post_init__(self):
        if not 0.0 <= self.epsilon <= 1.0:
            raise ContractError(f"epsilon must lie in [0, 1], got {self.epsilon}")
        if self.alpha is None:
            object.__setattr__(self, "alpha", auto_alpha(self.epsilon))
        if self.alpha < 0 or self.eta < 0:
            raise ContractError("alpha and eta must be non-negative")

    @classmethod
    def fgsm(cls, epsilon):
        return cls(epsilon, alpha=epsilon, eta=1)


class BudgetMonitor:
    """Counts checked PGD iterates (per sample) and budget violations."""

    def __init__(self):
        self.reset()

    def reset(self):
        self.iterations = 0
        self.violations = 0

    def check(self, x, x0, epsilon, tol=1e-12):
        n = len(x)
        flat = (x - x0).reshape(n, -1)
        bad = (np.abs(flat).max(axis=1) > epsilon + tol) | (x.reshape(n, -1).min(axis=1) < 0.0) \
            | (x.reshape(n, -1).max(axis=1) > 1.0)
        self.iterations += n
        self.violations += int(bad.sum())
        if bad.any():
            raise ContractError(f"{int(bad.sum())} iterate(s) left the budget")


MONITOR = BudgetMonitor()


@dataclass
class AttackOutcome:
    """Adversarial inputs of a batch of trials and their per-trial scores."""

    kind: str
    x0: np.ndarray
    x_adv: np.ndarray
    trace: np.ndarray  # (eta + 1, trials) objective value before each step and at the end
    scores: dict = field(default_factory=dict)
    focal: np.ndarray = None  # gallery id of the attacked item per trial

    @property
    def perturbation(self):
        return self.x_adv - self.x0

    def __len__(self):
        return len(self.x0)


def pgd(model, x0, objective, budget, monitor=MONITOR):
    """Minimise ``objective`` over the l-inf ball around ``x0`` with sign steps.

    ``objective`` maps embeddings (n, D) to per-sample losses (n,) (or a
    scalar). Returns ``(x_adv, trace)`` where ``trace[t]`` holds the
    per-sample objective at iterate ``t``.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    single = x0.ndim == 3
    if single:
        x0 = x0[None]
    eps, alpha = budget.epsilon, budget.alpha
    lo, hi = np.maximum(x0 - eps, 0.0), np.minimum(x0 + eps, 1.0)
    x = x0.copy()
    trace = []
    with model.frozen():
        for it in range(budget.eta + 1):
            xt = Tensor(x, requires_grad=it < budget.eta)
            loss = objective(model(xt))
            per = np.broadcast_to(loss.data, (len(x),)) if loss.ndim == 0 else loss.data
            trace.append(np.array(per, dtype=np.float64))
            if it == budget.eta:
                break
            if not loss.requires_grad:
                continue  # objective does not depend on the input
            T.backward(loss.sum() if loss.ndim else loss)
            g = xt.grad
            if not np.all(np.isfinite(g)):
                raise NumericError(f"non-finite input gradient at PGD iteration {it}", iteration=it)
            x = np.clip(x - alpha * np.sign(g), lo, hi)
            if monitor is not None:
                monitor.check(x, x0, eps)
    trace = np.stack(trace)
    return (x[0], trace[:, 0]) if single else (x, trace)


# --- objectives --------------------------------------------------------------
# each builder returns a function of the perturbed embeddings e (n, D) -> (n,)

def shift_distance(e, anchor):
    """Max-shift distance ``||e - anchor + SHIFT_EPS||`` used as an attack objective."""
    return T.norm(e - (np.asarray(anchor) - SHIFT_EPS), axis=-1)


def _mask_tensor(mask):
    return np.asarray(mask, dtype=np.float64)


def ca_objective(query_emb, query_gallery_dist, valid, sign):
    """CA+ (``sign=+1``) or CA- (``sign=-1``) for a stack of trials.

    ``query_emb`` (n, w, D), ``query_gallery_dist`` (n, w, N) and ``valid``
    (n, w, N) marks gallery items that compete for each query.
    """
    qe = np.asarray(query_emb)
    dqx = np.asarray(query_gallery_dist)
    m = _mask_tensor(valid)
    n, w, _ = qe.shape
    if w == 0:
        raise ContractError("empty query set")

    def f(e):
        diff = T.reshape(e, (n, 1, -1)) - qe  # (n, w, D) broadcast
        dqc = T.norm(diff, axis=-1).reshape(n, w, 1)
        h = (T.hinge(dqc - dqx) if sign > 0 else T.hinge(dqx - dqc)) * m
        return h.reshape(n, -1).sum(axis=1)
    return f


def ca_plus_loss(c_emb, query_emb, gallery_emb):
    """Single-trial CA+ loss: ``sum_q sum_x [d(q,c) - d(q,x)]_+``."""
    return _single_ca(c_emb, query_emb, gallery_emb, +1)


def ca_minus_loss(c_emb, query_emb, gallery_emb):
    """Single-trial CA- loss: ``sum_q sum_x [d(q,x) - d(q,c)]_+``."""
    return _single_ca(c_emb, query_emb, gallery_emb, -1)


def _single_ca(c_emb, query_emb, gallery_emb, sign):
    q = np.atleast_2d(np.asarray(query_emb, dtype=np.float64))
    if len(q) == 0:
        raise ContractError("empty query set")
    X = np.asarray(gallery_emb, dtype=np.float64)
    dqx = pairwise_distances(q, X)[None]
    e = T.as_tensor(c_emb).reshape(1, -1)
    return ca_objective(q[None], dqx, np.ones_like(dqx, bool), sign)(e).sum()


def _qa_terms(dist, cand_idx, valid, sign):
    """Hinge sums for QA given (n, N) distances and (n, m) candidate ids.

    Competitors are the ``valid`` gallery items outside the candidate set.
    """
    n, m = cand_idx.shape
    if m == 0:
        raise ContractError("empty candidate set")
    mask = np.array(valid, dtype=bool, copy=True)
    mask[np.repeat(np.arange(n), m), cand_idx.reshape(-1)] = False
    rows = np.repeat(np.arange(n), m)
    dqc = T.take(dist, (rows, cand_idx.reshape(-1))).reshape(n, m, 1)
    dqx = T.reshape(dist, (n, 1, -1))
    h = T.hinge(dqc - dqx) if sign > 0 else T.hinge(dqx - dqc)
    return (h * _mask_tensor(mask)[:, None, :]).reshape(n, -1).sum(axis=1)


def qa_objective(gallery_emb, cand_idx, valid, sign):
    """QA+ (``sign=+1``) or QA- (``sign=-1``); ``valid`` (n, N) marks competing items."""
    X = np.asarray(gallery_emb)
    cand_idx = np.asarray(cand_idx, dtype=np.intp)

    def f(e):
        return _qa_terms(T.pairwise_distance(e, X), cand_idx, valid, sign)
    return f


def spqa_objective(gallery_emb, cand_idx, sp_idx, valid, sign, zeta):
    """QA with the semantics-preserving term ``xi * L_QA+(q, C_SP)``.

    ``xi = min(1e9, exp(zeta * L_SP))`` is evaluated on the current iterate
    and held constant for the gradient.
    """
    X = np.asarray(gallery_emb)
    cand_idx = np.asarray(cand_idx, dtype=np.intp)
    sp_idx = np.asarray(sp_idx, dtype=np.intp)

    def f(e):
        dist = T.pairwise_distance(e, X)
        main = _qa_terms(dist, cand_idx, valid, sign)
        sp = _qa_terms(dist, sp_idx, valid, +1)
        return main + sp * sp_weight(sp.data, zeta)
    return f


def sp_weight(sp_loss, zeta):
    """``min(1e9, exp(zeta * L_SP))`` without overflow."""
    z = zeta * np.asarray(sp_loss, dtype=np.float64)
    cap = math.log(XI_MAX)
    return np.where(z >= cap, XI_MAX, np.exp(np.minimum(z, cap)))


def _single_valid(n_gallery, exclude):
    valid = np.ones((1, n_gallery), bool)
    for i in exclude or ():
        valid[0, int(i)] = False
    return valid


def qa_plus_loss(q_emb, cand_ids, gallery_emb, exclude=None):
    """Single-query QA+: ``sum_c sum_x [d(q,c) - d(q,x)]_+`` over x outside C and ``exclude``."""
    return _single_qa(q_emb, cand_ids, gallery_emb, exclude, +1)


def qa_minus_loss(q_emb, cand_ids, gallery_emb, exclude=None):
    """Single-query QA-: ``sum_c sum_x [d(q,x) - d(q,c)]_+`` over x outside C and ``exclude``."""
    return _single_qa(q_emb, cand_ids, gallery_emb, exclude, -1)


def spqa_loss(q_emb, cand_ids, sp_ids, gallery_emb, zeta, sign=-1, exclude=None):
    X = np.asarray(gallery_emb, dtype=np.float64)
    f = spqa_objective(X, np.atleast_1d(cand_ids)[None], np.atleast_1d(sp_ids)[None],
                       _single_valid(len(X), exclude), sign, zeta)
    return f(T.as_tensor(q_emb).reshape(1, -1)).sum()


def _single_qa(q_emb, cand_ids, gallery_emb, exclude, sign):
    X = np.asarray(gallery_emb, dtype=np.float64)
    cand = np.atleast_1d(np.asarray(cand_ids, dtype=np.intp))
    f = qa_objective(X, cand[None], _single_valid(len(X), exclude), sign)
    return f(T.as_tensor(q_emb).reshape(1, -1)).sum()


def tma_objective(target_emb):
    t = np.asarray(target_emb)
    return lambda e: 1.0 - (e * t).sum(axis=1)


def es_objective(benign_emb):
    a = np.asarray(benign_emb)
    return lambda e: -shift_distance(e, a)


def ltm_objective(gallery_emb, positive, negative):
    """``[max_n d(q,n) - min_p d(q,p)]_+`` with (n, N) boolean member masks."""
    X = np.asarray(gallery_emb)
    big = 1e6
    pen_n = np.where(negative, 0.0, -big)
    pen_p = np.where(positive, 0.0, -big)

    def f(e):
        d = T.pairwise_distance(e, X)
        far_neg = T.tmax(d + pen_n, axis=1)
        near_pos = -T.tmax(-d + pen_p, axis=1)
        return T.hinge(far_neg - near_pos)
    return f


def gtm_objective(target_emb):
    t = np.asarray(target_emb)
    return lambda e: T.row_distance(e, t)


def tma_loss(q_emb, target_emb):
    return tma_objective(np.atleast_2d(target_emb))(T.as_tensor(q_emb).reshape(1, -1)).sum()


def es_loss(q_emb, benign_emb):
    return es_objective(np.atleast_2d(benign_emb))(T.as_tensor(q_emb).reshape(1, -1)).sum()


def ltm_loss(q_emb, positive_emb, negative_emb):
    P = np.atleast_2d(positive_emb)
    N = np.atleast_2d(negative_emb)
    X = np.concatenate([P, N])
    pos = np.zeros((1, len(X)), bool)
    pos[0, :len(P)] = True
    return ltm_objective(X, pos, ~pos)(T.as_tensor(q_emb).reshape(1, -1)).sum()


def gtm_loss(q_emb, target_emb):
    return gtm_objective(np.atleast_2d(target_emb))(T.as_tensor(q_emb).reshape(1, -1)).sum()


# --- protocol --------------------------------------------------------------

@dataclass(frozen=True)
class AttackSpec:
    kind: str
    budget: Budget
    w: int = 1  # query-set size for CA, candidate-set size for QA
    G: int = 5
    zeta: float = 2e4
    k: int = 4
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ContractError(f"unknown attack {self.kind!r}; choose from {KINDS}")
        if self.w < 1 or self.G < 1 or self.k < 1:
            raise ContractError("w, G and k must be >= 1")


class Gallery:
    """Frozen gallery: images, labels, embeddings and cached neighbour lists."""

    def __init__(self, model, dataset, embeddings=None):
        self.dataset = dataset
        self.images = dataset.images
        self.labels = np.asarray(dataset.labels)
        emb = model.embed(self.images) if embeddings is None else np.asarray(embeddings)
        self.index = RankingIndex(emb, self.labels)
        self.emb = self.index.embeddings
        self._order = None

    def __len__(self):
        return len(self.labels)

    def neighbours(self, ids, count):
        """The ``count`` nearest other gallery items of each id (ties by id)."""
        ids = np.atleast_1d(np.asarray(ids, dtype=np.intp))
        d = pairwise_distances(self.emb[ids], self.emb)
        d[np.arange(len(ids)), ids] = np.inf
        return np.argsort(d, axis=1, kind="stable")[:, :count]

    def top1(self, ids):
        return self.neighbours(ids, 1)[:, 0]

    def nearest_negative(self, ids):
        """Closest gallery item of a different class for each id (ties by id)."""
        ids = np.atleast_1d(np.asarray(ids, dtype=np.intp))
        d = pairwise_distances(self.emb[ids], self.emb)
        d[self.labels[None, :] == self.labels[ids][:, None]] = np.inf
        return np.argmin(d, axis=1)


def kind_code(kind):
    return KINDS.index(kind)


def trial_rng(seed, kind, trial):
    """Independent stream for one trial: seeded by (master seed, attack, trial id)."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), kind_code(kind), int(trial)]))


def focal_items(n, trials, seed):
    """Gallery ids attacked by trials ``0..trials-1`` (without replacement while possible)."""
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 1 << 16]))
    reps = -(-trials // n)
    return np.concatenate([rng.permutation(n) for _ in range(reps)])[:trials]


def _others(rng, n, exclude, size):
    pool = np.setdiff1d(np.arange(n), np.atleast_1d(exclude))
    return rng.choice(pool, size=min(size, len(pool)), replace=False)


def _sample(gallery, spec, trial, focal):
    """Protocol partners of one trial (query set, candidate set, targets)."""
    rng = trial_rng(spec.seed, spec.kind, trial)
    n = len(gallery)
    kind = spec.kind
    if kind == "CA+":
        return {"queries": _others(rng, n, focal, spec.w)}
    if kind == "CA-":
        pool = gallery.neighbours(focal, top1_pool_size(n - 1, spec.w))[0]
        return {"queries": rng.choice(pool, size=min(spec.w, len(pool)), replace=False)}
    if kind in ("QA+", "SPQA+"):
        cands = _others(rng, n, focal, spec.w)
    elif kind in ("QA-", "SPQA-"):
        pool = gallery.neighbours(focal, top1_pool_size(n - 1, spec.w))[0]
        cands = rng.choice(pool, size=min(spec.w, len(pool)), replace=False)
    elif kind == "TMA":
        other = np.flatnonzero(gallery.labels != gallery.labels[focal])
        if len(other) == 0:
            raise ContractError("TMA needs at least two classes in the gallery")
        return {"target": int(rng.choice(other))}
    else:
        return {}
    out = {"candidates": cands}
    if kind.startswith("SPQA"):
        near = gallery.neighbours(focal, spec.G + len(cands))[0]
        out["sp"] = np.array([c for c in near if c not in set(cands.tolist())][:spec.G])
    return out


def _self_mask(n_gallery, ids):
    """(len(ids), N) mask that is False on each row's own gallery entry."""
    ids = np.asarray(ids, dtype=np.intp)
    m = np.ones((len(ids), n_gallery), bool)
    m[np.arange(len(ids)), ids] = False
    return m


def _hits_at_1(e, gallery, focal):
    d = pairwise_distances(e, gallery.emb)
    d[np.arange(len(focal)), focal] = np.inf
    top = np.argmin(d, axis=1)  # argmin returns the first (lowest id) minimum
    return 100.0 * (gallery.labels[top] == gallery.labels[focal])


def _run_chunk(model, gallery, spec, trials):
    """Attack the focal items of ``trials``; returns an AttackOutcome."""
    trials = np.asarray(trials)
    focal = focal_items(len(gallery), int(trials.max()) + 1, spec.seed)[trials]
    plans = [_sample(gallery, spec, t, f) for t, f in zip(trials, focal)]
    X = gallery.emb
    N = len(gallery)
    n = len(trials)
    kind = spec.kind
    x0 = gallery.images[focal]
    base = gallery.emb[focal]
    scores = {}

    if kind in ("CA+", "CA-"):
        Q = np.stack([p["queries"] for p in plans])  # (n, w)
        w = Q.shape[1]
        qe = X[Q]
        dqx = pairwise_distances(qe.reshape(n * w, -1), X).reshape(n, w, N)
        valid = np.ones((n, w, N), bool)
        valid[np.arange(n)[:, None], np.arange(w)[None, :], Q] = False
        obj = ca_objective(qe, dqx, valid, +1 if kind == "CA+" else -1)
        x_adv, trace = pgd(model, x0, obj, spec.budget)
        e = model.embed(x_adv)
        dqc = np.sqrt(((qe - e[:, None, :]) ** 2).sum(-1))
        skip = ~valid
        skip[np.arange(n), :, focal] = True  # the perturbed candidate replaces its own entry
        ranks = ranks_from_distances(dqx.reshape(n * w, N), dqc.reshape(-1), np.repeat(focal, w),
                                     skip=skip.reshape(n * w, N))
        scores[kind] = (100.0 * ranks / (N - 1)).reshape(n, w).mean(axis=1)
    elif kind in ("QA+", "QA-", "SPQA+", "SPQA-"):
        C = np.stack([p["candidates"] for p in plans])
        valid = _self_mask(N, focal)
        sign = +1 if kind.endswith("+") else -1
        if kind.startswith("SP"):
            S = np.stack([p["sp"] for p in plans])
            obj = spqa_objective(X, C, S, valid, sign, spec.zeta)
        else:
            obj = qa_objective(X, C, valid, sign)
        x_adv, trace = pgd(model, x0, obj, spec.budget)
        e = model.embed(x_adv)
        d = pairwise_distances(e, X)

        def pct(ids):
            m = ids.shape[1]
            rows = np.repeat(np.arange(n), m)
            r = ranks_from_distances(np.repeat(d, m, axis=0), d[rows, ids.reshape(-1)], ids.reshape(-1),
                                     skip=~np.repeat(valid, m, axis=0))
            return (100.0 * r / (N - 1)).reshape(n, m).mean(axis=1)
        scores[kind] = pct(C)
        if kind.startswith("SP"):
            scores["SP"] = pct(S)
    elif kind == "TMA":
        tgt = X[[p["target"] for p in plans]]
        x_adv, trace = pgd(model, x0, tma_objective(tgt), spec.budget)
        scores["TMA"] = (model.embed(x_adv) * tgt).sum(axis=1)
    elif kind == "ES":
        x_adv, trace = pgd(model, x0, es_objective(base), spec.budget)
        e = model.embed(x_adv)
        scores["ES:D"] = np.sqrt(((e - base) ** 2).sum(axis=1))
        scores["ES:R"] = _hits_at_1(e, gallery, focal)
    elif kind == "LTM":
        same = gallery.labels[None, :] == gallery.labels[focal][:, None]
        pos = same & _self_mask(N, focal)
        if not pos.any(axis=1).all():
            raise ContractError("LTM needs a same-class gallery item for every query")
        x_adv, trace = pgd(model, x0, ltm_objective(X, pos, ~same), spec.budget)
        scores["LTM"] = _hits_at_1(model.embed(x_adv), gallery, focal)
    elif kind == "GTM":
        tgt = X[gallery.nearest_negative(focal)]
        x_adv, trace = pgd(model, x0, gtm_objective(tgt), spec.budget)
        scores["GTM"] = _hits_at_1(model.embed(x_adv), gallery, focal)
    elif kind == "GTT":
        top = gallery.top1(focal)
        valid = _self_mask(N, focal)
        x_adv, trace = pgd(model, x0, qa_objective(X, top[:, None], valid, -1), spec.budget)
        d = pairwise_distances(model.embed(x_adv), X)
        r = ranks_from_distances(d, d[np.arange(n), top], top, skip=~valid)
        scores["GTT"] = 100.0 * (r <= spec.k)
    return AttackOutcome(kind, x0, x_adv, trace, scores, focal)


def _chunk_job(args):
    model, gallery, spec, trials = args
    t0 = time.perf_counter()
    out = _run_chunk(model, gallery, spec, trials)
    return trials, out, time.perf_counter() - t0


def run_attack(model, gallery, spec, trials, chunk=50, jobs=1):
    """Run ``trials`` protocol trials of ``spec``; returns ``(outcome, rows)``.

    Trials are processed in fixed chunks of ``chunk`` so results do not
    depend on ``jobs``. ``rows`` holds one dict per (trial, metric).
    """
    if trials < 1:
        raise ContractError("need at least one trial")
    ids = np.arange(trials)
    parts = [ids[i:i + chunk] for i in range(0, trials, chunk)]
    work = [(model, gallery, spec, p) for p in parts]
    if jobs > 1 and len(parts) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_chunk_job, work))
    else:
        results = [_chunk_job(wk) for wk in work]
    outcome = AttackOutcome(
        spec.kind,
        np.concatenate([r[1].x0 for r in results]),
        np.concatenate([r[1].x_adv for r in results]),
        np.concatenate([r[1].trace for r in results], axis=1),
        {m: np.concatenate([r[1].scores[m] for r in results]) for m in METRICS[spec.kind]},
        np.concatenate([r[1].focal for r in results]),
    )
    rows = []
    walls = np.concatenate([np.full(len(r[0]), r[2] / len(r[0])) for r in results])
    for t in range(trials):
        for m in METRICS[spec.kind]:
            rows.append({
                "trial": t, "attack": spec.kind, "metric": m, "epsilon": spec.budget.epsilon,
                "w": spec.w, "seed": spec.seed, "item": int(outcome.focal[t]),
                "score": float(outcome.scores[m][t]), "objective_start": float(outcome.trace[0, t]),
                "objective_end": float(outcome.trace[-1, t]), "iterations": spec.budget.eta,
                "wall_time": float(walls[t]),
            })
    return outcome, rows


CSV_FIELDS = ("trial", "attack", "metric", "epsilon", "w", "seed", "item", "score",
              "objective_start", "objective_end", "iterations")


def write_trials_csv(rows, path, comment=None, wall_time=False):
    """One line per (trial, metric); floats in round-trip repr.

    Wall time is only written when asked so that default output is
    byte-deterministic.
    """
    fields = CSV_FIELDS + (("wall_time",) if wall_time else ())
    with open(path, "w", newline="") as fh:
        if comment:
            fh.write(f"# {comment}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(fields)
        for r in sorted(rows, key=lambda r: (r["attack"], r["trial"], r["metric"])):
            w.writerow([repr(r[f]) if isinstance(r[f], float) else r[f] for f in fields])


def read_trials_csv(path):
    with open(path, newline="") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    rows = list(csv.DictReader(lines))
    for r in rows:
        for f in ("trial", "w", "seed", "item", "iterations"):
            r[f] = int(r[f])
        for f in ("epsilon", "score", "objective_start", "objective_end", "wall_time"):
            if f in r:
                r[f] = float(r[f])
    return rows
