"""Empirical Robustness Score: ten attack columns normalised to [0, 100] and averaged.

column  raw score z                               normalised
CA+     mean rank percentile after attack          2z
CA-     mean rank percentile after attack          100 - z
QA+     mean rank percentile after attack          2z
QA-     mean rank percentile after attack          100 - z
TMA     cosine similarity to the target            100 (1 - z)
ES:D    embedding shift distance                   100 (1 - z / 2)
ES:R    R@1 of shifted queries                     z
LTM     R@1 after attack                           z
GTM     R@1 after attack                           z
GTT     top-1 retention within top-k (percent)     z

Every normalised value is clamped to [0, 100]. CA-/QA- use the post-attack
percentile itself (not its change from the clean value).
"""

from __future__ import annotations

import json
import math
import os
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

from .attacks import AttackSpec, Budget, Gallery, run_attack, write_trials_csv
from .errors import ContractError
from .ranking import benign_metrics

COLUMNS = ("CA+", "CA-", "QA+", "QA-", "TMA", "ES:D", "ES:R", "LTM", "GTM", "GTT")
BENIGN = ("R@1", "R@2", "mAP", "NMI")
# attack runs that produce the columns (ES yields both ES:D and ES:R)
RUNS = ("CA+", "CA-", "QA+", "QA-", "TMA", "ES", "LTM", "GTM", "GTT")

_NORMALIZERS = {
    "CA+": lambda z: 2.0 * z,
    "QA+": lambda z: 2.0 * z,
    "CA-": lambda z: 100.0 - z,
    "QA-": lambda z: 100.0 - z,
    "TMA": lambda z: 100.0 * (1.0 - z),
    "ES:D": lambda z: 100.0 * (1.0 - z / 2.0),
    "ES:R": lambda z: z,
    "LTM": lambda z: z,
    "GTM": lambda z: z,
    "GTT": lambda z: z,
}


def normalize(column, z):
    if column not in _NORMALIZERS:
        raise ContractError(f"unknown ERS column {column!r}; choose from {COLUMNS}")
    return float(min(100.0, max(0.0, _NORMALIZERS[column](float(z)))))


def aggregate(normalized):
    """Mean of exactly the ten normalised columns (dict keyed by column, or a sequence)."""
    if isinstance(normalized, dict):
        missing = set(COLUMNS) - set(normalized)
        if missing or len(normalized) != len(COLUMNS):
            raise ContractError(f"ERS needs exactly the columns {COLUMNS}")
        values = [normalized[c] for c in COLUMNS]
    else:
        values = list(normalized)
        if len(values) != len(COLUMNS):
            raise ContractError(f"ERS needs {len(COLUMNS)} scores, got {len(values)}")
    return math.fsum(values) / len(values)


def ers_from_raw(raw):
    """Normalise a dict of raw column scores and return ``(normalized, ers)``."""
    norm = {c: normalize(c, raw[c]) for c in COLUMNS}
    return norm, aggregate(norm)


@dataclass(frozen=True)
class ProtocolConfig:
    trials: int = None  # None: min(|X|, 500)
    epsilon: float = 77.0 / 255.0
    eta: int = 32
    w: int = 1
    G: int = 5
    zeta: float = 2e4
    k: int = 4
    seed: int = 0
    chunk: int = 50

    def __post_init__(self):
        if self.trials is not None and self.trials < 1:
            raise ContractError("trials must be >= 1")

    def budget(self):
        return Budget(self.epsilon, eta=self.eta)

    def resolve_trials(self, n):
        t = min(n, 500) if self.trials is None else self.trials
        if t > n:
            warnings.warn(f"{t} trials requested but the gallery holds {n}; using {n}")
            t = n
        return t


@dataclass
class ErsReport:
    raw: dict
    normalized: dict
    ers: float
    benign: dict
    provenance: dict = field(default_factory=dict)
    rows: list = field(default_factory=list, repr=False)

    def to_dict(self):
        return {
            "provenance": self.provenance,
            "benign": self.benign,
            "raw": self.raw,
            "normalized": self.normalized,
            "ERS": self.ers,
        }

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text):
        d = json.loads(text)
        return cls(d["raw"], d["normalized"], d["ERS"], d["benign"], d.get("provenance", {}))

    def table(self):
        """Fixed-width table: benign metrics, the ten raw columns, then ERS."""
        head = list(BENIGN) + list(COLUMNS) + ["ERS"]
        vals = [self.benign.get(b, float("nan")) for b in BENIGN] + [self.raw[c] for c in COLUMNS] + [self.ers]
        fmt = [_fmt(h, v) for h, v in zip(head, vals)]
        widths = [max(len(h), len(f)) for h, f in zip(head, fmt)]
        lines = [f"# {k}: {v}" for k, v in sorted(self.provenance.items())]
        lines.append("  ".join(h.rjust(w) for h, w in zip(head, widths)))
        lines.append("  ".join(f.rjust(w) for f, w in zip(fmt, widths)))
        norm = ["" for _ in BENIGN] + [f"{self.normalized[c]:.1f}" for c in COLUMNS] + [f"{self.ers:.1f}"]
        lines.append("  ".join(f.rjust(w) for f, w in zip(norm, widths)) + "  (normalized)")
        return "\n".join(lines) + "\n"

    def write(self, out_dir, shards=True):
        os.makedirs(out_dir, exist_ok=True)
        comment = f"config_hash: {self.provenance.get('config_hash', '')}"
        with open(os.path.join(out_dir, "report.txt"), "w") as fh:
            fh.write(self.table())
        with open(os.path.join(out_dir, "report.json"), "w") as fh:
            fh.write(self.to_json())
        if shards:
            for run in sorted({r["attack"] for r in self.rows}):
                part = [r for r in self.rows if r["attack"] == run]
                write_trials_csv(part, os.path.join(out_dir, f"trials_{_slug(run)}.csv"), comment)


def _slug(kind):
    return kind.replace("+", "plus").replace("-", "minus").replace(":", "")


def _fmt(col, v):
    if col in ("TMA", "ES:D"):
        return f"{v:.3f}"
    return f"{v:.1f}"


def parse_table(text):
    """Recover ``{column: value}`` (raw row) from :meth:`ErsReport.table` output."""
    lines = [ln for ln in text.splitlines() if ln and not ln.startswith("#")]
    head, row = lines[0].split(), lines[1].split()
    return {h: float(v) for h, v in zip(head, row)}


def run_protocol(model, dataset, cfg=ProtocolConfig(), provenance=None, jobs=1, gallery=None, progress=None):
    """Benign metrics plus the ten ERS attack columns on ``dataset`` as the gallery."""
    gallery = Gallery(model, dataset) if gallery is None else gallery
    trials = cfg.resolve_trials(len(gallery))
    budget = cfg.budget()
    raw, rows = {}, []
    for run in RUNS:
        spec = AttackSpec(run, budget, w=cfg.w, G=cfg.G, zeta=cfg.zeta, k=cfg.k, seed=cfg.seed)
        out, r = run_attack(model, gallery, spec, trials, chunk=cfg.chunk, jobs=jobs)
        rows.extend(r)
        for metric, scores in out.scores.items():
            raw[metric] = float(np.mean(scores))
        if progress:
            progress(run, {m: raw[m] for m in out.scores})
    normalized, ers = ers_from_raw(raw)
    prov = {"epsilon": cfg.epsilon, "eta": cfg.eta, "trials": trials, "seed": cfg.seed,
            "gallery_size": len(gallery), "model": model.fingerprint()}
    prov.update(provenance or {})
    benign = benign_metrics(gallery.index, seed=cfg.seed)
    return ErsReport(raw, normalized, ers, benign, prov, rows)


def config_dict(cfg):
    return asdict(cfg)
