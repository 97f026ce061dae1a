import csv

import numpy as np
import pytest

from ranklab import defense as Dm
from ranklab import model as M
from ranklab import tensor as T
from ranklab.attacks import MONITOR, Budget
from ranklab.dataset import Spc2Batch, synth_blobs
from ranklab.defense import (BATCH_LOSSES, DefenseConfig, collapse_adversary, max_shift_adversary, train,
                             write_history_csv)
from ranklab.errors import ContractError, NumericError
from ranklab.triplet import TripletBatch, mine, triplet_loss


@pytest.fixture(scope="module")
def blobs():
    return synth_blobs(4, 32, 8, 0.15, 0)


@pytest.fixture
def batch(blobs):
    rng = np.random.default_rng(0)
    ids = np.concatenate([np.arange(c * 32, c * 32 + 4) for c in range(4)])
    model = M.mlp(8, (1, 8, 8), seed=1)
    x = blobs.images[ids]
    labels = blobs.labels[ids]
    trip = mine(Spc2Batch(np.arange(len(ids))), model.embed(x), labels, "uniform", 0.2, rng)
    return model, x, trip


def _value(kind, model, x, trip, budget):
    loss, _ = BATCH_LOSSES[kind](model, x, trip, DefenseConfig(kind, budget=budget))
    return loss


@pytest.mark.parametrize("kind", ["EST", "REST", "SES", "ACT"])
def test_zero_budget_reduces_to_vanilla(batch, kind):
    model, x, trip = batch
    zero = Budget(0.0, eta=4)
    model.zero_grad()
    got = _value(kind, model, x, trip, zero)
    got.backward()
    g_def = [p.grad.copy() for p in model.params.values()]
    model.zero_grad()
    ref = _value("none", model, x, trip, zero)
    ref.backward()
    assert got.item() == pytest.approx(ref.item(), rel=1e-12, abs=1e-12)
    for a, b in zip(g_def, (p.grad for p in model.params.values())):
        np.testing.assert_allclose(a, b, rtol=1e-9, atol=1e-12)
    model.zero_grad()


def test_vanilla_matches_triplet_loss(batch):
    model, x, trip = batch
    e = model.embed(x)
    want = triplet_loss(e[trip.anchors], e[trip.positives], e[trip.negatives], 0.2).item()
    assert _value("none", model, x, trip, Budget(0.0)).item() == pytest.approx(want, rel=1e-12)


def test_rest_keeps_anchor_clean(batch):
    # same adversaries, anchor swapped: REST equals the triplet loss on (clean A, adv P, adv N)
    model, x, trip = batch
    b = Budget(0.3, eta=4)
    x_adv, _ = max_shift_adversary(model, x, b)
    ec, ea = model.embed(x), model.embed(x_adv)
    A, P, N = trip.anchors, trip.positives, trip.negatives
    rest = triplet_loss(ec[A], ea[P], ea[N], 0.2).item()
    est = triplet_loss(ea[A], ea[P], ea[N], 0.2).item()
    assert _value("REST", model, x, trip, b).item() == pytest.approx(rest, rel=1e-12)
    assert _value("EST", model, x, trip, b).item() == pytest.approx(est, rel=1e-12)


def test_ses_penalty_non_negative(batch):
    model, x, trip = batch
    for eps in (0.05, 0.3, 1.0):
        b = Budget(eps, eta=4)
        assert _value("SES", model, x, trip, b).item() >= _value("none", model, x, trip, b).item()


def test_inner_adversaries_respect_budget(batch):
    model, x, trip = batch
    b = Budget(0.2, eta=6)
    before = MONITOR.violations
    x_adv, shift = max_shift_adversary(model, x, b)
    assert np.abs(x_adv - x).max() <= 0.2 + 1e-12 and np.all(shift >= 0)
    xp, xn, _ = collapse_adversary(model, x[trip.positives], x[trip.negatives], b)
    assert np.abs(xp - x[trip.positives]).max() <= 0.2 + 1e-12
    assert np.abs(xn - x[trip.negatives]).max() <= 0.2 + 1e-12
    assert MONITOR.violations == before


def test_collapsed_pair_gives_margin():
    rng = np.random.default_rng(0)
    a, p = rng.standard_normal((5, 3)), rng.standard_normal((5, 3))
    assert triplet_loss(a, p, p, 0.2).item() == pytest.approx(0.2, abs=1e-12)


def test_act_inner_attack_reduces_pair_distance(blobs):
    model = M.mlp(8, (1, 8, 8), seed=2)
    rng = np.random.default_rng(5)
    p = rng.integers(0, len(blobs), 200)
    n = rng.integers(0, len(blobs), 200)
    xp, xn = blobs.images[p], blobs.images[n]
    before = np.linalg.norm(model.embed(xp) - model.embed(xn), axis=1)
    active = before > 1e-9
    _, _, after = collapse_adversary(model, xp, xn, Budget(77 / 255, eta=8))
    assert np.mean(after[active] < before[active]) >= 0.8


def test_config_validation():
    with pytest.raises(ContractError):
        DefenseConfig("FOO")
    with pytest.raises(ContractError):
        DefenseConfig(lr=0)
    assert DefenseConfig().budget.epsilon == 77 / 255


@pytest.mark.parametrize("kind,floor", [("none", 95.0), ("ACT", 80.0)])
def test_separable_fixture_training(blobs, kind, floor):
    model = M.mlp(8, (1, 8, 8), seed=0)
    cfg = DefenseConfig(kind, budget=Budget(77 / 255, eta=8), epochs=30, batch_size=32, seed=0)
    hist = train(model, blobs, cfg)
    assert max(h["R@1"] for h in hist) >= floor
    assert all(np.isfinite(h["loss"]) for h in hist)
    assert all(h["spread"] > 0.05 for h in hist)


@pytest.mark.parametrize("kind", ["EST", "REST", "SES"])
def test_short_training_is_finite(blobs, kind):
    model = M.mlp(8, (1, 8, 8), seed=0)
    hist = train(model, blobs, DefenseConfig(kind, budget=Budget(0.1, eta=2), epochs=2, batch_size=32))
    assert len(hist) == 2
    assert all(np.isfinite(h["loss"]) and np.isfinite(h["inner"]) and h["spread"] > 0.05 for h in hist)


def test_nan_loss_aborts(blobs, monkeypatch):
    def broken(model, x, triplets, cfg):
        return model(x).sum() * np.nan, 0.0
    monkeypatch.setitem(Dm.BATCH_LOSSES, "none", broken)
    with pytest.raises(NumericError, match="epoch 1"):
        train(M.mlp(8, (1, 8, 8)), blobs, DefenseConfig(epochs=1, batch_size=32))


def test_training_is_deterministic_and_writes_artifacts(blobs, tmp_path):
    cfg = DefenseConfig("EST", budget=Budget(0.1, eta=2), epochs=2, batch_size=32, seed=4)
    m1, m2 = M.mlp(8, (1, 8, 8), seed=3), M.mlp(8, (1, 8, 8), seed=3)
    h1 = train(m1, blobs, cfg, out_dir=tmp_path / "a", stamp="config_hash: abc")
    h2 = train(m2, blobs, cfg, out_dir=tmp_path / "b", stamp="config_hash: abc")
    assert h1 == h2
    for name in ("epoch001.ckpt", "epoch002.ckpt", "history.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    lines = (tmp_path / "a" / "history.csv").read_text().splitlines()
    assert lines[0] == "# config_hash: abc"
    rows = list(csv.DictReader(lines[1:]))
    assert [int(r["epoch"]) for r in rows] == [1, 2]
    assert float(rows[1]["loss"]) == h1[1]["loss"]
