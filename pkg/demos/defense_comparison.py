"""Vanilla training against the four adversarial-training defenses on synthetic data.

Each model is scored with the full ten-attack protocol. Small and noisy by
design; takes about a minute:

    python3 demos/defense_comparison.py
"""

from ranklab import model as M
from ranklab.attacks import Budget
from ranklab.dataset import stratified_split, synth_blobs
from ranklab.defense import DefenseConfig, train
from ranklab.ers import ProtocolConfig, run_protocol

data = synth_blobs(6, 60, 12, 0.15, seed=0)
train_set, gallery_set = stratified_split(data, 30, seed=0)

protocol = ProtocolConfig(trials=60, epsilon=32 / 255, eta=16)
inner = Budget(32 / 255, eta=16)

results = {}
for kind in ("none", "EST", "REST", "SES", "ACT"):
    model = M.mlp(16, data.image_shape, seed=0)
    train(model, train_set, DefenseConfig(kind, budget=inner, epochs=10, batch_size=32))
    results[kind] = run_protocol(model, gallery_set, protocol)
    print(f"--- {kind}")
    print(results[kind].table())

# %% summary: ERS and the embedding-shift column side by side
print(f"{'defense':8s} {'R@1':>6s} {'ES:D':>6s} {'ERS':>6s}")
for kind, rep in results.items():
    print(f"{kind:8s} {rep.benign['R@1']:6.1f} {rep.raw['ES:D']:6.3f} {rep.ers:6.1f}")
