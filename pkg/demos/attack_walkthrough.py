"""Attacking a ranking model, one objective at a time.

Trains a small MLP on synthetic blobs, then shows how each attack moves the
quantity it targets. Runs in a few seconds:

    python3 demos/attack_walkthrough.py
"""

import numpy as np

from ranklab import model as M
from ranklab.attacks import AttackSpec, Budget, Gallery, run_attack
from ranklab.dataset import stratified_split, synth_blobs
from ranklab.defense import DefenseConfig, train

# %% data: 6 classes of 12x12 blurred templates plus pixel noise
data = synth_blobs(6, 60, 12, 0.15, seed=0)
train_set, gallery_set = stratified_split(data, 30, seed=0)
print(f"train {len(train_set)} images, gallery {len(gallery_set)} images, shape {data.image_shape}")

# %% a vanilla triplet model
model = M.mlp(16, data.image_shape, seed=0)
history = train(model, train_set, DefenseConfig("none", epochs=10, batch_size=32), val=gallery_set)
print("R@1 per epoch:", [round(h["R@1"], 1) for h in history])

gallery = Gallery(model, gallery_set)

# %% candidate attack: push a random candidate up a random query's ranking
# the score is the mean rank percentile of the candidate (lower = ranked higher)
for eps in (0.0, 8 / 255, 32 / 255):
    out, _ = run_attack(model, gallery, AttackSpec("CA+", Budget(eps)), 100)
    print(f"CA+  eps={eps * 255:4.0f}/255  mean percentile {out.scores['CA+'].mean():5.1f}")

# %% query attack: perturb the query so its nearest neighbour drops out of sight
for eps in (0.0, 8 / 255, 32 / 255):
    out, _ = run_attack(model, gallery, AttackSpec("QA-", Budget(eps)), 100)
    print(f"QA-  eps={eps * 255:4.0f}/255  mean percentile {out.scores['QA-'].mean():5.1f}")

# %% the PGD trace records the objective before each step
out, _ = run_attack(model, gallery, AttackSpec("ES", Budget(32 / 255)), 20)
print("ES objective (negative shift), trial 0:", np.round(out.trace[::8, 0], 3))
print(f"mean embedding shift {out.scores['ES:D'].mean():.3f}, R@1 of shifted queries {out.scores['ES:R'].mean():.1f}")

# %% every iterate stayed inside the budget
print("largest |r|:", np.abs(out.perturbation).max() * 255, "/255")
