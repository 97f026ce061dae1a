"""Fill the acceptance cache (defense models and their protocol reports) ahead of a test run."""

import sys
import time
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "tests"))

import desk  # noqa: E402
from test_acceptance import DEFENSE_EPOCHS, DEFENSE_SEEDS, DEFENSE_TRIALS  # noqa: E402

for seed in DEFENSE_SEEDS:
    for kind in ("none", "EST", "REST", "SES", "ACT"):
        t0 = time.time()
        model, hist = desk.trained_model(kind, DEFENSE_EPOCHS, seed)
        tag = f"{kind}-e{DEFENSE_EPOCHS}-s{seed}"
        if kind == "SES":
            desk.attack_mean(model, tag, "ES", DEFENSE_TRIALS, seed, desk.STRONG)
        else:
            rep = desk.ers_report(model, tag, DEFENSE_TRIALS, seed)
            print(rep.table(), flush=True)
        print(f"{kind} seed {seed}: {time.time() - t0:.0f}s", flush=True)
