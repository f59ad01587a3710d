# %% [markdown]
# # Learning without labels: the pseudo-target row scorer
#
# The unsupervised solver never sees answers. It builds ten rows per
# problem: the two given rows, then the first two panels of the third row
# completed with each of the eight candidates. One shared CNN scores every
# row, and the scores are pushed toward the fixed target [1, 1, 0, ..., 0].
# Since the correct completion follows the same rules as the given rows, it
# tends to end up scored like them. This demo trains the scorer on a small
# Center pack and compares it to chance and to its own starting point.
#
# `python3 demos/03_pseudo_target_training.py [problems] [epochs]`
# (defaults 1500 and 6, a few minutes on one core).

# %%
import sys
import time

import numpy as np

from rpmlab import harness as H
from rpmlab.dataset import generate_dataset
from rpmlab.solvers import build_mcpt_rows, mcpt_forward, predict_mcpt, pseudo_target

n = int(sys.argv[1]) if len(sys.argv) > 1 else 1500
epochs = int(sys.argv[2]) if len(sys.argv) > 2 else 6

# %% [markdown]
# The pack and its 6:2:2 split are both seeded. Training receives only the
# label-free view of the pack; touching `.answers` there raises.

# %%
pack = generate_dataset({"Center": n}, seed=7)
split = H.split_dataset(pack, seed=0)
print(f"{len(split.train)} train / {len(split.val)} val / {len(split.test)} test problems")
print("two-hot target:", pseudo_target("two-hot").astype(int))

# %% [markdown]
# Train both target variants from the same initial weights. The one-hot
# target (only the first row is "positive") is the ablation.

# %%
cfg = H.TrainConfig(conv_channels=(8, 16, 32, 32), epochs=epochs, base_lr=3e-3)
spec = cfg.spec("mcpt", 32)
untrained = H.evaluate(H.initial_model(spec, 1), pack, split.test, "mcpt").overall
results = {}
for target in ("one-hot", "two-hot"):
    t0 = time.time()
    fit = H.train(pack, split.train, "mcpt", seed=1, cfg=cfg, target=target)
    results[target] = (fit, H.evaluate(fit.model, pack, split.test, "mcpt").overall)
    print(f"{target}: epoch losses {np.round(fit.epoch_losses, 3).tolist()} ({time.time() - t0:.0f}s)")

# %%
chance = H.random_baseline(np.asarray(pack.answers)[split.test], 10_000, seed=1)
print(f"random {chance:.3f} | untrained {untrained:.3f} | "
      f"one-hot {results['one-hot'][1]:.3f} | two-hot {results['two-hot'][1]:.3f}")

# %% [markdown]
# Looking inside one problem: the row probabilities after training. The
# first two entries belong to the given rows and are ignored by the
# prediction, which picks the highest of the remaining eight.

# %%
model = results["two-hot"][0].model
i = int(split.test[0])
probs = mcpt_forward(model, build_mcpt_rows(pack.float_images([i])[0])).data
print("row probabilities:", np.round(probs.astype(float), 3).tolist())
print("predicted candidate", predict_mcpt(probs) + 1, "| answer", int(pack.answers[i]) + 1)
