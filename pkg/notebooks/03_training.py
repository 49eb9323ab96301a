# %% [markdown]
# The three-step cycle: stage 1 (backbone and words), projection, stage 3 (head only).

# %%
import csv

import matplotlib.pyplot as plt

from lvw.attention import attention_batch, finetune_base
from lvw.data import make_synthetic_splits
from lvw.objectives import LossWeights
from lvw.train import TrainingConfig, full_protocol

train, test = make_synthetic_splits(n_classes=4, n_train=200, n_test=40, size=64, seed=0)
base = finetune_base(train, epochs=30, seed=0)
attn = attention_batch(base, train, "ground_truth")

# %%
cfg = TrainingConfig(epochs=20, project_every=10, stage3_epochs=10, loss_weights=LossWeights(beta=1.0))
state = full_protocol(train, attn.maps, cfg, base=base, out_dir="out_training")

# %%
with open("out_training/trace.csv") as fh:
    rows = [r for r in csv.DictReader(fh) if r["stage"] == "stage1"]
plt.plot([float(r["loss_total"]) for r in rows], label="total")
plt.plot([float(r["loss_align"]) for r in rows], label="alignment")
plt.legend()
plt.xlabel("stage-1 epoch")
plt.savefig("out_training/loss.png", dpi=80)
print(state.model.provenance[:3])
