# %% [markdown]
# Alignment ablation on the planted-parts fixture: full model against the
# same protocol with the alignment weight set to zero. About five minutes on CPU;
# checkpoints are cached in out_ablation/.

# %%
import logging

import matplotlib.pyplot as plt

from lvw.ablation import FixtureConfig, run_ablation
from lvw.explain import category_similarity_matrix

logging.basicConfig(level=logging.INFO)
res = run_ablation(FixtureConfig(), cache_dir="out_ablation")
print("base accuracy", res.base_accuracy)
for arm in (res.full, res.ablation):
    print(arm.name, "IoU", round(arm.mean_iou, 4), "accuracy", arm.accuracy)

# %%
qs = [q for q, _ in res.full.sweep]
plt.plot(qs, [v for _, v in res.full.sweep], "o-", label="full")
plt.plot(qs, [v for _, v in res.ablation.sweep], "s-", label="no alignment")
plt.xlabel("quantile q")
plt.ylabel("mean IoU")
plt.legend()
plt.savefig("out_ablation/quantile_sweep.png", dpi=80)

# %%
print(category_similarity_matrix(res.train, res.full.model).matrix.round(3))
