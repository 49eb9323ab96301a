# %% [markdown]
# IoU coverage between a Grad-CAM map and a combined word heatmap, and its two sweeps.

# %%
import numpy as np

from lvw.evaluation import iou_coverage, quantile_mask

a = np.array([[1.0, 2.0], [3.0, 4.0]])
print(quantile_mask(a, 50))          # threshold 2.5
print(iou_coverage(a, a.T, 50))      # masks share one pixel out of three

# %%
rng = np.random.default_rng(0)
maps = rng.random((2, 16, 16))
for q in (10, 30, 50, 70, 90):
    print(q, round(iou_coverage(maps[0], maps[1], q), 3))

# %% [markdown]
# On a trained model use `evaluate`, `quantile_sweep` and `topk_sweep`;
# 06_ablation.py runs them on the planted-parts fixture.
