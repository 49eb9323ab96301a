# %% [markdown]
# Visual words and their heatmaps on one synthetic image.
# A word is a D-vector compared against every patch of the feature grid.

# %%
import matplotlib.pyplot as plt
import torch

from lvw.core import Backbone, LVWModel, combine_topk, upsample_heatmap
from lvw.data import make_synthetic
from lvw.train import project_model

torch.manual_seed(0)
data = make_synthetic(n_classes=4, n_per_class=4, size=64, seed=0)
model = LVWModel(Backbone((32, 64, 128), input_size=64), n_classes=4, words_per_class=5).eval()
project_model(model, data)          # ground every word in a real training patch

# %%
x = data.images[:1]
with torch.no_grad():
    scores, sim, grids, z = model(x)
print("feature grid", tuple(z.shape), "similarity vector", tuple(sim.shape))
print("top words", torch.topk(sim[0], 5).indices.tolist())

# %%
with torch.no_grad():
    combined, idx = combine_topk(grids, sim, k=5)
heat = upsample_heatmap(combined, (64, 64))[0]
fig, ax = plt.subplots(1, 2, figsize=(6, 3))
ax[0].imshow(x[0].permute(1, 2, 0))
ax[1].imshow(heat, cmap="viridis")
for a in ax:
    a.axis("off")
fig.savefig("out_heatmaps.png", dpi=80)
