# %% [markdown]
# Grad-CAM maps of a small plain CNN, the target the words are aligned to.

# %%
import matplotlib.pyplot as plt
import torch

from lvw.attention import attention_batch, finetune_base
from lvw.data import make_synthetic_splits

train, test = make_synthetic_splits(n_classes=4, n_train=200, n_test=40, size=64, seed=0)
base = finetune_base(train, epochs=30, seed=0)
with torch.no_grad():
    print("base accuracy", float((base(test.images).argmax(1) == test.labels).float().mean()))

# %%
attn = attention_batch(base, test, class_source="predicted")
fig, ax = plt.subplots(2, 4, figsize=(8, 4))
for i in range(4):
    ax[0, i].imshow(test.images[i * 10].permute(1, 2, 0))
    ax[1, i].imshow(attn.maps[i * 10], cmap="magma")
for a in ax.flat:
    a.axis("off")
fig.savefig("out_attention.png", dpi=80)
