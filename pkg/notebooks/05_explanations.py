# %% [markdown]
# Global word gallery, local explanations, category similarity and an unseen composite.

# %%
import numpy as np
import torch

from lvw.data import make_composite, make_synthetic
from lvw.core import Backbone, LVWModel
from lvw.explain import (category_similarity_matrix, explain_unseen, global_visualizations,
                         local_explanation, write_index, write_local, write_word_gallery)
from lvw.train import project_model

torch.manual_seed(0)
train = make_synthetic(4, 6, 64, seed=0)
model = LVWModel(Backbone((32, 64, 128), input_size=64), 4, 5).eval()
project_model(model, train)

# %%
visuals = global_visualizations(train, model)
words = write_word_gallery("out_explain", train, model, visuals)
local = local_explanation(train.images[0], model, 3, train, visuals)
print([(w.word_id, round(w.score, 2), w.box) for w in local])
write_index("out_explain", {"words": words,
                            "images": {train.ids[0]: write_local("out_explain", train.ids[0], train.images[0], local)}})

# %%
cat = category_similarity_matrix(train, model)
print(np.round(cat.matrix, 2))

# %%
unseen = explain_unseen(make_composite([1, 3], size=64), model, 5, train, visuals)
print(unseen.note)
print(unseen.provenance_classes)
