"""Binarization and removal of small connected regions."""

# %%
import numpy as np

from deforest_cd.postprocess import area_to_pixels, binarize, label_components, remove_small

# %%
probs = np.zeros((20, 40), np.float32)
probs[0:5, 0:10] = 0.9  # 50 pixels
probs[10:13, 0:17] = 0.8  # 51 pixels
mask = binarize(probs, 0.5)
lab = label_components(mask)
print("components:", lab.count, "sizes:", lab.sizes.tolist())

# %% [markdown]
# Regions of up to 50 pixels (about 4.5 ha at 30 m) are discarded.

# %%
print("4.5 ha in 30 m pixels:", round(area_to_pixels(4.5), 2))
print("kept pixels:", int(remove_small(mask, 51).sum()))
