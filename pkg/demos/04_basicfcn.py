"""The two-layer fully convolutional combiner: forward pass, focal loss, training."""

# %%
import numpy as np

from deforest_cd import fcn

# %%
w = fcn.init_weights(n_in=3, seed=0)
x = np.random.default_rng(0).random((2, 3, 16, 16)).astype(np.float32)
print("output shape:", fcn.fcn_forward(w, x).shape)
print("focal loss at p=0.5: y=1", round(fcn.focal_loss(np.array([0.5]), np.array([1])), 6),
      "y=0", round(fcn.focal_loss(np.array([0.5]), np.array([0])), 6))

# %% [markdown]
# Learn a majority rule from three noisy copies of the truth.

# %%
rng = np.random.default_rng(1)
samples = []
for _ in range(40):
    truth = (rng.random((16, 16)) > 0.7).astype(np.uint8)
    maps = np.clip(truth + 0.4 * rng.standard_normal((3, 16, 16)), 0, 1).astype(np.float32)
    samples.append((maps, truth))
res = fcn.train(samples, fcn.TrainConfig(epochs=30, batch_size=8, lr=1e-2))
print("best epoch", res.best_epoch, "threshold", res.threshold, "val F1", round(res.history[res.best_epoch - 1]["val_f1"], 3))
