"""Confusion counts and the evaluation table."""

# %%
import numpy as np

from deforest_cd.metrics import ConfusionCounts, accumulate, format_table, metric_suite

# %%
c = ConfusionCounts(tp=3, fp=1, tn=94, fn=2)
print({k: round(v, 4) for k, v in metric_suite(c).items()})

# %%
rng = np.random.default_rng(0)
truth = rng.random((64, 64)) > 0.8
noisy = truth ^ (rng.random((64, 64)) > 0.95)
rows = {"perfect": (None, metric_suite(accumulate(truth, truth))), "noisy": (0.5, metric_suite(accumulate(noisy, truth)))}
print(format_table(rows))
