"""Combining four producers: simple vote, weighted vote and the learned combiner."""

# %%
import numpy as np

from deforest_cd import ensemble, fcn, metrics, synth
from deforest_cd.preprocess import sample_rng

# %%
truth = synth.gen_scene(synth.SynthConfig(size=256, n_blobs=10, seed=3)).mask.data
maps = np.stack([synth.gen_producer_maps(truth, m, sample_rng(3, index=k, stream=20)) for k, m in enumerate(synth.DEFAULT_PRODUCERS)])
split = 192
taus = [fcn.select_threshold(maps[k, None, :split], truth[None, :split]) for k in range(4)]
test, test_truth = maps[:, split:], truth[split:]


def score(pred):
    return round(metrics.f1(metrics.accumulate(pred, test_truth)), 4)


for k, m in enumerate(synth.DEFAULT_PRODUCERS):
    print(f"{m.name:15s} tau={taus[k]:.2f} F1={score(test[k] > taus[k])}")
pms = ensemble.ProbabilityMapSet(test, taus)
print("simple vote    ", score(ensemble.simple_vote(pms)))
print("weighted vote  ", score(ensemble.weighted_vote(pms)))

# %% [markdown]
# A short training run; the acceptance suite uses a 1024-pixel scene and 50 epochs.

# %%
pairs, _ = ensemble.tile_pairs(maps[:, :split], truth[:split], 32)
res = ensemble.fcn_ensemble_train(pairs, fcn.TrainConfig(epochs=15, lr=1e-3))
print("fcn combiner   ", score(ensemble.fcn_ensemble_predict(res.weights, res.threshold, test)))
