"""From a scene pair and deforestation polygons to a tree of patch samples."""

# %%
import tempfile

from deforest_cd.dataset import BuildConfig, SceneInput, build_dataset, iter_samples, rasterize_polygons
from deforest_cd.synth import SynthConfig, gen_scene

# %% [markdown]
# A small synthetic pair stands in for two annual Landsat composites.

# %%
scene = gen_scene(SynthConfig(size=160, n_blobs=8, edge_nodata=30, seed=1))
mask = rasterize_polygons(scene.truth, scene.t1.transform, 160, 160, year_pair=(2018, 2019))
print("polygons:", len(scene.truth), "change pixels:", int(mask.data.sum()))

# %% [markdown]
# 64-pixel windows at stride 48. Corner windows with too many nodata pixels are dropped.

# %%
with tempfile.TemporaryDirectory() as out:
    cfg = BuildConfig(window=64, stride=48, max_null_frac=0.05)
    manifest = build_dataset([SceneInput("demo", scene.t1, scene.t2, (2018, 2019))], scene.truth, out, cfg)
    print("samples written:", manifest["counts"])
    s = next(iter_samples(out))
    print("first sample:", s.key, "bands", s.band_names, "img shape", s.img1.shape)
