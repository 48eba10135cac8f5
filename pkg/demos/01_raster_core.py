"""Georeferenced rasters: transforms, resampling, extent intersection, file I/O."""

# %%
import tempfile
from pathlib import Path

import numpy as np

from deforest_cd.raster import (
    GeoTransform,
    RasterStack,
    intersect_extents,
    pixel_to_world,
    read_raster,
    resample_to_grid,
    world_to_pixel,
    write_raster,
)

# %% [markdown]
# A 30 m grid anchored at a UTM-like origin. Pixel (0, 0) has its center half a
# pixel in from the corner.

# %%
t = GeoTransform.from_gdal([500000.0, 30.0, 0.0, 9000000.0, 0.0, -30.0])
print("center of (0, 0):", pixel_to_world(t, 0.5, 0.5))
print("back to pixels:  ", world_to_pixel(t, 500015.0, 8999985.0))

# %% [markdown]
# Two scenes on the same grid phase but with different footprints.

# %%
a = RasterStack(np.arange(2 * 6 * 8, dtype=np.uint16).reshape(2, 6, 8), t)
b = RasterStack(np.ones((2, 6, 8), np.uint16), t.shifted(2, 3))
ca, cb = intersect_extents([a, b])
print("common extent:", ca.shape, "origin", ca.transform.origin_x, ca.transform.origin_y)

# %% [markdown]
# Nearest-neighbour resampling onto a coarser grid.

# %%
coarse = resample_to_grid(a, GeoTransform(500000.0, 9000000.0, 60.0, -60.0), 3, 4)
print(coarse.data[0])

# %%
with tempfile.TemporaryDirectory() as d:
    back = read_raster(write_raster(a, Path(d) / "a.json"))
    print("roundtrip exact:", np.array_equal(back.data, a.data) and back.transform == a.transform)
