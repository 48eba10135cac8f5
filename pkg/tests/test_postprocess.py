import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from deforest_cd.postprocess import (
    PRODES_MIN_AREA_HA,
    area_to_pixels,
    binarize,
    label_components,
    read_pgm,
    remove_small,
    remove_small_stitched,
    write_pgm,
)
from oracles import bfs_components, bfs_remove_small, same_partition

masks = arrays(np.uint8, st.tuples(st.integers(1, 12), st.integers(1, 12)), elements=st.integers(0, 1))


def test_binarize_is_strict():
    p = np.array([0.1, 0.5, 0.50001, 0.9], dtype=np.float32)
    assert binarize(p, 0.5).tolist() == [0, 0, 1, 1]


def test_binarize_float32_at_threshold():
    # float32(0.1) is slightly above the double 0.1; it must still equal tau
    p = np.full(3, 0.1, dtype=np.float32)
    assert binarize(p, 0.1).sum() == 0


def test_snake_is_one_component():
    m = np.zeros((5, 5), np.uint8)
    m[0, :] = 1
    m[:, 4] = 1
    m[4, :] = 1
    lab = label_components(m)
    assert lab.count == 1 and lab.sizes.tolist() == [13]


def test_diagonal_pixels_are_separate():
    lab = label_components(np.eye(4, dtype=np.uint8))
    assert lab.count == 4


def test_u_shape_merges_runs():
    m = np.array([[1, 0, 1], [1, 0, 1], [1, 1, 1]], np.uint8)
    assert label_components(m).count == 1


def test_50_removed_51_kept():
    m = np.zeros((20, 40), np.uint8)
    m[0:5, 0:10] = 1  # 50 pixels
    m[10:13, 0:17] = 1  # 51 pixels
    out = remove_small(m)
    assert out[0:5, 0:10].sum() == 0
    assert out[10:13, 0:17].sum() == 51


@given(masks)
def test_labels_match_bfs(m):
    ours = label_components(m)
    ref, sizes = bfs_components(m)
    assert same_partition(ours.labels, ref)
    assert sorted(ours.sizes.tolist()) == sorted(sizes)


@given(masks, st.integers(1, 20))
def test_remove_small_matches_oracle(m, k):
    assert np.array_equal(remove_small(m, k), bfs_remove_small(m, k))


@given(masks)
def test_remove_small_is_idempotent_and_shrinking(m):
    once = remove_small(m, 4)
    assert np.array_equal(remove_small(once, 4), once)
    assert np.all(once <= m)


def test_stitched_keeps_split_region():
    scene = np.zeros((8, 16), np.uint8)
    scene[2:6, 4:12] = 1  # 32 pixels, split in half by the tile boundary
    tiles = [scene[:, :8], scene[:, 8:]]
    naive = [remove_small(t, 20) for t in tiles]
    assert sum(t.sum() for t in naive) == 0
    kept = remove_small_stitched(tiles, [(0, 0), (0, 8)], scene.shape, 20)
    assert sum(t.sum() for t in kept) == 32


def test_prodes_area_in_pixels():
    assert area_to_pixels(PRODES_MIN_AREA_HA) == pytest.approx(69.444, abs=1e-3)


def test_pgm_roundtrip(tmp_path):
    m = (np.arange(12).reshape(3, 4) % 2).astype(np.uint8)
    p = write_pgm(m, tmp_path / "m.pgm")
    assert p.read_bytes().startswith(b"P5\n4 3\n1\n")
    assert np.array_equal(read_pgm(p), m)
