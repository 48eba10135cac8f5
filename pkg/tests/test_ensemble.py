import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from deforest_cd import fcn
from deforest_cd.ensemble import (
    ProbabilityMapSet,
    fcn_ensemble_predict,
    fcn_ensemble_train,
    load_manifest,
    predict_map,
    simple_vote,
    tile_pairs,
    weighted_vote,
)
from deforest_cd.errors import FormatError, ShapeError
from deforest_cd.raster import BinaryMask, RasterStack, write_mask, write_raster

taus = st.sampled_from([0.25, 0.4, 0.45, 0.5, 0.6])


def _brute_simple(maps, thresholds):
    n, h, w = maps.shape
    out = np.zeros((h, w), np.uint8)
    for i in range(h):
        for j in range(w):
            votes = sum(1 for k in range(n) if maps[k, i, j] > thresholds[k])
            out[i, j] = 1 if votes > n / 2 else 0
    return out


@settings(deadline=None)
@given(st.integers(1, 7), st.integers(0, 2**31), st.data())
def test_simple_vote_matches_brute_force(n, seed, data):
    maps = np.random.default_rng(seed).random((n, 6, 5)).astype(np.float32)
    th = [data.draw(taus) for _ in range(n)]
    assert np.array_equal(simple_vote(ProbabilityMapSet(maps, th)), _brute_simple(maps, th))


def test_tie_goes_negative():
    maps = np.array([0.9, 0.9, 0.1, 0.1], np.float32).reshape(4, 1, 1)
    assert simple_vote(ProbabilityMapSet(maps, [0.5] * 4))[0, 0] == 0


def test_weighted_vote_boundary_is_negative():
    maps = np.array([0.3, 0.5], np.float32).reshape(2, 1, 1)
    pms = ProbabilityMapSet(maps, [0.3, 0.5])  # mean prob 0.4 == mean threshold 0.4
    assert weighted_vote(pms)[0, 0] == 0
    pms2 = ProbabilityMapSet(maps + 0.01, [0.3, 0.5])
    assert weighted_vote(pms2)[0, 0] == 1


@given(st.integers(0, 2**31), st.randoms())
def test_votes_are_permutation_invariant(seed, rnd):
    rng = np.random.default_rng(seed)
    maps = rng.random((5, 4, 4)).astype(np.float32)
    th = rng.choice([0.3, 0.5, 0.7], 5)
    perm = list(range(5))
    rnd.shuffle(perm)
    a, b = ProbabilityMapSet(maps, th), ProbabilityMapSet(maps[perm], th[perm])
    assert np.array_equal(simple_vote(a), simple_vote(b))
    assert np.array_equal(weighted_vote(a), weighted_vote(b))


@given(st.integers(0, 2**31), st.sampled_from([1, 3, 5, 7]))
def test_hard_maps_odd_n_votes_coincide(seed, n):
    maps = (np.random.default_rng(seed).random((n, 5, 5)) > 0.5).astype(np.float32)
    pms = ProbabilityMapSet(maps, [0.5] * n)
    assert np.array_equal(simple_vote(pms), weighted_vote(pms))


def test_vote_with_small_region_removal():
    maps = np.zeros((3, 10, 10), np.float32)
    maps[:, 0:2, 0:2] = 1.0  # 4-pixel blob
    maps[:, 5:10, 5:10] = 1.0  # 25-pixel blob
    out = simple_vote(ProbabilityMapSet(maps, [0.5] * 3), min_keep=5)
    assert out[0:2, 0:2].sum() == 0 and out[5:, 5:].sum() == 25


def test_map_set_validation():
    with pytest.raises(ShapeError):
        ProbabilityMapSet(np.zeros((2, 3, 3)), [0.5])
    with pytest.raises(ValueError):
        ProbabilityMapSet(np.zeros((1, 3, 3)), [1.0])


def test_tile_pairs():
    maps = np.arange(2 * 10 * 12, dtype=np.float32).reshape(2, 10, 12)
    truth = np.zeros((10, 12), np.uint8)
    pairs, origins = tile_pairs(maps, truth, 4, 4)
    assert origins == [(r, c) for r in (0, 4) for c in (0, 4, 8)]
    assert np.array_equal(pairs[4][0], maps[:, 4:8, 4:8])
    with pytest.raises(ShapeError):
        tile_pairs(maps, truth[:5], 4)


def test_predict_map_equals_single_pass():
    w = fcn.init_weights(3, 2)
    w.running_var[:] = 0.5
    maps = np.random.default_rng(0).random((3, 37, 29)).astype(np.float32)
    whole = fcn.fcn_forward(w, maps[None])[0, 0]
    assert np.allclose(predict_map(w, maps, tile=8), whole, atol=1e-6)


def test_fcn_combiner_learns_majority():
    rng = np.random.default_rng(0)
    samples = []
    for _ in range(24):
        truth = (rng.random((8, 8)) > 0.6).astype(np.uint8)
        maps = np.stack([np.clip(truth + 0.35 * rng.standard_normal((8, 8)), 0, 1) for _ in range(3)]).astype(np.float32)
        samples.append((maps, truth))
    res = fcn_ensemble_train(samples, fcn.TrainConfig(epochs=20, batch_size=8, lr=1e-2))
    maps, truth = samples[0]
    pred = fcn_ensemble_predict(res.weights, res.threshold, maps)
    assert pred.shape == truth.shape and (pred == truth).mean() > 0.9
    batch = fcn_ensemble_predict(res.weights, res.threshold, np.stack([s[0] for s in samples[:3]]), min_keep=2)
    assert batch.shape == (3, 8, 8)
    with pytest.raises(ShapeError):
        fcn_ensemble_predict(res.weights, res.threshold, maps[:2])


def test_train_rejects_mixed_producer_counts():
    a = (np.zeros((2, 4, 4), np.float32), np.zeros((4, 4), np.uint8))
    b = (np.zeros((3, 4, 4), np.float32), np.zeros((4, 4), np.uint8))
    with pytest.raises(ShapeError):
        fcn_ensemble_train([a, b])


def _write_manifest(tmp_path, ids=("a", "b"), names=("m1", "m2", "m3")):
    rng = np.random.default_rng(0)
    doc = {"producers": [], "truth": {}}
    for name in names:
        entry = {"name": name, "threshold": 0.5, "maps": {}}
        for sid in ids:
            write_raster(RasterStack(rng.random((1, 4, 4)).astype(np.float32)), tmp_path / f"{name}_{sid}.json")
            entry["maps"][sid] = f"{name}_{sid}.json"
        doc["producers"].append(entry)
    for sid in ids:
        write_mask(BinaryMask(np.eye(4, dtype=np.uint8)), tmp_path / f"truth_{sid}.json")
        doc["truth"][sid] = f"truth_{sid}.json"
    (tmp_path / "man.json").write_text(json.dumps(doc))
    return tmp_path / "man.json", doc


def test_manifest_loading(tmp_path):
    path, _ = _write_manifest(tmp_path)
    man = load_manifest(path)
    assert man.names == ["m1", "m2", "m3"] and man.sample_ids == ["a", "b"]
    assert man.load_maps("a").shape == (3, 4, 4)
    assert man.load_truth("b").sum() == 4
    assert man.map_set("a").n == 3


def test_manifest_errors(tmp_path):
    path, doc = _write_manifest(tmp_path)
    del doc["producers"][1]["maps"]["b"]
    (tmp_path / "bad.json").write_text(json.dumps(doc))
    with pytest.raises(FormatError, match="m2"):
        load_manifest(tmp_path / "bad.json")
    (tmp_path / "worse.json").write_text(json.dumps({"producers": [{"name": "x"}]}))
    with pytest.raises(FormatError):
        load_manifest(tmp_path / "worse.json")
    man = load_manifest(path)
    with pytest.raises(FormatError, match="no map"):
        man.load_maps("zzz")
