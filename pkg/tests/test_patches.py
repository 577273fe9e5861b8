import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from camspoof.model import Model, ModelConfig, build_model
from camspoof.patches import (
    PatchRecord, extract_patches, group_by_image, load_patch_cache, load_split, majority_vote, patch_positions,
    patches_from_manifest, predict_image, predict_patch, save_patch_cache, save_split, split_by_image, split_counts,
)
from camspoof.synth import DatasetManifest, ManifestEntry, build_dataset, make_profiles


def disjoint(positions):
    return all(abs(a[0] - b[0]) >= 32 or abs(a[1] - b[1]) >= 32 for a, b in itertools.combinations(positions, 2))


def fake_manifest(per_model, models=("cam00", "cam01")):
    return DatasetManifest([ManifestEntry(f"{m}/{i}.png", m) for m in models for i in range(per_model)])


def bias_model(bias):
    """Model whose output ignores the input: probs = softmax(bias)."""
    m = build_model(ModelConfig(num_classes=len(bias)))
    params = dict(m.parameters)
    params["head.weight"] = np.zeros_like(params["head.weight"])
    params["head.bias"] = np.asarray(bias, np.float32)
    return Model(m.config, params)


# ---------------------------------------------------------------- extraction


def test_single_patch_is_whole_image():
    img = np.random.default_rng(0).random((3, 32, 32)).astype(np.float32)
    (rec,) = extract_patches(img, 1, seed=0)
    np.testing.assert_array_equal(rec.pixels, img)


def test_four_patches_on_64_are_quadrants():
    assert sorted(patch_positions(64, 64, 4, seed=1)) == [(0, 0), (0, 32), (32, 0), (32, 32)]


@settings(max_examples=40, deadline=None)
@given(st.integers(32, 200), st.integers(32, 200), st.integers(1, 12), st.integers(0, 10**6))
def test_windows_never_overlap(h, w, k, seed):
    k = min(k, (h // 32) * (w // 32))
    pos = patch_positions(h, w, k, seed)
    assert len(pos) == k
    assert disjoint(pos)
    assert all(0 <= y <= h - 32 and 0 <= x <= w - 32 for y, x in pos)


def test_extraction_is_deterministic():
    assert patch_positions(192, 192, 16, 5) == patch_positions(192, 192, 16, 5)
    assert patch_positions(192, 192, 16, 5) != patch_positions(192, 192, 16, 6)


def test_infeasible_k_reports_maximum():
    with pytest.raises(ValueError, match="max feasible is 4"):
        patch_positions(64, 70, 5, 0)


def test_image_smaller_than_patch():
    with pytest.raises(ValueError):
        patch_positions(31, 64, 1, 0)


def test_label_inheritance():
    img = np.full((3, 64, 64), 0.5, np.float32)
    recs = extract_patches(img, 3, 0, image_id="x", label=2)
    assert [r.patch_index for r in recs] == [0, 1, 2]
    assert all(r.true_label == 2 and r.image_id == "x" for r in recs)


def test_patch_record_validation():
    with pytest.raises(ValueError):
        PatchRecord(np.zeros((3, 16, 16), np.float32), "a", 0, 0)
    with pytest.raises(ValueError):
        PatchRecord(np.full((3, 32, 32), 2.0, np.float32), "a", 0, 0)


# ---------------------------------------------------------------- splits


@pytest.mark.parametrize("n,expected", [(10, [7, 2, 1]), (30, [21, 6, 3]), (3, [1, 1, 1]), (4, [2, 1, 1]), (5, [3, 1, 1])])
def test_split_counts(n, expected):
    assert split_counts(n) == expected


@given(st.integers(3, 500))
def test_split_counts_invariants(n):
    c = split_counts(n)
    assert sum(c) == n and min(c) >= 1


def test_too_few_images():
    with pytest.raises(ValueError):
        split_by_image(fake_manifest(2))


def test_split_is_pure_and_complete():
    m = fake_manifest(30, ("a", "b", "c"))
    s = split_by_image(m, seed=3)
    assert set(s) == {e.path for e in m.entries}
    for model in ("a", "b", "c"):
        names = [s[e.path] for e in m.entries if e.model_id == model]
        assert [names.count(x) for x in ("train", "val", "test")] == [21, 6, 3]
    assert s == split_by_image(m, seed=3)
    assert s != split_by_image(m, seed=4)


def test_patch_split_matches_image_split(tmp_path):
    m = build_dataset(make_profiles(2, 0), 4, tmp_path, seed=0, width=64, height=64)
    split = split_by_image(m, seed=0)
    recs = patches_from_manifest(m, 4, seed=0)
    assert len(recs) == 2 * 4 * 4
    for iid, group in group_by_image(recs).items():
        assert len({split[r.image_id] for r in group}) == 1
    sets = {name: {r.image_id for r in recs if split[r.image_id] == name} for name in ("train", "val", "test")}
    assert not (sets["train"] & sets["val"]) and not (sets["train"] & sets["test"]) and not (sets["val"] & sets["test"])


def test_split_json_round_trip(tmp_path):
    s = split_by_image(fake_manifest(10), seed=0)
    save_split(s, tmp_path / "s.json")
    assert load_split(tmp_path / "s.json") == s


# ---------------------------------------------------------------- cache


def test_patch_cache_round_trip(tmp_path):
    img = np.random.default_rng(0).random((3, 64, 64)).astype(np.float32)
    recs = extract_patches(img, 4, 0, image_id="im", label=1)
    save_patch_cache(recs, tmp_path, split={"im": "train"})
    back = load_patch_cache(tmp_path)
    assert len(back) == 4
    for a, b in zip(recs, back):
        assert a.pixels.tobytes() == b.pixels.tobytes()
        assert (a.image_id, a.true_label, a.patch_index, a.position) == (b.image_id, b.true_label, b.patch_index, b.position)


def test_truncated_patch_cache(tmp_path):
    recs = extract_patches(np.zeros((3, 64, 64), np.float32), 2, 0, "im", 0)
    save_patch_cache(recs, tmp_path)
    blob = tmp_path / "patches.bin"
    blob.write_bytes(blob.read_bytes()[:-10])
    with pytest.raises(ValueError, match="truncated"):
        load_patch_cache(tmp_path)


# ---------------------------------------------------------------- prediction


def test_predict_patch_argmax_and_confidence():
    m = bias_model(np.log([0.1, 0.7, 0.2]))
    label, conf = predict_patch(m, np.zeros((3, 32, 32), np.float32))
    assert label == 1 and conf == pytest.approx(0.7, abs=1e-6)


def test_predict_patch_tie_goes_to_lowest():
    label, conf = predict_patch(bias_model([0.0, 0.0]), np.zeros((3, 32, 32), np.float32))
    assert (label, conf) == (0, 0.5)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=2, max_size=6))
def test_confidence_at_least_one_over_n(bias):
    _, conf = predict_patch(bias_model(bias), np.zeros((3, 32, 32), np.float32))
    assert 1 / len(bias) - 1e-6 <= conf <= 1 + 1e-6


@pytest.mark.parametrize("votes,expected", [([0] * 5 + [1] * 3, 0), ([2] * 4 + [1] * 4, 1), ([3], 3)])
def test_majority_vote_examples(votes, expected):
    winner, hist = majority_vote(votes)
    assert winner == expected
    assert hist[winner] == max(hist.values())


def vote_oracle(votes, k=4):
    counts = [0] * k
    for v in votes:
        counts[v] += 1
    best = max(counts)
    for c in range(k):
        if counts[c] == best:
            return c


def test_majority_vote_exhaustive():
    """Every ordered vote sequence of 1..9 patches over 4 classes."""
    checked = 0
    for n in range(1, 10):
        for votes in itertools.product(range(4), repeat=n):
            assert majority_vote(votes)[0] == vote_oracle(votes)
            checked += 1
    assert checked == sum(4 ** n for n in range(1, 10))


def test_majority_vote_empty():
    with pytest.raises(ValueError):
        majority_vote([])


def test_predict_image_rejects_mixed_ids():
    m = bias_model([0.0, 1.0])
    a = PatchRecord(np.zeros((3, 32, 32), np.float32), "a", 0, 0)
    b = PatchRecord(np.zeros((3, 32, 32), np.float32), "b", 0, 0)
    with pytest.raises(ValueError, match="several images"):
        predict_image(m, [a, b])


def test_predict_image_votes():
    m = bias_model([0.0, 1.0])
    recs = [PatchRecord(np.zeros((3, 32, 32), np.float32), "a", 1, i) for i in range(3)]
    out = predict_image(m, recs)
    assert out.label == 1 and out.votes == {1: 3} and out.patch_labels == [1, 1, 1]
