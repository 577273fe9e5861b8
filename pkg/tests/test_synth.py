import dataclasses

import cv2
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.ndimage import uniform_filter

from camspoof.imaging import read_image, write_png16
from camspoof.synth import (
    CameraProfile, DatasetManifest, SceneSpec, build_dataset, demosaic, ingest_directory, make_profile,
    make_profiles, prnu_field, render_image,
)


def flat(b=0.5, slope=0.0, seed=1):
    return SceneSpec(b, slope, seed)


def bare(profile, **kw):
    base = dict(prnu_strength=0.0, read_noise_sigma=0.0, channel_gains=(1.0, 1.0, 1.0), quant_step=1e-9)
    base.update(kw)
    return dataclasses.replace(profile, **base)


def residual(img):
    g = img.mean(axis=0).astype(np.float64)
    return g - uniform_filter(g, 5, mode="mirror")


def corr(a, b):
    a = a - a.mean()
    b = b - b.mean()
    return float((a * b).sum() / np.sqrt((a * a).sum() * (b * b).sum()))


# ---------------------------------------------------------------- profiles


def test_profile_is_deterministic():
    assert make_profile("cam02", 7) == make_profile("cam02", 7)


def test_four_ids_get_distinct_trace_combinations():
    ps = make_profiles(4, 0)
    combos = {(p.bayer_pattern, p.demosaic_kernel, p.quant_step) for p in ps}
    assert len(combos) == 4
    assert [p.bayer_pattern for p in ps] == ["RGGB", "BGGR", "GRBG", "GBRG"]
    assert [p.demosaic_kernel for p in ps] == ["bilinear", "smooth_hue"] * 2


def test_ten_ids_distinct_prnu_seeds_and_quant_range():
    ps = make_profiles(10, 3)
    assert len({p.prnu_seed for p in ps}) == 10
    assert all(0.004 <= p.quant_step <= 0.02 for p in ps)


def test_gains_have_unit_mean_and_distinct_hues():
    ps = make_profiles(4, 0)
    for p in ps:
        assert abs(np.mean(p.channel_gains) - 1) < 1e-12
    assert len({tuple(np.round(p.channel_gains, 6)) for p in ps}) == 4


@pytest.mark.parametrize("bad", [dict(bayer_pattern="RGBG"), dict(demosaic_kernel="nearest"), dict(quant_step=0.0),
                                 dict(channel_gains=(1.0, 0.0, 1.0)), dict(read_noise_sigma=-1.0)])
def test_profile_validation(bad):
    p = make_profile("cam00", 0)
    with pytest.raises(ValueError):
        dataclasses.replace(p, **bad)


def test_empty_model_id_rejected():
    with pytest.raises(ValueError):
        make_profile("", 0)


def test_scene_brightness_range():
    with pytest.raises(ValueError):
        SceneSpec(0.1, 0.0, 0)


# ---------------------------------------------------------------- rendering


def test_prnu_field_regenerates_exactly():
    a = prnu_field(11, 16, 16)
    np.testing.assert_array_equal(a, prnu_field(11, 16, 16))
    assert abs(a.mean()) < 1e-12 and abs(a.std() - 1) < 1e-12


@pytest.mark.parametrize("pattern", ["RGGB", "BGGR", "GRBG", "GBRG"])
@pytest.mark.parametrize("kernel", ["bilinear", "smooth_hue"])
def test_constant_scene_is_demosaic_invariant(pattern, kernel):
    p = bare(make_profile("cam00", 0), bayer_pattern=pattern, demosaic_kernel=kernel)
    img = render_image(p, flat(0.6), 16, 12)
    np.testing.assert_allclose(img, 0.6, atol=1e-6)


def test_demosaic_constant_plane():
    out = demosaic(np.full((8, 8), 0.3), "GRBG", "smooth_hue")
    np.testing.assert_allclose(out, 0.3, atol=1e-12)


def test_render_is_deterministic_and_in_range():
    p = make_profile("cam01", 4)
    a = render_image(p, flat(0.9, 0.002, 5), 64, 64)
    b = render_image(p, flat(0.9, 0.002, 5), 64, 64)
    assert a.dtype == np.float32 and a.shape == (3, 64, 64)
    np.testing.assert_array_equal(a, b)
    assert a.min() >= 0 and a.max() <= 1


def test_quantisation_grid():
    p = make_profile("cam03", 0)
    img = render_image(p, flat(0.4), 32, 32).astype(np.float64)
    steps = img / p.quant_step
    interior = img < 1
    assert np.abs(steps - np.round(steps))[interior].max() < 1e-3


@pytest.mark.parametrize("w,h", [(31, 32), (32, 0), (-2, 4)])
def test_invalid_extents(w, h):
    with pytest.raises(ValueError):
        render_image(make_profile("cam00", 0), flat(), w, h)


def test_residual_correlates_with_own_prnu():
    p = make_profile("cam00", 0)
    q = dataclasses.replace(p, prnu_seed=p.prnu_seed + 1)
    a = render_image(p, flat(0.7), 128, 128)
    b = render_image(q, flat(0.7), 128, 128)
    assert np.abs(a - b).mean() > 0
    fa = prnu_field(p.prnu_seed, 128, 128)
    fb = prnu_field(q.prnu_seed, 128, 128)
    ra = residual(a)
    assert corr(ra, fa) > corr(ra, fb) + 0.1
    rb = residual(b)
    assert corr(rb, fb) > corr(rb, fa) + 0.1


@settings(max_examples=25, deadline=None)
@given(st.floats(0.2, 0.95), st.floats(-0.01, 0.01), st.integers(0, 7), st.integers(0, 2**32 - 1))
def test_outputs_always_in_unit_range(brightness, slope, index, seed):
    p = make_profile(f"cam{index:02d}", seed, prnu_strength=0.2)
    img = render_image(p, SceneSpec(brightness, slope, seed), 32, 32)
    assert img.min() >= 0 and img.max() <= 1


def test_fingerprints_separable_by_nearest_centroid():
    """Nearest-centroid on per-channel mean |high-pass residual| of 32x32 patches.

    The residual is taken relative to the local mean because PRNU is multiplicative.
    """
    profiles = make_profiles(4, 0)

    def features(img):
        img = img.astype(np.float64)
        r = img / uniform_filter(img, (1, 3, 3), mode="mirror") - 1
        out = []
        for y in range(0, 64, 32):
            for x in range(0, 64, 32):
                out.append(np.abs(r[:, y:y + 32, x:x + 32]).mean(axis=(1, 2)))
        return out

    train, test = [], []
    for label, p in enumerate(profiles):
        for i in range(12):
            rng = np.random.default_rng([label, i])
            scene = SceneSpec(float(rng.uniform(0.3, 0.8)), 0.0, i)
            feats = features(render_image(p, scene, 64, 64))
            (train if i < 8 else test).extend((f, label) for f in feats)
    centroids = np.array([np.mean([f for f, lbl in train if lbl == k], axis=0) for k in range(4)])
    hits = [np.argmin(((centroids - f) ** 2).sum(axis=1)) == lbl for f, lbl in test]
    # chance is 0.25; require twice that
    assert np.mean(hits) > 0.5


# ---------------------------------------------------------------- datasets


def test_build_dataset(tmp_path):
    ps = make_profiles(4, 0)
    m = build_dataset(ps, 3, tmp_path / "a", seed=2, width=32, height=32)
    assert len(m.entries) == 12 and len({e.path for e in m.entries}) == 12
    assert m.counts == {p.model_id: 3 for p in ps}
    img = read_image(m.resolve(m.entries[0]))
    assert img.shape == (3, 32, 32)
    raw = cv2.imread(str(m.resolve(m.entries[0])), cv2.IMREAD_UNCHANGED)
    assert raw.dtype == np.uint16

    again = build_dataset(ps, 3, tmp_path / "b", seed=2, width=32, height=32)
    assert (tmp_path / "a/manifest.jsonl").read_bytes() == (tmp_path / "b/manifest.jsonl").read_bytes()
    for e in m.entries:
        assert (tmp_path / "a" / e.path).read_bytes() == (tmp_path / "b" / e.path).read_bytes()


def test_manifest_round_trip(tmp_path):
    m = build_dataset(make_profiles(2, 0), 3, tmp_path, seed=0, width=32, height=32)
    loaded = DatasetManifest.load(tmp_path / "manifest.jsonl")
    assert loaded.entries == m.entries


def test_build_dataset_needs_three_images(tmp_path):
    with pytest.raises(ValueError):
        build_dataset(make_profiles(2, 0), 2, tmp_path, seed=0)


def test_build_dataset_unwritable(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OSError):
        build_dataset(make_profiles(1, 0), 3, blocker / "sub", seed=0, width=32, height=32)


def test_png16_round_trip(tmp_path):
    img = np.random.default_rng(0).random((3, 8, 6)).astype(np.float32)
    write_png16(img, tmp_path / "x.png")
    back = read_image(tmp_path / "x.png")
    assert np.abs(back - img).max() <= 0.5 / 65535 + 1e-7


def test_duplicate_manifest_paths_rejected():
    from camspoof.synth import ManifestEntry

    with pytest.raises(ValueError):
        DatasetManifest([ManifestEntry("a.png", "x"), ManifestEntry("a.png", "y")])


# ---------------------------------------------------------------- ingest


def _tree(root):
    for cam in ("alpha", "beta"):
        (root / cam).mkdir(parents=True)
        for i in range(3):
            write_png16(np.full((3, 32, 32), 0.1 * (i + 1), np.float32), root / cam / f"{i}.png")
    return root


def test_ingest_two_subdirectories(tmp_path):
    m = ingest_directory(_tree(tmp_path))
    assert len(m.entries) == 6
    assert m.model_ids == ["alpha", "beta"]


def test_ingest_skips_and_reports(tmp_path):
    root = _tree(tmp_path)
    (root / "alpha" / "notes.txt").write_text("hello")
    (root / "beta" / "broken.png").write_bytes(b"not a png")
    m = ingest_directory(root)
    assert len(m.entries) == 6
    reasons = dict(m.skipped)
    assert reasons["alpha/notes.txt"] == "unsupported extension"
    assert reasons["beta/broken.png"] == "undecodable"


def test_ingest_label_rule(tmp_path):
    m = ingest_directory(_tree(tmp_path), {"alpha": "A"})
    assert m.model_ids == ["A"] and len(m.entries) == 3
    m = ingest_directory(tmp_path, lambda name: name.upper())
    assert m.model_ids == ["ALPHA", "BETA"]


def test_ingest_empty_directory(tmp_path):
    with pytest.raises(ValueError):
        ingest_directory(tmp_path)


def test_ingest_missing_root(tmp_path):
    with pytest.raises(FileNotFoundError):
        ingest_directory(tmp_path / "nope")


def test_profile_type_is_frozen():
    p = make_profile("cam00", 0)
    with pytest.raises(dataclasses.FrozenInstanceError):
        p.quant_step = 0.5
    assert isinstance(p, CameraProfile)
