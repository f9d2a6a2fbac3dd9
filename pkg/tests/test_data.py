import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from PIL import Image

from svanet.core import ConfigurationError, Rng
from svanet.data import (BUCKETS, AugmentConfig, SegmentationDataset, SizeBucket, SynthSpec, area_stats, augment,
                         bucket_of, generate_synthetic, iterate_batches, object_records)
from svanet.data.area import read_manifest
from svanet.data.synthetic import audit
from svanet.data.augment import crop, hflip


def _sample(seed=0, size=32, k=3):
    r = np.random.default_rng(seed)
    image = r.uniform(0, 1, (3, size, size)).astype(np.float32)
    mask = np.zeros((size, size), dtype=np.int64)
    mask[4:10, 5:12] = 1
    mask[20:25, 18:30] = k - 1
    return image, mask


# -- augmentation ------------------------------------------------------------

def test_augment_off_is_identity_at_full_size():
    image, mask = _sample()
    img, msk = augment(image, mask, Rng(0), AugmentConfig.off(crop=32))
    assert np.array_equal(img, image) and np.array_equal(msk, mask)


def test_augment_off_is_a_crop_window():
    image, mask = _sample(size=40)
    img, msk = augment(image, mask, Rng(3), AugmentConfig.off(crop=32))
    hits = [(t, l) for t in range(9) for l in range(9)
            if np.array_equal(msk, mask[t:t + 32, l:l + 32]) and np.array_equal(img, image[:, t:t + 32, l:l + 32])]
    assert hits


def test_hflip_involution():
    image, mask = _sample()
    i2, m2 = hflip(*hflip(image, mask))
    assert np.array_equal(i2, image) and np.array_equal(m2, mask)


@given(st.integers(0, 10_000))
def test_augment_keeps_labels_and_range(seed):
    image, mask = _sample(seed % 7, size=48)
    cfg = AugmentConfig(crop=32, flip_p=1, rotate_p=1, distort_p=1, blur_p=1)
    img, msk = augment(image, mask, Rng(seed), cfg)
    assert img.shape == (3, 32, 32) and msk.shape == (32, 32)
    assert set(np.unique(msk)) <= set(np.unique(mask))
    assert msk.dtype == np.int64
    assert img.min() >= 0 and img.max() <= 1


def test_augment_deterministic_in_rng_path():
    image, mask = _sample(size=48)
    cfg = AugmentConfig(crop=32)
    a = augment(image, mask, Rng(5, "x"), cfg)
    b = augment(image, mask, Rng(5, "x"), cfg)
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])


def test_crop_pads_short_sides():
    image, mask = _sample(size=20)
    img, msk = crop(image, mask, 32, None)
    assert img.shape == (3, 32, 32) and msk.shape == (32, 32)
    assert np.array_equal(msk[:20, :20], mask)


# -- area ratios ---------------------------------------------------------------

def test_square_26_in_512_is_ultra_small():
    mask = np.zeros((512, 512), dtype=np.int64)
    mask[100:126, 200:226] = 1
    (rec,) = object_records(mask, "a", 2)
    assert rec.pixels == 676
    assert rec.ratio == pytest.approx(0.00258, abs=1e-5)
    assert rec.bucket == "UltraSmall"


def test_full_frame_is_all_only():
    (rec,) = object_records(np.ones((64, 64), dtype=np.int64), "a", 2)
    assert rec.ratio == 1.0 and rec.bucket == "All"
    assert not SizeBucket.SMALL.contains(1.0)


@pytest.mark.parametrize("ratio,expected", [(0.005, "UltraSmall"), (0.05, "Small"), (0.5, "All"),
                                            (0.01, "Small"), (0.1, "All")])
def test_bucket_boundaries(ratio, expected):
    assert bucket_of(ratio).value == expected


def test_buckets_are_cumulative():
    for ratio in (0.001, 0.05, 0.7):
        inside = [b for b in BUCKETS if b.contains(ratio)]
        assert inside == list(BUCKETS[BUCKETS.index(bucket_of(ratio)):])


def test_two_components_of_known_size():
    mask = np.zeros((100, 100), dtype=np.int64)
    mask[0:5, 0:10] = 1          # 50 px = 0.5%
    mask[50:75, 50:70] = 1       # 500 px = 5%
    recs = sorted(object_records(mask, "a", 2), key=lambda r: r.pixels)
    assert [(r.ratio, r.bucket) for r in recs] == [(0.005, "UltraSmall"), (0.05, "Small")]


def test_diagonal_pixels_are_one_component():
    mask = np.eye(6, dtype=np.int64)
    assert len(object_records(mask, "a", 2)) == 1


@given(st.integers(0, 1000))
def test_area_ratio_permutation_invariant(seed):
    r = np.random.default_rng(seed)
    mask = (r.uniform(size=(12, 12)) < 0.15).astype(np.int64) * r.integers(1, 3, (12, 12))
    a = sorted(rec.pixels for rec in object_records(mask, "a", 3))
    flipped = sorted(rec.pixels for rec in object_records(mask[::-1, ::-1], "a", 3))
    transposed = sorted(rec.pixels for rec in object_records(mask.T, "a", 3))
    assert a == flipped == transposed


def test_area_stats_missing_dir_is_empty(tmp_path):
    rep = area_stats(tmp_path / "nope", 3)
    assert rep.records == [] and rep.errors == []


def test_area_stats_reports_bad_files(tmp_path):
    d = tmp_path / "masks"
    d.mkdir()
    Image.fromarray(np.zeros((8, 8, 3), dtype=np.uint8), "RGB").save(d / "rgb.png")
    Image.fromarray(np.full((8, 8), 9, dtype=np.uint8), "L").save(d / "big.png")
    m = np.zeros((8, 8), dtype=np.uint8)
    m[2:4, 2:4] = 1
    Image.fromarray(m, "L").save(d / "ok.png")
    rep = area_stats(d, 3)
    assert sorted(e["file"] for e in rep.errors) == ["big.png", "rgb.png"]
    assert len(rep.records) == 1 and rep.histogram()[1]["UltraSmall"] == 0 and rep.histogram()[1]["Small"] == 1


# -- synthetic data -------------------------------------------------------------

def test_synthetic_objects_are_ultra_small(tmp_path):
    spec = SynthSpec(canvas=96, count=6, seed=1)
    res = generate_synthetic(spec, tmp_path / "s")
    assert res.records and audit(res, spec) == []
    assert all(r.bucket == "UltraSmall" for r in res.records)


def test_synthetic_manifest_matches_recomputation(tmp_path):
    spec = SynthSpec(canvas=64, count=5, seed=2)
    res = generate_synthetic(spec, tmp_path / "s")
    manifest = read_manifest(tmp_path / "s" / "manifest.jsonl")
    assert manifest == res.records
    recomputed = area_stats(tmp_path / "s" / "masks", spec.num_classes).records
    assert sorted(recomputed, key=lambda r: (r.image_id, r.pixels)) == \
        sorted(manifest, key=lambda r: (r.image_id, r.pixels))


def test_synthetic_bitwise_deterministic(tmp_path):
    spec = SynthSpec(canvas=64, count=3, seed=7)
    generate_synthetic(spec, tmp_path / "a")
    generate_synthetic(spec, tmp_path / "b")
    for sub in ("images", "masks"):
        for p in sorted((tmp_path / "a" / sub).iterdir()):
            assert p.read_bytes() == (tmp_path / "b" / sub / p.name).read_bytes()
    assert (tmp_path / "a" / "manifest.jsonl").read_bytes() == (tmp_path / "b" / "manifest.jsonl").read_bytes()


def test_synthetic_seed_changes_output(tmp_path):
    generate_synthetic(SynthSpec(canvas=64, count=1, seed=0), tmp_path / "a")
    generate_synthetic(SynthSpec(canvas=64, count=1, seed=1), tmp_path / "b")
    assert (tmp_path / "a/masks/0000.png").read_bytes() != (tmp_path / "b/masks/0000.png").read_bytes()


def test_zero_objects_gives_background_only(tmp_path):
    res = generate_synthetic(SynthSpec(canvas=64, count=2, objects_per_image=(0, 0)), tmp_path / "s")
    assert res.records == []
    for p in (tmp_path / "s" / "masks").iterdir():
        assert not np.asarray(Image.open(p)).any()
    assert json.loads((tmp_path / "s" / "synth.json").read_text())["objects"] == 0


def test_synth_spec_validation():
    with pytest.raises(ConfigurationError):
        SynthSpec(num_classes=1)


# -- dataset -----------------------------------------------------------------

def test_dataset_batches_deterministic(tmp_path):
    generate_synthetic(SynthSpec(canvas=64, count=5, seed=3), tmp_path / "s")
    ds = SegmentationDataset(tmp_path / "s", 3)
    assert len(ds) == 5
    run = lambda: list(iterate_batches(ds, 2, Rng(1, "d"), AugmentConfig(crop=32)))  # noqa: E731
    a, b = run(), run()
    assert [x[2] for x in a] == [x[2] for x in b]
    for (ia, ma, _), (ib, mb, _) in zip(a, b):
        assert np.array_equal(ia, ib) and np.array_equal(ma, mb)
    assert [x[0].shape[0] for x in a] == [2, 2, 1]
    assert a[0][0].shape[1:] == (3, 32, 32)


def test_dataset_missing_dirs(tmp_path):
    with pytest.raises(FileNotFoundError):
        SegmentationDataset(tmp_path, 3)


def test_dataset_rejects_out_of_range_labels(tmp_path):
    generate_synthetic(SynthSpec(canvas=64, count=1, seed=0), tmp_path / "s")
    m = np.full((64, 64), 5, dtype=np.uint8)
    Image.fromarray(m, "L").save(tmp_path / "s" / "masks" / "0000.png")
    with pytest.raises(ConfigurationError):
        SegmentationDataset(tmp_path / "s", 3)
