"""Synthetic generator determinism, resizing, manifests, and patient splits."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from camnet.data import (Dataset, MOTIF_CATALOG, Sample, SynthConfig,
                         bilinear_resize, generate_synthetic, load_dataset_dir,
                         load_manifest, patient_split, save_dataset)
from camnet.errors import ConfigError, GenerationError, ManifestError

from oracles import bilinear_reference


# ---------------------------------------------------------------------------
# synthetic generation
# ---------------------------------------------------------------------------


def small_config(**kwargs):
    defaults = dict(num_patients=4, images_per_patient=2, image_size=64,
                    num_classes=3, seed=5)
    defaults.update(kwargs)
    return SynthConfig(**defaults)


def test_generation_is_deterministic():
    a = generate_synthetic(small_config())
    b = generate_synthetic(small_config())
    for sa, sb in zip(a.samples, b.samples):
        assert np.array_equal(sa.image, sb.image)
        assert np.array_equal(sa.labels, sb.labels)
        assert sa.motif_boxes == sb.motif_boxes
        assert sa.patient_id == sb.patient_id


def test_each_sample_depends_only_on_seed_patient_and_index():
    # shrinking the dataset must not change the samples that remain
    big = generate_synthetic(small_config(num_patients=5, images_per_patient=4))
    small = generate_synthetic(small_config(num_patients=3, images_per_patient=2))
    for p in range(3):
        for i in range(2):
            sa = small.samples[p * 2 + i]
            sb = big.samples[p * 4 + i]
            assert np.array_equal(sa.image, sb.image)
            assert np.array_equal(sa.labels, sb.labels)


def test_boxes_match_labels_and_stay_inside_the_frame():
    ds = generate_synthetic(small_config(num_patients=10))
    size = small_config().image_size
    for sample in ds.samples:
        sample.validate()
        boxed = sorted(cls for cls, *_ in sample.motif_boxes)
        assert boxed == sorted(np.flatnonzero(sample.labels).tolist())
        for _, x, y, w, h in sample.motif_boxes:
            assert 0 <= x and x + w <= size
            assert 0 <= y and y + h <= size


def test_motif_pixels_stand_out_from_the_background():
    config = small_config(noise_level=0.15)
    ds = generate_synthetic(config)
    for sample in ds.samples:
        assert sample.image.min() >= 0.0 and sample.image.max() <= 1.0
        for cls, x, y, w, h in sample.motif_boxes:
            mask = MOTIF_CATALOG[cls][1]
            stamped = sample.image[0, y:y + h, x:x + w][mask]
            assert stamped.min() >= 0.6  # well above the noise ceiling


def test_impossible_placement_fails_loudly():
    # every class stamped on the smallest legal canvas cannot avoid overlap
    config = SynthConfig(num_patients=3, images_per_patient=3, image_size=30,
                         num_classes=8, label_prob=0.99, seed=1)
    with pytest.raises(GenerationError, match="overlap"):
        generate_synthetic(config)


@pytest.mark.parametrize("kwargs", [
    {"num_classes": len(MOTIF_CATALOG) + 1},
    {"num_classes": 0},
    {"image_size": 20},
    {"label_prob": 0.0},
    {"noise_level": 0.5},
    {"num_patients": 0},
])
def test_synth_config_rejects_bad_values(kwargs):
    with pytest.raises(ConfigError):
        small_config(**kwargs)


def test_class_names_follow_the_catalog_order():
    assert small_config(num_classes=3).class_names() == [
        "disc_small", "disc_large", "bar_wide"]


# ---------------------------------------------------------------------------
# dataset container
# ---------------------------------------------------------------------------


def test_grayscale_replicates_to_three_channels_on_request():
    ds = generate_synthetic(small_config())
    arr = ds.images_array(channels=3)
    assert arr.shape[1] == 3
    assert np.array_equal(arr[:, 0], arr[:, 1])
    with pytest.raises(ConfigError, match="channels"):
        ds.images_array(channels=4)


def test_subset_keeps_class_names():
    ds = generate_synthetic(small_config())
    sub = ds.subset([0, 3])
    assert len(sub) == 2
    assert sub.class_names == ds.class_names


# ---------------------------------------------------------------------------
# bilinear resizing
# ---------------------------------------------------------------------------


@given(seed=st.integers(0, 2**32 - 1), src=st.integers(2, 24),
       target=st.integers(1, 24))
@settings(max_examples=40, deadline=None)
def test_resize_matches_the_scalar_reference(seed, src, target):
    rng = np.random.default_rng(seed)
    image = rng.uniform(size=(src, src))
    np.testing.assert_allclose(bilinear_resize(image, target),
                               bilinear_reference(image, target), atol=1e-12)


def test_resize_to_same_size_is_an_exact_copy():
    rng = np.random.default_rng(0)
    image = rng.uniform(size=(9, 9))
    out = bilinear_resize(image, 9)
    assert np.array_equal(out, image)
    assert out is not image


def test_resize_is_idempotent():
    rng = np.random.default_rng(1)
    once = bilinear_resize(rng.uniform(size=(17, 17)), 8)
    assert np.array_equal(bilinear_resize(once, 8), once)


def test_resize_preserves_corner_values():
    rng = np.random.default_rng(2)
    image = rng.uniform(size=(11, 11))
    out = bilinear_resize(image, 5)
    assert out[0, 0] == pytest.approx(image[0, 0])
    assert out[-1, -1] == pytest.approx(image[-1, -1])


# ---------------------------------------------------------------------------
# save / load round trip
# ---------------------------------------------------------------------------


def test_round_trip_through_png_and_manifest(tmp_path):
    ds = generate_synthetic(small_config())
    summary = save_dataset(ds, tmp_path)
    assert summary["num_samples"] == len(ds)
    assert summary["num_patients"] == 4
    assert summary["classes"] == ds.class_names

    loaded = load_dataset_dir(tmp_path)
    assert loaded.class_names == ds.class_names
    assert loaded.patient_ids() == ds.patient_ids()
    for orig, back in zip(ds.samples, loaded.samples):
        assert np.array_equal(orig.labels, back.labels)
        assert sorted(orig.motif_boxes) == sorted(back.motif_boxes)
        # 8-bit quantization is the only loss
        assert np.abs(orig.image - back.image).max() <= 0.5 / 255 + 1e-6


def test_loading_prefers_the_summary_class_order(tmp_path):
    ds = generate_synthetic(small_config())
    save_dataset(ds, tmp_path)
    # summary.json fixes the vocabulary even though manifest inference
    # would sort it differently
    assert load_dataset_dir(tmp_path).class_names == ds.class_names
    inferred = load_manifest(tmp_path / "manifest.csv")
    assert inferred.class_names == sorted(
        n for n in ds.class_names
        if any(s.labels[ds.class_names.index(n)] for s in ds.samples))


def test_missing_manifest_is_reported(tmp_path):
    with pytest.raises(ManifestError, match="manifest.csv"):
        load_dataset_dir(tmp_path)


# ---------------------------------------------------------------------------
# manifest edge cases
# ---------------------------------------------------------------------------


def write_png(path, size=8):
    Image.fromarray(np.full((size, size), 128, dtype=np.uint8), mode="L").save(path)


def test_bad_header_is_rejected(tmp_path):
    (tmp_path / "manifest.csv").write_text("file,subject,tags\na.png,p1,\n")
    with pytest.raises(ManifestError, match="expected header"):
        load_manifest(tmp_path / "manifest.csv")


def test_unknown_label_aborts_in_strict_mode(tmp_path):
    write_png(tmp_path / "a.png")
    (tmp_path / "manifest.csv").write_text(
        "path,patient_id,labels\na.png,p1,nodule|haze\n")
    with pytest.raises(ManifestError, match="haze"):
        load_manifest(tmp_path / "manifest.csv", class_names=["nodule"])


def test_lenient_mode_skips_and_counts_bad_rows(tmp_path):
    write_png(tmp_path / "a.png")
    (tmp_path / "manifest.csv").write_text(
        "path,patient_id,labels\n"
        "a.png,p1,nodule\n"
        "missing.png,p2,nodule\n"
        "a.png,p3,unheard_of\n")
    ds = load_manifest(tmp_path / "manifest.csv", class_names=["nodule"],
                       strict=False)
    assert len(ds) == 1
    assert ds.skipped_rows == 2
    assert ds.patient_ids() == ["p1"]


def test_undecodable_image_is_a_manifest_error(tmp_path):
    (tmp_path / "a.png").write_text("this is not an image")
    (tmp_path / "manifest.csv").write_text("path,patient_id,labels\na.png,p1,\n")
    with pytest.raises(ManifestError, match="cannot decode"):
        load_manifest(tmp_path / "manifest.csv")


def test_images_are_resized_to_the_requested_input(tmp_path):
    write_png(tmp_path / "a.png", size=30)
    (tmp_path / "manifest.csv").write_text("path,patient_id,labels\na.png,p1,\n")
    ds = load_manifest(tmp_path / "manifest.csv", target_size=16)
    assert ds.samples[0].image.shape == (1, 16, 16)


def test_box_sidecar_attaches_by_class_name(tmp_path):
    write_png(tmp_path / "a.png")
    (tmp_path / "manifest.csv").write_text("path,patient_id,labels\na.png,p1,nodule\n")
    (tmp_path / "boxes.csv").write_text(
        "path,class,x,y,w,h\na.png,nodule,1,2,3,4\n")
    ds = load_manifest(tmp_path / "manifest.csv", class_names=["nodule"])
    assert ds.samples[0].motif_boxes == [(0, 1, 2, 3, 4)]


# ---------------------------------------------------------------------------
# patient splits
# ---------------------------------------------------------------------------


def make_flat_dataset(num_patients, images_each=2):
    samples = [
        Sample(image=np.zeros((1, 4, 4)), labels=np.array([1.0]),
               patient_id=f"p{p:03d}")
        for p in range(num_patients) for _ in range(images_each)
    ]
    return Dataset(samples, class_names=["only"])


def test_ten_patients_split_seven_one_two():
    train, val, test = patient_split(make_flat_dataset(10), train_frac=0.8,
                                     val_frac_of_train=0.1, seed=0)
    assert len(set(train.patient_ids())) == 7
    assert len(set(val.patient_ids())) == 1
    assert len(set(test.patient_ids())) == 2


def test_split_is_deterministic():
    ds = make_flat_dataset(12)
    first = patient_split(ds, seed=3)
    second = patient_split(ds, seed=3)
    for a, b in zip(first, second):
        assert a.patient_ids() == b.patient_ids()


@given(num_patients=st.integers(4, 40), seed=st.integers(0, 2**32 - 1),
       train_frac=st.floats(0.5, 0.9), val_frac=st.floats(0.05, 0.4))
@settings(max_examples=60, deadline=None)
def test_no_patient_ever_spans_two_splits(num_patients, seed, train_frac, val_frac):
    ds = make_flat_dataset(num_patients)
    try:
        train, val, test = patient_split(ds, train_frac=train_frac,
                                         val_frac_of_train=val_frac, seed=seed)
    except ConfigError:
        return  # tiny cohorts can leave a subset empty, which must raise
    groups = [set(train.patient_ids()), set(val.patient_ids()),
              set(test.patient_ids())]
    assert not (groups[0] & groups[1])
    assert not (groups[0] & groups[2])
    assert not (groups[1] & groups[2])
    assert groups[0] | groups[1] | groups[2] == set(ds.patient_ids())
    assert len(train) + len(val) + len(test) == len(ds)


def test_degenerate_splits_raise():
    with pytest.raises(ConfigError):
        patient_split(make_flat_dataset(2), train_frac=0.8)
    with pytest.raises(ConfigError, match="fractions"):
        patient_split(make_flat_dataset(10), train_frac=1.5)
