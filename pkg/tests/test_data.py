import json
import logging

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from saliteach.data import (
    CausalPatch,
    DatasetBundle,
    PlantedTaskSpec,
    Provenance,
    Region,
    ResizeMode,
    SalienceMap,
    Sample,
    Split,
    SpuriousCue,
    generate_planted_dataset,
    load_manifest,
    read_salience,
    resize_salience,
    write_bundle,
    write_image,
    write_salience,
)
from saliteach.errors import ConfigurationError, InvalidSpecError, ManifestFormatError, NumericError


def test_splits_are_disjoint_and_balanced(tiny_bundle):
    ids = [s.id for _, samples in tiny_bundle.items() for s in samples]
    assert len(ids) == len(set(ids)) == 80
    for split in Split:
        assert tiny_bundle.class_counts(split) == [len(tiny_bundle.split(split)) // 2] * 2


def test_generation_is_deterministic(tiny_spec, tiny_bundle):
    again = generate_planted_dataset(tiny_spec)
    for (_, a), (_, b) in zip(tiny_bundle.items(), again.items()):
        assert [s.id for s in a] == [s.id for s in b]
        assert all(np.array_equal(x.image, y.image) for x, y in zip(a, b))


def test_only_tait_train_carries_ground_truth(tiny_bundle):
    expected = np.zeros((24, 24))
    expected[2:9, 2:9] = 1
    for s in tiny_bundle.tait_train:
        assert s.salience.provenance == Provenance.GROUND_TRUTH
        assert np.array_equal(s.salience.grid, expected)
    for split in (Split.TAIT_VAL, Split.TAIS, Split.EAIS):
        assert all(s.salience is None for s in tiny_bundle.split(split))


def _cue_agreement(samples, spec):
    levels = np.array(spec.spurious_cue.level_table(spec.num_classes))
    region = spec.spurious_cue.region
    hits = 0
    for s in samples:
        block = s.image[region.slices].mean()
        hits += int(np.argmin(abs(levels - block)) == s.label)
    return hits / len(samples)


def test_spurious_cue_follows_configured_correlation():
    spec = PlantedTaskSpec(num_per_split=(400, 10, 10, 400), noise_std=0.02)
    bundle = generate_planted_dataset(spec)
    assert 0.91 <= _cue_agreement(bundle.tait_train, spec) <= 0.99
    assert _cue_agreement(bundle.eais, spec) == 0.0


def test_fully_correlated_cue_predicts_every_training_label():
    spec = PlantedTaskSpec(
        num_per_split=(50, 10, 10, 10), spurious_correlation_train=1.0, noise_std=0.0
    )
    assert _cue_agreement(generate_planted_dataset(spec).tait_train, spec) == 1.0


def test_multiclass_task_balances_every_class():
    spec = PlantedTaskSpec(
        num_per_split=(40, 40, 80, 40),
        num_classes=4,
        spurious_cue=SpuriousCue(Region(14, 14, 8, 8)),
    )
    bundle = generate_planted_dataset(spec)
    assert bundle.num_classes == 4
    assert bundle.class_counts(Split.TAIS) == [20] * 4


@pytest.mark.parametrize(
    "spec, fields",
    [
        (
            PlantedTaskSpec(spurious_cue=SpuriousCue(Region(5, 5, 6, 6))),
            "causal_patch.region and spurious_cue.region",
        ),
        (PlantedTaskSpec(causal_patch=CausalPatch(Region(20, 20, 7, 7))), "causal_patch.region"),
        (PlantedTaskSpec(spurious_correlation_train=1.5), "spurious_correlation_train"),
        (PlantedTaskSpec(num_per_split=(10, 0, 10, 10)), "num_per_split"),
    ],
)
def test_invalid_specs_name_the_offending_fields(spec, fields):
    with pytest.raises(InvalidSpecError, match=fields):
        generate_planted_dataset(spec)


def test_bundle_rejects_shared_ids(tiny_bundle):
    with pytest.raises(InvalidSpecError, match="appears in"):
        DatasetBundle(tiny_bundle.tait_train, tiny_bundle.tait_train[:1], (), (), 2)


def test_salience_outside_unit_interval_is_rejected():
    with pytest.raises(NumericError):
        SalienceMap(np.full((2, 2), -0.1))


@pytest.mark.parametrize("bad", [np.nan, np.inf, -0.1, 1.5])
def test_sample_rejects_non_finite_or_out_of_range_pixels(bad):
    image = np.full((4, 4, 1), 0.5)
    image[1, 2, 0] = bad
    with pytest.raises(NumericError, match="x-1"):
        Sample("x-1", image, 0)


def test_bundle_round_trips_through_manifest(tmp_path, tiny_bundle):
    manifest = write_bundle(tiny_bundle, tmp_path)
    loaded = load_manifest(manifest)
    assert loaded.num_classes == 2
    for (split, a), (_, b) in zip(tiny_bundle.items(), loaded.items()):
        assert [s.id for s in a] == [s.id for s in b], split
        for x, y in zip(a, b):
            assert x.label == y.label
            assert np.array_equal(x.image, y.image)
            assert (x.salience is None) == (y.salience is None)
            if x.salience is not None:
                assert np.array_equal(x.salience.grid, y.salience.grid)


def test_write_bundle_refuses_to_overwrite(tmp_path, tiny_bundle):
    write_bundle(tiny_bundle, tmp_path)
    with pytest.raises(ConfigurationError, match="already exists"):
        write_bundle(tiny_bundle, tmp_path)
    before = (tmp_path / "manifest.jsonl").read_bytes()
    write_bundle(tiny_bundle, tmp_path, force=True)
    assert (tmp_path / "manifest.jsonl").read_bytes() == before


def _manifest(tmp_path, records):
    path = tmp_path / "manifest.jsonl"
    path.write_text("\n".join(json.dumps(r) for r in records) + "\n")
    return path


def test_tait_train_without_salience_is_a_format_error(tmp_path):
    write_image(np.zeros((4, 4, 1)), tmp_path / "a.png")
    record = {"id": "a", "split": "tait_train", "image_path": "a.png", "label": 0}
    path = _manifest(tmp_path, [record])
    with pytest.raises(ManifestFormatError, match="lacks salience_path"):
        load_manifest(path)


def test_unknown_split_tag_is_a_format_error(tmp_path):
    write_image(np.zeros((4, 4, 1)), tmp_path / "a.png")
    path = _manifest(tmp_path, [{"id": "a", "split": "holdout", "image_path": "a.png", "label": 0}])
    with pytest.raises(ManifestFormatError, match="unknown split tag 'holdout'"):
        load_manifest(path)


def test_missing_image_names_the_path(tmp_path):
    record = {"id": "a", "split": "eais", "image_path": "nowhere.png", "label": 0}
    path = _manifest(tmp_path, [record])
    with pytest.raises(FileNotFoundError, match="nowhere.png"):
        load_manifest(path)


def test_salience_on_test_split_is_ignored_with_warning(tmp_path, caplog):
    write_image(np.zeros((4, 4, 1)), tmp_path / "a.png")
    write_image(np.zeros((4, 4, 1)), tmp_path / "b.png")
    write_salience(SalienceMap(np.ones((4, 4))), tmp_path / "s.png")
    path = _manifest(
        tmp_path,
        [
            {
                "id": "a",
                "split": "tait_train",
                "image_path": "a.png",
                "label": 1,
                "salience_path": "s.png",
            },
            {
                "id": "b",
                "split": "eais",
                "image_path": "b.png",
                "label": 0,
                "salience_path": "s.png",
            },
        ],
    )
    with caplog.at_level(logging.WARNING, logger="saliteach.data"):
        bundle = load_manifest(path)
    assert bundle.eais[0].salience is None
    assert "ignoring salience" in caplog.text


def test_salience_with_other_aspect_ratio_is_rejected(tmp_path):
    write_image(np.zeros((4, 4, 1)), tmp_path / "a.png")
    write_salience(SalienceMap(np.ones((2, 3))), tmp_path / "s.png")
    record = {
        "id": "a",
        "split": "tait_train",
        "image_path": "a.png",
        "label": 0,
        "salience_path": "s.png",
    }
    path = _manifest(tmp_path, [record])
    with pytest.raises(ManifestFormatError, match="cannot be resized"):
        load_manifest(path)


def test_several_annotators_are_averaged(tmp_path):
    write_image(np.zeros((2, 2, 1)), tmp_path / "a.png")
    write_salience(SalienceMap(np.ones((2, 2))), tmp_path / "s1.png")
    write_salience(SalienceMap(np.zeros((2, 2))), tmp_path / "s2.png")
    record = {
        "id": "a",
        "split": "tait_train",
        "image_path": "a.png",
        "label": 0,
        "salience_path": ["s1.png", "s2.png"],
    }
    path = _manifest(tmp_path, [record])
    assert load_manifest(path).tait_train[0].salience.grid.tolist() == [[0.5, 0.5], [0.5, 0.5]]


def test_annotator_incorrect_samples_can_be_filtered(tmp_path):
    write_image(np.zeros((2, 2, 1)), tmp_path / "a.png")
    write_salience(SalienceMap(np.ones((2, 2))), tmp_path / "s.png")
    records = [
        {
            "id": i,
            "split": "tait_train",
            "image_path": "a.png",
            "label": 0,
            "salience_path": "s.png",
            "annotator_correct": ok,
        }
        for i, ok in [("a", True), ("b", False)]
    ]
    path = _manifest(tmp_path, records)
    assert [s.id for s in load_manifest(path).tait_train] == ["a", "b"]
    assert [s.id for s in load_manifest(path, filter_correct=True).tait_train] == ["a"]


def test_raw_salience_files_are_lossless(tmp_path):
    grid = np.random.default_rng(0).random((5, 7)).astype(np.float32)
    write_salience(SalienceMap(grid, Provenance.TEACHER_RISE), tmp_path / "m.salf")
    assert (tmp_path / "m.salf").stat().st_size == 16 + 4 * 35
    back = read_salience(tmp_path / "m.salf", Provenance.TEACHER_RISE)
    assert np.array_equal(back.grid, grid)


def test_truncated_raw_salience_is_a_format_error(tmp_path):
    write_salience(SalienceMap(np.ones((3, 3))), tmp_path / "m.salf")
    (tmp_path / "m.salf").write_bytes((tmp_path / "m.salf").read_bytes()[:-4])
    with pytest.raises(ManifestFormatError):
        read_salience(tmp_path / "m.salf")


@settings(max_examples=60, deadline=None)
@given(
    st.integers(1, 12),
    st.integers(1, 12),
    st.integers(1, 12),
    st.integers(1, 12),
    st.sampled_from(list(ResizeMode)),
    st.integers(0, 2**32 - 1),
)
def test_resize_stays_in_unit_interval(h, w, th, tw, mode, seed):
    grid = np.random.default_rng(seed).random((h, w))
    out = resize_salience(SalienceMap(grid), (th, tw), mode)
    assert out.resolution == (th, tw)
    assert out.grid.min() >= 0 and out.grid.max() <= 1


def test_area_average_preserves_the_mean():
    grid = np.random.default_rng(1).random((24, 24))
    out = resize_salience(SalienceMap(grid), (6, 6), ResizeMode.AREA_AVERAGE)
    assert out.grid.mean() == pytest.approx(grid.mean(), abs=1e-6)
