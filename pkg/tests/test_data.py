import csv
import logging

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from xmodnet.data import (
    DatasetError,
    DatasetSplit,
    load_miniimagenet,
    load_split,
    sample_episode,
    save_split,
    synthetic_dataset,
    synthetic_splits,
)


def tiny_split(classes=2, per_class=2, res=16):
    return DatasetSplit(
        "train",
        {c: np.full((per_class, res, res, 3), c / 10, dtype=np.float32) for c in range(classes)},
    )


def write_folder(root, split_name, labels_counts, res=8):
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "splits").mkdir(parents=True, exist_ok=True)
    with (root / "splits" / f"{split_name}.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["filename", "label"])
        for label, count in labels_counts.items():
            for i in range(count):
                name = f"{split_name}_{label}_{i}.png"
                Image.fromarray(np.full((res, res, 3), i * 20, dtype=np.uint8)).save(root / "images" / name)
                w.writerow([name, label])


# ---------------------------------------------------------------------------
# sampling


def test_episode_sizes_five_way_one_shot(separable_32, rng):
    ep = sample_episode(separable_32, 5, 1, 15, rng)
    assert len(ep.support) == 5
    assert len(ep.query) == 75
    assert ep.way == 5 and ep.shot == 1


def test_exhaustive_two_by_two(rng):
    ep = sample_episode(tiny_split(), 2, 1, 1, rng)
    s = {(e.class_id, e.index) for e in ep.support}
    q = {(e.class_id, e.index) for e in ep.query}
    assert not s & q
    assert {c for c, _ in s} == {c for c, _ in q} == {0, 1}


def test_same_seed_same_episode(separable_32):
    a = sample_episode(separable_32, 5, 1, 3, np.random.default_rng(9))
    b = sample_episode(separable_32, 5, 1, 3, np.random.default_rng(9))
    np.testing.assert_array_equal(a.support_images(), b.support_images())
    np.testing.assert_array_equal(a.query_images(), b.query_images())
    assert a.episode_labels == b.episode_labels


def test_too_few_classes(rng):
    with pytest.raises(DatasetError, match="2 classes"):
        sample_episode(tiny_split(), 3, 1, 1, rng)


def test_too_few_examples_names_class(rng):
    split = DatasetSplit("val", {0: np.zeros((5, 16, 16, 3)), 7: np.zeros((1, 16, 16, 3))}, {7: "n0007"})
    with pytest.raises(DatasetError, match="n0007"):
        sample_episode(split, 2, 1, 1, rng)


@settings(max_examples=40, deadline=None)
@given(
    way=st.integers(1, 6),
    shot=st.integers(1, 3),
    queries=st.integers(0, 4),
    seed=st.integers(0, 2**32 - 1),
)
def test_episode_invariants(way, shot, queries, seed):
    split = synthetic_dataset(6, 8, resolution=16, seed=1)
    ep = sample_episode(split, way, shot, queries, np.random.default_rng(seed))
    support_classes = [e.class_id for e in ep.support]
    assert len(set(support_classes)) == way
    assert all(support_classes.count(c) == shot for c in set(support_classes))
    assert {e.class_id for e in ep.query} <= set(support_classes)
    assert len(ep.query) == way * queries
    s = {(e.class_id, e.index) for e in ep.support}
    assert not s & {(e.class_id, e.index) for e in ep.query}
    assert sorted(ep.episode_labels.values()) == list(range(way))
    assert set(ep.episode_labels) == set(support_classes)


def test_images_are_unit_range(separable_32, rng):
    ep = sample_episode(separable_32, 5, 1, 2, rng)
    imgs = ep.query_images()
    assert imgs.dtype == np.float32
    assert imgs.min() >= 0.0 and imgs.max() <= 1.0


# ---------------------------------------------------------------------------
# image folders


def test_empty_root_reports_missing_manifest(tmp_path):
    with pytest.raises(DatasetError, match="manifest not found"):
        load_miniimagenet(tmp_path, "train")


def test_missing_image_is_named(tmp_path):
    write_folder(tmp_path, "test", {"a": 2})
    with (tmp_path / "splits" / "test.csv").open("a") as fh:
        fh.write("ghost.png,a\n")
    with pytest.raises(DatasetError, match="ghost.png"):
        load_split(tmp_path, "test", resolution=16)


def test_wrong_class_count_rejected(tmp_path):
    write_folder(tmp_path, "val", {f"c{i}": 1 for i in range(3)})
    with pytest.raises(DatasetError, match="expected 16"):
        load_miniimagenet(tmp_path, "val")


def test_miniimagenet_layout_loads_and_resizes(tmp_path, caplog):
    write_folder(tmp_path, "val", {f"n{i:02d}": 2 for i in range(16)}, res=10)
    with caplog.at_level(logging.WARNING):
        split = load_miniimagenet(tmp_path, "val")
    assert len(split.classes) == 16
    assert split.resolution == 84
    img = split.image(split.classes[0], 1)
    assert img.shape == (84, 84, 3) and img.dtype == np.float32
    np.testing.assert_allclose(img, 20 / 255, atol=1e-6)
    assert "expected 600" in caplog.text


def test_bad_header(tmp_path):
    (tmp_path / "splits").mkdir()
    (tmp_path / "splits" / "train.csv").write_text("file,class\n")
    with pytest.raises(DatasetError, match="header"):
        load_split(tmp_path, "train")


def test_save_and_reload_round_trip(tmp_path):
    split = synthetic_dataset(3, 4, resolution=16, seed=2, name="test")
    save_split(split, tmp_path)
    back = load_split(tmp_path, "test", resolution=16)
    assert len(back) == 12 and len(back.classes) == 3
    for orig_id, new_id in zip(split.classes, back.classes):
        np.testing.assert_allclose(back.image(new_id, 0), split.image(orig_id, 0), atol=0.5 / 255 + 1e-6)


def test_split_class_ids_disjoint(tmp_path):
    write_folder(tmp_path, "train", {"a": 1})
    write_folder(tmp_path, "test", {"a": 1})
    assert not set(load_split(tmp_path, "train").classes) & set(load_split(tmp_path, "test").classes)


# ---------------------------------------------------------------------------
# synthetic data


def test_synthetic_counts():
    split = synthetic_dataset(10, 20, resolution=16)
    assert len(split) == 200 and len(split.classes) == 10


@pytest.mark.parametrize("mode", ["separable", "pairwise"])
def test_synthetic_is_deterministic(mode):
    a = synthetic_dataset(4, 3, resolution=16, mode=mode, seed=8)
    b = synthetic_dataset(4, 3, resolution=16, mode=mode, seed=8)
    for c in a.classes:
        np.testing.assert_array_equal(a.examples[c], b.examples[c])


def test_synthetic_resolution_must_divide_by_16():
    with pytest.raises(DatasetError, match="divisible by 16"):
        synthetic_dataset(2, 2, resolution=20)


def test_separable_nearest_template_is_perfect():
    split = synthetic_dataset(5, 20, resolution=32, mode="separable", seed=4)
    # class means stand in for the hidden templates
    centers = np.stack([split.examples[c].mean(axis=0) for c in split.classes])
    correct = 0
    for k, c in enumerate(split.classes):
        for img in split.examples[c]:
            d = ((centers - img) ** 2).sum(axis=(1, 2, 3))
            correct += int(np.argmin(d) == k)
    assert correct == 100


def test_pairwise_informative_channel_varies():
    imgs = synthetic_dataset(2, 30, resolution=16, mode="pairwise", seed=0).examples[0]

    def match(a, b):
        return np.abs(a - b).mean() < 0.15

    # the class pattern is the one channel of image 0 with a near-copy in every other image
    shared = [c for c in range(3) if all(any(match(imgs[0][..., c], img[..., ch]) for ch in range(3)) for img in imgs[1:])]
    assert len(shared) == 1
    pattern = imgs[0][..., shared[0]]
    where = {next(ch for ch in range(3) if match(pattern, img[..., ch])) for img in imgs}
    assert len(where) > 1


def test_synthetic_splits_are_disjoint():
    splits = synthetic_splits(4, 3, resolution=16, seed=1)
    ids = [set(s.classes) for s in splits.values()]
    assert not (ids[0] & ids[1] or ids[0] & ids[2] or ids[1] & ids[2])
    assert [s.name for s in splits.values()] == ["train", "val", "test"]
