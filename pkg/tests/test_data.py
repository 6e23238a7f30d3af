"""Dataset ingestion: synthetic generation, folder decoding, split determinism."""

import logging

import numpy as np
import pytest
import torch
from PIL import Image

from sslnas.data import DatasetDescriptor, generate_synthetic, load_dataset
from sslnas.errors import ConfigError, DataError


def make_image_folder(root, classes=("cats", "dogs"), per_class=5, size=20):
    rng = np.random.default_rng(0)
    for cls in classes:
        d = root / cls
        d.mkdir(parents=True)
        for i in range(per_class):
            arr = rng.integers(0, 255, size=(size, size, 3), dtype=np.uint8)
            Image.fromarray(arr, "RGB").save(d / f"img_{i:03d}.png")
    return root


class TestDescriptor:
    def test_split_fractions_must_sum_to_one(self):
        with pytest.raises(ConfigError):
            DatasetDescriptor(kind="synthetic", splits=(("train", 0.5), ("eval", 0.3)))

    def test_folder_needs_root(self):
        with pytest.raises(ConfigError):
            DatasetDescriptor(kind="folder")

    def test_synthetic_needs_two_classes(self):
        with pytest.raises(ConfigError):
            DatasetDescriptor(kind="synthetic", classes=1)

    def test_unknown_kind(self):
        with pytest.raises(ConfigError):
            DatasetDescriptor(kind="webdataset")

    def test_from_dict_with_split_mapping(self):
        desc = DatasetDescriptor.from_dict(
            {"kind": "synthetic", "classes": 3, "splits": {"train": 0.7, "eval": 0.3}}
        )
        assert desc.splits == (("train", 0.7), ("eval", 0.3))


class TestSynthetic:
    def test_sample_count_and_shapes(self):
        desc = DatasetDescriptor(kind="synthetic", classes=10, samples_per_class=100, image_size=32, seed=7)
        data = load_dataset(desc)
        assert len(data) == 1000
        assert data.images.shape == (1000, 3, 32, 32)
        assert data.images.dtype == np.uint8
        assert data.num_classes == 10

    def test_identical_bytes_across_generations(self):
        desc = DatasetDescriptor(kind="synthetic", classes=4, samples_per_class=6, image_size=16, seed=3)
        imgs_a, labels_a, _ = generate_synthetic(desc)
        imgs_b, labels_b, _ = generate_synthetic(desc)
        assert imgs_a.tobytes() == imgs_b.tobytes()
        np.testing.assert_array_equal(labels_a, labels_b)

    def test_classes_are_visually_distinct(self):
        desc = DatasetDescriptor(kind="synthetic", classes=6, samples_per_class=8, image_size=16, seed=1)
        imgs, labels, _ = generate_synthetic(desc)
        means = np.stack([imgs[labels == c].mean(axis=(0, 2, 3)) for c in range(6)])
        # class mean colors must be pairwise separated
        for i in range(6):
            for j in range(i + 1, 6):
                assert np.abs(means[i] - means[j]).max() > 5.0

    def test_image_accessor_float_range(self):
        data = load_dataset(DatasetDescriptor(kind="synthetic", classes=2, samples_per_class=4, image_size=16, seed=2))
        img = data.image(0)
        assert img.dtype == torch.float64
        assert 0.0 <= float(img.min()) and float(img.max()) <= 1.0

    def test_normalization_uses_train_stats(self):
        data = load_dataset(DatasetDescriptor(kind="synthetic", classes=3, samples_per_class=10, image_size=16, seed=4))
        train = data.indices("train")
        stacked = np.stack([data.images[i] for i in train]).astype(np.float64) / 255.0
        np.testing.assert_allclose(data.mean.numpy().ravel(), stacked.mean(axis=(0, 2, 3)), atol=1e-12)
        normalized = data.normalize(data.image(int(train[0])))
        assert normalized.shape == (3, 16, 16)


class TestSplits:
    def test_expected_sizes_two_classes_of_five(self, tmp_path):
        root = make_image_folder(tmp_path / "ds")
        data = load_dataset(DatasetDescriptor(kind="folder", root=str(root), image_size=16, seed=5))
        assert len(data) == 10
        assert len(data.indices("train")) == 8
        assert len(data.indices("eval")) == 2
        # stratified: each class contributes 4 train / 1 eval
        for cls in (0, 1):
            members = data.labels[data.indices("train")] == cls
            assert members.sum() == 4

    def test_same_folder_same_assignment(self, tmp_path):
        root = make_image_folder(tmp_path / "ds")
        desc = DatasetDescriptor(kind="folder", root=str(root), image_size=16, seed=5)
        a = load_dataset(desc)
        b = load_dataset(desc)
        np.testing.assert_array_equal(a.split_assignment, b.split_assignment)
        assert a.images.tobytes() == b.images.tobytes()

    def test_split_changes_with_seed(self, tmp_path):
        root = make_image_folder(tmp_path / "ds", per_class=20)
        a = load_dataset(DatasetDescriptor(kind="folder", root=str(root), image_size=16, seed=1))
        b = load_dataset(DatasetDescriptor(kind="folder", root=str(root), image_size=16, seed=2))
        assert not np.array_equal(a.split_assignment, b.split_assignment)

    def test_synthetic_split_determinism(self):
        desc = DatasetDescriptor(kind="synthetic", classes=5, samples_per_class=9, image_size=16, seed=6)
        a = load_dataset(desc)
        b = load_dataset(desc)
        np.testing.assert_array_equal(a.split_assignment, b.split_assignment)

    def test_unknown_split_rejected(self):
        data = load_dataset(DatasetDescriptor(kind="synthetic", classes=2, samples_per_class=4, image_size=16, seed=0))
        with pytest.raises(DataError):
            data.indices("test")


class TestFolderLoading:
    def test_empty_class_directory_rejected(self, tmp_path):
        root = make_image_folder(tmp_path / "ds")
        (root / "empty_class").mkdir()
        with pytest.raises(DataError):
            load_dataset(DatasetDescriptor(kind="folder", root=str(root), image_size=16))

    def test_missing_root_rejected(self, tmp_path):
        with pytest.raises(DataError):
            load_dataset(DatasetDescriptor(kind="folder", root=str(tmp_path / "nope"), image_size=16))

    def test_unreadable_image_skipped_with_warning(self, tmp_path, caplog):
        root = make_image_folder(tmp_path / "ds")
        (root / "cats" / "broken.png").write_bytes(b"this is not a png")
        with caplog.at_level(logging.WARNING):
            data = load_dataset(DatasetDescriptor(kind="folder", root=str(root), image_size=16, seed=5))
        assert data.skipped == 1
        assert len(data) == 10
        assert any("skipping unreadable" in r.message for r in caplog.records)

    def test_images_resized_to_descriptor_size(self, tmp_path):
        root = make_image_folder(tmp_path / "ds", size=33)
        data = load_dataset(DatasetDescriptor(kind="folder", root=str(root), image_size=16))
        assert data.images.shape[-2:] == (16, 16)

    def test_worker_count_does_not_change_result(self, tmp_path, monkeypatch):
        root = make_image_folder(tmp_path / "ds", per_class=8)
        desc = DatasetDescriptor(kind="folder", root=str(root), image_size=16, seed=5)
        monkeypatch.delenv("ENGINE_NUM_WORKERS", raising=False)
        serial = load_dataset(desc)
        monkeypatch.setenv("ENGINE_NUM_WORKERS", "4")
        parallel = load_dataset(desc)
        assert serial.images.tobytes() == parallel.images.tobytes()
        np.testing.assert_array_equal(serial.split_assignment, parallel.split_assignment)
