import json
import struct

import numpy as np
import pytest

import oracles
from nws.data import (ImageDataset, SyntheticSpec, load_class_folders, load_dataset, load_idx, make_synthetic,
                      read_idx, save_class_folders, save_idx_dataset, write_idx)
from nws.errors import DatasetError


def idx_bytes(code, dims, payload):
    return bytes([0, 0, code, len(dims)]) + struct.pack(f">{len(dims)}I", *dims) + payload


@pytest.fixture
def four_samples(tmp_path):
    images = np.arange(4 * 2 * 2, dtype=np.uint8).reshape(4, 2, 2)
    (tmp_path / "images.idx").write_bytes(idx_bytes(0x08, (4, 2, 2), images.tobytes()))
    (tmp_path / "labels.idx").write_bytes(idx_bytes(0x08, (4,), bytes([0, 1, 1, 2])))
    return tmp_path


class TestIdx:
    def test_four_samples(self, four_samples):
        ds = load_idx(four_samples)
        assert ds.images.shape == (4, 1, 2, 2)
        assert ds.images.dtype == np.float32
        np.testing.assert_allclose(ds.images[1, 0], np.array([[4, 5], [6, 7]]) / 255)
        assert ds.label_counts() == {0: 1, 1: 2, 2: 1}

    def test_label_counts_match_independent_parser(self, tmp_path, tiny_data):
        save_idx_dataset(tmp_path, tiny_data.train)
        labels = oracles.read_idx_labels(tmp_path / "labels.idx")
        values, counts = np.unique(labels, return_counts=True)
        assert load_idx(tmp_path).label_counts() == dict(zip(values.tolist(), counts.tolist()))

    def test_float_roundtrip(self, tmp_path, tiny_data):
        save_idx_dataset(tmp_path, tiny_data.test)
        again = load_idx(tmp_path)
        np.testing.assert_array_equal(again.images, tiny_data.test.images)
        np.testing.assert_array_equal(again.labels, tiny_data.test.labels)

    @pytest.mark.parametrize("dtype", [np.int16, np.int32, np.float64])
    def test_write_read(self, tmp_path, dtype):
        arr = np.arange(12).reshape(3, 4).astype(dtype)
        write_idx(tmp_path / "a.idx", arr)
        np.testing.assert_array_equal(read_idx(tmp_path / "a.idx"), arr)

    def test_bad_magic(self, tmp_path):
        (tmp_path / "x.idx").write_bytes(b"\x01\x00\x08\x01\x00\x00\x00\x00")
        with pytest.raises(DatasetError, match="byte offset 0"):
            read_idx(tmp_path / "x.idx")

    def test_unknown_type(self, tmp_path):
        (tmp_path / "x.idx").write_bytes(b"\x00\x00\x07\x01\x00\x00\x00\x00")
        with pytest.raises(DatasetError, match="byte offset 2"):
            read_idx(tmp_path / "x.idx")

    def test_size_mismatch(self, tmp_path):
        (tmp_path / "x.idx").write_bytes(idx_bytes(0x08, (5,), b"\0\0\0"))
        with pytest.raises(DatasetError, match="offset 11"):
            read_idx(tmp_path / "x.idx")

    def test_missing_labels(self, four_samples):
        (four_samples / "labels.idx").unlink()
        with pytest.raises(DatasetError):
            load_idx(four_samples)

    def test_count_mismatch(self, four_samples):
        (four_samples / "labels.idx").write_bytes(idx_bytes(0x08, (3,), bytes(3)))
        with pytest.raises(DatasetError):
            load_idx(four_samples)


class TestFolders:
    def test_roundtrip(self, tmp_path, tiny_data):
        save_class_folders(tmp_path, tiny_data.test)
        again = load_class_folders(tmp_path)
        assert again.label_counts() == tiny_data.test.label_counts()
        assert again.image_shape == tiny_data.test.image_shape
        for c in tiny_data.test.classes:
            want = np.clip(tiny_data.test.images[tiny_data.test.labels == c], 0, 1)
            # uint8 storage rounds to the nearest 1/255
            np.testing.assert_allclose(again.images[again.labels == c], want, atol=0.5 / 255 + 1e-6)

    def test_pixel_layout(self, tmp_path):
        (tmp_path / "header.json").write_text(json.dumps({"height": 1, "width": 2, "channels": 3}))
        (tmp_path / "7_cat").mkdir()
        (tmp_path / "7_cat" / "a.raw").write_bytes(bytes([255, 0, 0, 0, 255, 0]))
        ds = load_class_folders(tmp_path)
        assert ds.labels.tolist() == [7]
        np.testing.assert_array_equal(ds.images[0, :, 0], [[1, 0], [0, 1], [0, 0]])

    def test_wrong_blob_size(self, tmp_path):
        (tmp_path / "header.json").write_text(json.dumps({"height": 2, "width": 2, "channels": 1}))
        (tmp_path / "0").mkdir()
        (tmp_path / "0" / "a.raw").write_bytes(bytes(3))
        with pytest.raises(DatasetError, match="byte offset 3"):
            load_class_folders(tmp_path)

    def test_bad_header(self, tmp_path):
        (tmp_path / "header.json").write_text("{")
        with pytest.raises(DatasetError):
            load_class_folders(tmp_path)

    def test_bad_folder_name(self, tmp_path):
        (tmp_path / "header.json").write_text(json.dumps({"height": 1, "width": 1, "channels": 1}))
        (tmp_path / "dogs").mkdir()
        with pytest.raises(DatasetError):
            load_class_folders(tmp_path)


class TestLoadDataset:
    def test_detects_format(self, tmp_path, tiny_data):
        save_idx_dataset(tmp_path / "a", tiny_data.test)
        save_class_folders(tmp_path / "b", tiny_data.test)
        assert len(load_dataset(tmp_path / "a")) == len(load_dataset(tmp_path / "b")) == len(tiny_data.test)

    def test_missing(self, tmp_path):
        with pytest.raises(DatasetError):
            load_dataset(tmp_path / "none")

    def test_unknown_format(self, tmp_path):
        with pytest.raises(DatasetError):
            load_dataset(tmp_path, "hdf5")


class TestImageDataset:
    def test_rank_checked(self):
        with pytest.raises(DatasetError):
            ImageDataset(np.zeros((2, 4, 4)), np.zeros(2))

    def test_shuffle_is_seeded(self, tiny_data):
        a = tiny_data.train.shuffled(3)
        b = tiny_data.train.shuffled(3)
        np.testing.assert_array_equal(a.labels, b.labels)
        assert a.label_counts() == tiny_data.train.label_counts()

    def test_select_remaps(self, tiny_data):
        ds = tiny_data.train.select([5, 3])
        assert ds.label_counts() == {0: 20, 1: 20}
        assert tiny_data.train.select([5], remap=False).classes.tolist() == [5]

    def test_batches_cover_everything(self, tiny_data, rng):
        seen = np.concatenate([y for _, y in tiny_data.train.batches(7, rng)])
        assert sorted(seen) == sorted(tiny_data.train.labels)
        assert [len(y) for _, y in tiny_data.train.batches(25)] == [25, 25, 10]


class TestSynthetic:
    def test_shapes_and_determinism(self):
        spec = SyntheticSpec(num_classes=3, image_size=6)
        a = make_synthetic(spec, 4)
        assert a.images.shape == (12, 3, 6, 6)
        np.testing.assert_array_equal(a.images, make_synthetic(spec, 4).images)

    def test_split_seed_gives_new_draws(self):
        spec = SyntheticSpec(num_classes=2, image_size=6)
        assert not np.array_equal(make_synthetic(spec, 2, split_seed=0).images,
                                  make_synthetic(spec, 2, split_seed=1).images)

    def test_class_subset_matches_full_draw(self):
        spec = SyntheticSpec(num_classes=4, image_size=6)
        full = make_synthetic(spec, 3)
        part = make_synthetic(spec, 3, classes=[2])
        np.testing.assert_array_equal(part.images, full.images[full.labels == 2])
