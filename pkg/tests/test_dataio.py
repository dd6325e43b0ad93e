import numpy as np
import numpy.testing as npt
import pytest

from conftest import require_dataset, write_idx_pair
from hebb.dataio import (
    BatchPlan,
    Dataset,
    batches,
    load_idx_pair,
    read_idx,
    split,
    write_idx,
)
from hebb.errors import ConfigError, FormatError
from hebb.tensorcore import RngState


def hand_built_idx(dims, payload: bytes) -> bytes:
    """Byte-level IDX construction, independent of write_idx."""
    out = bytes([0, 0, 0x08, len(dims)])
    for d in dims:
        out += d.to_bytes(4, "big")
    return out + payload


class TestIdxParsing:
    def test_hand_built_cube(self, tmp_path):
        # dims [2,2,2] with payload bytes 0..7: pixel (0,0,0,1) is byte 1
        path = tmp_path / "cube-idx3-ubyte"
        path.write_bytes(hand_built_idx([2, 2, 2], bytes(range(8))))
        labels = tmp_path / "labels-idx1-ubyte"
        labels.write_bytes(hand_built_idx([2], bytes([0, 1])))
        ds = load_idx_pair(path, labels)
        assert ds.images.shape == (2, 1, 2, 2)
        assert ds.images[0, 0, 0, 1] == 1 / 255
        assert ds.images[1, 0, 1, 1] == 7 / 255

    def test_truncated_file_is_format_error(self, tmp_path):
        path = tmp_path / "bad-idx3-ubyte"
        path.write_bytes(hand_built_idx([2, 2, 2], bytes(range(5))))
        with pytest.raises(FormatError, match="offset"):
            read_idx(path)

    def test_wrong_magic(self, tmp_path):
        path = tmp_path / "bad"
        path.write_bytes(b"\x01\x00\x08\x01" + bytes(4) + b"\x00")
        with pytest.raises(FormatError, match="magic"):
            read_idx(path)

    def test_wrong_dtype_byte(self, tmp_path):
        path = tmp_path / "bad"
        path.write_bytes(b"\x00\x00\x0d\x01" + (1).to_bytes(4, "big") + b"\x00")
        with pytest.raises(FormatError, match="0x0d"):
            read_idx(path)

    def test_count_mismatch(self, tmp_path):
        images, labels = write_idx_pair(
            tmp_path, np.zeros((3, 2, 2), np.uint8), np.zeros(2, np.uint8)
        )
        with pytest.raises(FormatError, match="counts differ"):
            load_idx_pair(images, labels)

    def test_gzip_sniffing(self, tmp_path):
        rng = np.random.default_rng(0)
        images_u8 = rng.integers(0, 256, (4, 3, 3), dtype=np.uint8)
        labels_u8 = np.array([0, 1, 2, 1], np.uint8)
        plain = write_idx_pair(tmp_path, images_u8, labels_u8, gz=False)
        zipped = write_idx_pair(tmp_path, images_u8, labels_u8, gz=True)
        with open(zipped[0], "rb") as f:
            assert f.read(2) == b"\x1f\x8b"  # actually gzip-compressed
        a = load_idx_pair(*plain)
        b = load_idx_pair(*zipped)
        assert a.images.tobytes() == b.images.tobytes()

    def test_round_trip_bit_identical(self, tmp_path):
        rng = np.random.default_rng(1)
        u8 = rng.integers(0, 256, (5, 4, 4), dtype=np.uint8)
        path = tmp_path / "a-idx3-ubyte"
        write_idx(path, u8)
        back = read_idx(path)
        assert back.tobytes() == u8.tobytes()

    def test_dataset_round_trip_bit_identical(self, tmp_path):
        # loaded pixels are k/255, so scaling back to bytes is exact
        rng = np.random.default_rng(9)
        images_u8 = rng.integers(0, 256, (6, 3, 3), dtype=np.uint8)
        labels_u8 = rng.integers(0, 4, 6, dtype=np.uint8)
        (tmp_path / "a").mkdir()
        first = write_idx_pair(tmp_path / "a", images_u8, labels_u8)
        ds = load_idx_pair(*first)
        rescaled = np.round(ds.images[:, 0] * 255).astype(np.uint8)
        (tmp_path / "b").mkdir()
        second = write_idx_pair(tmp_path / "b", rescaled,
                                ds.labels.astype(np.uint8))
        again = load_idx_pair(*second)
        assert again.images.tobytes() == ds.images.tobytes()
        assert again.labels.tobytes() == ds.labels.tobytes()

    def test_real_mnist_shape(self):
        # full train set: 60,000 grayscale 28x28 images
        train_images, train_labels, _, _ = require_dataset("mnist")
        ds = load_idx_pair(train_images, train_labels)
        assert ds.images.shape == (60_000, 1, 28, 28)
        assert ds.images.min() >= 0 and ds.images.max() <= 1


def tiny_dataset(n=10, classes=3):
    rng = np.random.default_rng(2)
    images = rng.uniform(0, 1, (n, 1, 2, 2))
    labels = np.arange(n) % classes
    return Dataset(images, labels, classes)


class TestBatches:
    def test_sizes_and_order_without_shuffle(self):
        ds = tiny_dataset(10)
        got = list(batches(ds, BatchPlan(4)))
        assert [len(lbl) for _, lbl in got] == [4, 4, 2]
        npt.assert_array_equal(np.concatenate([lbl for _, lbl in got]), ds.labels)

    def test_same_seed_same_order(self):
        ds = tiny_dataset(17)
        order1 = [lbl for _, lbl in batches(ds, BatchPlan(5, True, RngState(3)))]
        order2 = [lbl for _, lbl in batches(ds, BatchPlan(5, True, RngState(3)))]
        for a, b in zip(order1, order2):
            npt.assert_array_equal(a, b)

    def test_shuffle_is_a_permutation(self):
        ds = tiny_dataset(23)
        emitted = np.concatenate(
            [lbl for _, lbl in batches(ds, BatchPlan(4, True, RngState(4)))]
        )
        assert sorted(emitted) == sorted(ds.labels)

    def test_empty_dataset_rejected(self):
        ds = Dataset(np.zeros((0, 1, 2, 2)), np.zeros(0, np.int64), 1)
        with pytest.raises(ConfigError):
            next(batches(ds, BatchPlan(4)))

    def test_bad_batch_size(self):
        with pytest.raises(ConfigError):
            BatchPlan(0)


class TestSplit:
    def test_sizes_and_disjoint(self):
        ds = tiny_dataset(100, 4)
        train, holdout = split(ds, 0.1, RngState(5))
        assert train.count == 90 and holdout.count == 10

    def test_label_multiset_preserved(self):
        ds = tiny_dataset(50, 5)
        train, holdout = split(ds, 0.3, RngState(6))
        combined = sorted(np.concatenate([train.labels, holdout.labels]))
        assert combined == sorted(ds.labels)

    def test_same_seed_same_split(self):
        ds = tiny_dataset(40)
        a = split(ds, 0.25, RngState(7))
        b = split(ds, 0.25, RngState(7))
        assert a[1].images.tobytes() == b[1].images.tobytes()

    def test_degenerate_fraction(self):
        ds = tiny_dataset(10)
        for bad in (0.0, 1.0, -0.5, 1.5):
            with pytest.raises(ConfigError):
                split(ds, bad, RngState(8))
