import gzip
import struct

import numpy as np
import pytest

from robustq.data import (
    IMAGE_MAGIC,
    LABEL_MAGIC,
    DatasetHandle,
    gen_synthetic,
    load_idx,
    load_mnist_dir,
    read_idx,
    synthetic_bounds,
)
from robustq.errors import ContractError, FormatError


def write_idx(path, magic, array, compress=False):
    payload = struct.pack(">I", magic) + struct.pack(f">{array.ndim}I", *array.shape) + array.astype(np.uint8).tobytes()
    opener = gzip.open if compress else open
    with opener(path, "wb") as handle:
        handle.write(payload)
    return path


@pytest.fixture
def idx_pair(tmp_path):
    images = np.arange(3 * 2 * 2, dtype=np.uint8).reshape(3, 2, 2) * 20
    labels = np.array([2, 0, 1], dtype=np.uint8)
    return (
        write_idx(tmp_path / "images", IMAGE_MAGIC, images),
        write_idx(tmp_path / "labels", LABEL_MAGIC, labels),
        images,
        labels,
    )


def test_read_idx_plain_and_gzipped(tmp_path):
    array = np.arange(6, dtype=np.uint8).reshape(2, 3)
    plain = write_idx(tmp_path / "a", 0x00000802, array)
    packed = write_idx(tmp_path / "a.gz", 0x00000802, array, compress=True)
    assert np.array_equal(read_idx(plain, 0x00000802), array)
    assert np.array_equal(read_idx(packed, 0x00000802), array)


def test_read_idx_rejects_wrong_magic(idx_pair):
    images_path, *_ = idx_pair
    with pytest.raises(FormatError, match="magic"):
        read_idx(images_path, LABEL_MAGIC)


def test_read_idx_rejects_truncated_data(tmp_path, idx_pair):
    images_path, *_ = idx_pair
    short = tmp_path / "short"
    short.write_bytes(images_path.read_bytes()[:-1])
    with pytest.raises(FormatError):
        read_idx(short, IMAGE_MAGIC)
    stub = tmp_path / "stub"
    stub.write_bytes(b"\x00\x00")
    with pytest.raises(FormatError, match="truncated"):
        read_idx(stub, IMAGE_MAGIC)


def test_load_idx_scales_pixels(idx_pair):
    images_path, labels_path, images, labels = idx_pair
    data = load_idx(images_path, labels_path, split="test")
    assert data.images.shape == (3, 1, 2, 2)
    assert np.allclose(data.images[:, 0], images / 255.0)
    assert data.labels.tolist() == labels.tolist()
    assert data.split == "test" and data.num_classes == 3


def test_load_idx_rejects_count_mismatch(tmp_path, idx_pair):
    images_path, *_ = idx_pair
    labels_path = write_idx(tmp_path / "two", LABEL_MAGIC, np.array([0, 1], dtype=np.uint8))
    with pytest.raises(FormatError):
        load_idx(images_path, labels_path)


def test_load_mnist_dir_finds_gzipped_files(tmp_path):
    images = np.zeros((2, 3, 3), dtype=np.uint8)
    write_idx(tmp_path / "t10k-images-idx3-ubyte.gz", IMAGE_MAGIC, images, compress=True)
    write_idx(tmp_path / "t10k-labels-idx1-ubyte", LABEL_MAGIC, np.array([4, 7], dtype=np.uint8))
    data = load_mnist_dir(tmp_path, "test")
    assert len(data) == 2 and data.input_shape == (1, 3, 3)
    with pytest.raises(FileNotFoundError):
        load_mnist_dir(tmp_path, "train")
    with pytest.raises(ContractError):
        load_mnist_dir(tmp_path, "validation")


@pytest.mark.parametrize("images, labels", [
    (np.zeros((2, 4)), np.zeros(2)),
    (np.zeros((2, 1, 2, 2)), np.zeros(3)),
    (np.full((1, 1, 2, 2), 1.5), np.zeros(1)),
])
def test_handle_validation(images, labels):
    with pytest.raises(FormatError):
        DatasetHandle("bad", "train", images, labels)


def test_handle_subset_and_histogram(image_data):
    assert image_data.subset(None) is image_data
    assert image_data.subset(10 ** 6) is image_data
    head = image_data.subset(8)
    assert len(head) == 8
    assert np.array_equal(head.labels, image_data.labels[:8])
    assert image_data.class_histogram().sum() == len(image_data)


def test_batches_follow_the_given_order():
    data = DatasetHandle("toy", "train", np.zeros((5, 1, 1, 1)), np.arange(5))
    assert [y.tolist() for _, y in data.batches(2)] == [[0, 1], [2, 3], [4]]
    order = np.array([4, 3, 2, 1, 0])
    assert [y.tolist() for _, y in data.batches(3, order)] == [[4, 3, 2], [1, 0]]
    with pytest.raises(ContractError):
        list(data.batches(0))


@pytest.mark.parametrize("kind", ["blobs", "moons"])
def test_synthetic_sets(kind):
    data = gen_synthetic(kind, 50, 0.1, seed=5)
    assert data.images.shape == (50, 1, 1, 2)
    assert data.images.min() >= 0.0 and data.images.max() <= 1.0
    assert set(data.labels.tolist()) == {0, 1}
    again = gen_synthetic(kind, 50, 0.1, seed=5)
    assert np.array_equal(data.images, again.images)
    other = gen_synthetic(kind, 50, 0.1, seed=6)
    assert not np.array_equal(data.images, other.images)


def test_noise_free_blobs_sit_on_the_corners():
    data = gen_synthetic("blobs", 4, 0.0, seed=0)
    assert data.images[:, 0, 0].tolist() == [[0.0, 0.0], [1.0, 1.0], [0.0, 0.0], [1.0, 1.0]]


def test_empty_synthetic_set():
    data = gen_synthetic("moons", 0, 0.1, seed=0)
    assert len(data) == 0 and data.num_classes == 0


@pytest.mark.parametrize("kind, n, noise", [("spirals", 4, 0.1), ("blobs", -1, 0.1), ("blobs", 4, -0.1)])
def test_synthetic_validation(kind, n, noise):
    with pytest.raises(ContractError):
        gen_synthetic(kind, n, noise, seed=0)


def test_save_npz(tmp_path, blobs):
    path = blobs.save_npz(tmp_path / "blobs.npz")
    with np.load(path) as archive:
        assert np.array_equal(archive["images"], blobs.images)
        assert np.array_equal(archive["labels"], blobs.labels)


def test_splits_share_one_coordinate_map():
    # the first draws of a small and a large set are the same raw points
    small = gen_synthetic("blobs", 8, 0.3, seed=1)
    large = gen_synthetic("blobs", 512, 0.3, seed=1, split="test")
    assert np.array_equal(small.images, large.images[:8])


@pytest.mark.parametrize("kind", ["blobs", "moons"])
def test_synthetic_map_depends_only_on_kind_and_noise(kind):
    lo, hi = synthetic_bounds(kind, 0.25)
    base_lo, base_hi = synthetic_bounds(kind, 0.0)
    assert np.allclose(base_lo - lo, 1.0) and np.allclose(hi - base_hi, 1.0)
    data = gen_synthetic(kind, 200, 0.0, seed=3)
    assert data.images.min() >= 0.0 and data.images.max() <= 1.0
