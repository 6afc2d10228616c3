import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from neglearn.datasets import (
    DatasetError,
    IdxCountMismatchError,
    IdxMagicError,
    IdxTruncationError,
    Label,
    LabeledSample,
    batch_iterator,
    load_mnist_idx,
    make_leave_one_digit_out_split,
    make_synthetic_patch_dataset,
    preprocess,
    preprocess_partition,
    read_split_manifest,
    write_idx_images,
    write_idx_labels,
    write_split_manifest,
)

from conftest import make_digit_samples


# ---------------------------------------------------------------------------
# IDX container
# ---------------------------------------------------------------------------


def write_idx_pair(tmp_path, images, labels):
    images_path = tmp_path / "images-idx3-ubyte"
    labels_path = tmp_path / "labels-idx1-ubyte"
    write_idx_images(images_path, images)
    write_idx_labels(labels_path, labels)
    return images_path, labels_path


def test_idx_round_trip_counts_match_header(tmp_path):
    rng = np.random.default_rng(0)
    images = rng.integers(0, 256, size=(37, 28, 28), dtype=np.uint8)
    labels = rng.integers(0, 10, size=37, dtype=np.uint8)
    ip, lp = write_idx_pair(tmp_path, images, labels)
    samples = load_mnist_idx(ip, lp)
    assert len(samples) == 37
    assert all(s.image.shape == (1, 28, 28) for s in samples)
    assert all(0 <= s.class_tag <= 9 for s in samples)
    assert np.array_equal(samples[5].image[0], images[5])
    assert samples[5].class_tag == int(labels[5])
    assert [s.source_id for s in samples] == list(range(37))


def test_idx_magic_numbers_enforced(tmp_path):
    rng = np.random.default_rng(1)
    images = rng.integers(0, 256, size=(4, 8, 8), dtype=np.uint8)
    labels = rng.integers(0, 10, size=4, dtype=np.uint8)
    ip, lp = write_idx_pair(tmp_path, images, labels)

    # swapped files: label magic where image magic is expected
    with pytest.raises(IdxMagicError):
        load_mnist_idx(lp, ip)

    bad = tmp_path / "bad-magic"
    blob = bytearray(ip.read_bytes())
    blob[3] = 0x05  # magic 2053 instead of 2051
    bad.write_bytes(bytes(blob))
    with pytest.raises(IdxMagicError):
        load_mnist_idx(bad, lp)


def test_idx_truncated_payload_rejected(tmp_path):
    rng = np.random.default_rng(2)
    images = rng.integers(0, 256, size=(10, 8, 8), dtype=np.uint8)
    labels = rng.integers(0, 10, size=10, dtype=np.uint8)
    ip, lp = write_idx_pair(tmp_path, images, labels)
    truncated = tmp_path / "truncated"
    truncated.write_bytes(ip.read_bytes()[:-13])
    with pytest.raises(IdxTruncationError):
        load_mnist_idx(truncated, lp)


def test_idx_count_mismatch_rejected(tmp_path):
    rng = np.random.default_rng(3)
    images = rng.integers(0, 256, size=(10, 8, 8), dtype=np.uint8)
    labels = rng.integers(0, 10, size=9, dtype=np.uint8)
    ip, lp = write_idx_pair(tmp_path, images, labels)
    with pytest.raises(IdxCountMismatchError):
        load_mnist_idx(ip, lp)


# ---------------------------------------------------------------------------
# Leave-one-digit-out split
# ---------------------------------------------------------------------------


def test_split_excludes_anomaly_digit_from_train_normal(digit_samples):
    split = make_leave_one_digit_out_split(digit_samples, anomaly_digit=0, seed=1)
    assert all(s.class_tag != 0 for s in split.train_normal)
    assert all(s.class_tag == 0 for s in split.train_abnormal)
    split.validate()


def test_split_train_fraction_within_rounding(digit_samples):
    split = make_leave_one_digit_out_split(
        digit_samples, anomaly_digit=0, train_fraction=0.8, seed=1
    )
    # test side is the remaining 20%, up to one-sample rounding per digit
    assert abs(len(split.test) - 0.2 * len(digit_samples)) <= 10


def test_split_abnormal_ratio(digit_samples):
    split = make_leave_one_digit_out_split(
        digit_samples, anomaly_digit=3, abnormal_ratio=0.1, seed=2
    )
    expected = round(0.1 * len(split.train_normal))
    assert abs(len(split.train_abnormal) - expected) <= 1


def test_split_deterministic_and_seed_sensitive(digit_samples):
    def ids(split):
        return {k: [s.source_id for s in v] for k, v in split.partitions().items()}

    a = make_leave_one_digit_out_split(digit_samples, anomaly_digit=0, seed=9)
    b = make_leave_one_digit_out_split(digit_samples, anomaly_digit=0, seed=9)
    c = make_leave_one_digit_out_split(digit_samples, anomaly_digit=0, seed=10)
    assert ids(a) == ids(b)
    assert ids(a) != ids(c)


def test_split_partitions_disjoint_across_seeds(digit_samples):
    for seed in range(5):
        split = make_leave_one_digit_out_split(digit_samples, anomaly_digit=7, seed=seed)
        split.validate()  # raises on overlap or label impurity
        all_ids = [s.source_id for part in split.partitions().values() for s in part]
        assert len(all_ids) == len(set(all_ids))


def test_split_rejects_bad_inputs(digit_samples):
    with pytest.raises(DatasetError):
        make_leave_one_digit_out_split([], anomaly_digit=0)
    with pytest.raises(DatasetError):
        make_leave_one_digit_out_split(digit_samples, anomaly_digit=42)
    with pytest.raises(DatasetError):
        make_leave_one_digit_out_split(digit_samples, anomaly_digit=0, train_fraction=1.5)
    with pytest.raises(DatasetError):
        make_leave_one_digit_out_split(digit_samples, anomaly_digit=0, abnormal_ratio=-0.1)


# ---------------------------------------------------------------------------
# Synthetic patch generator
# ---------------------------------------------------------------------------


def test_synthetic_partition_sizes_and_ratio():
    split = make_synthetic_patch_dataset(1000, 100, seed=0)
    assert len(split.train_normal) == 700
    assert len(split.train_abnormal) == 70
    assert len(split.train_normal) == 10 * len(split.train_abnormal)
    assert len(split.validation) == 110
    assert len(split.test) == 220
    split.validate()


def test_synthetic_labels_by_construction(tiny_synthetic_split):
    assert all(s.label == Label.NORMAL for s in tiny_synthetic_split.train_normal)
    assert all(s.label == Label.ABNORMAL for s in tiny_synthetic_split.train_abnormal)
    assert all(s.class_tag == 0 for s in tiny_synthetic_split.train_normal)
    assert all(s.class_tag in (1, 2, 3) for s in tiny_synthetic_split.train_abnormal)


def test_synthetic_deterministic_bitwise():
    a = make_synthetic_patch_dataset(40, 10, seed=77)
    b = make_synthetic_patch_dataset(40, 10, seed=77)
    for pa, pb in zip(a.partitions().values(), b.partitions().values()):
        for sa, sb in zip(pa, pb):
            assert np.array_equal(sa.image, sb.image)
    c = make_synthetic_patch_dataset(40, 10, seed=78)
    assert not np.array_equal(a.train_normal[0].image, c.train_normal[0].image)


def test_synthetic_oversize_changes_rendering():
    a = make_synthetic_patch_dataset(40, 10, oversize=False, seed=5)
    b = make_synthetic_patch_dataset(40, 10, oversize=True, seed=5)
    assert a.train_normal[0].image.shape == b.train_normal[0].image.shape
    assert not np.array_equal(a.train_normal[0].image, b.train_normal[0].image)
    assert b.descriptor.source == "synthetic-oversize"


def test_synthetic_rejects_nonpositive_counts():
    with pytest.raises(DatasetError):
        make_synthetic_patch_dataset(0, 5)
    with pytest.raises(DatasetError):
        make_synthetic_patch_dataset(10, -1)


# ---------------------------------------------------------------------------
# Preprocessing
# ---------------------------------------------------------------------------


def test_preprocess_endpoint_mapping():
    zeros = np.zeros((1, 28, 28), dtype=np.uint8)
    full = np.full((1, 28, 28), 255, dtype=np.uint8)
    assert np.all(preprocess(zeros, 1, 32) == -1.0)
    assert np.all(preprocess(full, 1, 32) == 1.0)


def test_preprocess_grayscale_replication():
    rng = np.random.default_rng(0)
    img = rng.integers(0, 256, size=(1, 28, 28), dtype=np.uint8)
    out = preprocess(img, target_channels=3, target_size=64)
    assert out.shape == (3, 64, 64)
    assert np.array_equal(out[0], out[1])
    assert np.array_equal(out[0], out[2])


def test_preprocess_identity_when_size_matches():
    rng = np.random.default_rng(1)
    img = rng.integers(0, 256, size=(3, 64, 64), dtype=np.uint8)
    out = preprocess(img, target_channels=3, target_size=64)
    assert np.allclose(out, img.astype(np.float32) / 127.5 - 1.0)


def test_preprocess_range_and_monotonicity():
    rng = np.random.default_rng(2)
    img = rng.integers(0, 256, size=(3, 48, 48), dtype=np.uint8)
    out = preprocess(img, 3, 32)
    assert out.min() >= -1.0 and out.max() <= 1.0
    # raising a pixel's value never lowers the mapped value at that pixel
    img2 = img.copy()
    img2[:, 10, 10] = np.minimum(img2[:, 10, 10] + 40, 255)
    out2 = preprocess(img2, 3, 48)
    base = preprocess(img, 3, 48)
    assert np.all(out2[:, 10, 10] >= base[:, 10, 10])


def test_preprocess_validates_targets():
    img = np.zeros((1, 8, 8), dtype=np.uint8)
    with pytest.raises(DatasetError):
        preprocess(img, target_channels=2, target_size=32)
    with pytest.raises(DatasetError):
        preprocess(img, target_channels=1, target_size=4)


# ---------------------------------------------------------------------------
# Batch iteration
# ---------------------------------------------------------------------------


def test_batch_sizes_exact_partition():
    samples = make_digit_samples(1000)
    batches = list(batch_iterator(samples, 256, shuffle_seed=0, target_channels=1, target_size=8))
    assert [len(b) for b in batches] == [256, 256, 256, 232]


def test_batches_cover_every_sample_once():
    samples = make_digit_samples(143)
    batches = list(batch_iterator(samples, 32, shuffle_seed=3, target_channels=1, target_size=8))
    ids = np.concatenate([b.source_ids for b in batches])
    assert sorted(ids.tolist()) == [s.source_id for s in samples]


def test_batch_order_is_pure_function_of_seed_and_epoch():
    samples = make_digit_samples(64)

    def order(seed, epoch):
        return np.concatenate(
            [
                b.source_ids
                for b in batch_iterator(
                    samples, 16, shuffle_seed=seed, epoch=epoch, target_channels=1, target_size=8
                )
            ]
        ).tolist()

    assert order(1, 0) == order(1, 0)
    assert order(1, 0) != order(2, 0)
    assert order(1, 0) != order(1, 1)


def test_batch_iterator_rejects_bad_inputs():
    samples = make_digit_samples(4)
    with pytest.raises(DatasetError):
        list(batch_iterator([], 4))
    with pytest.raises(DatasetError):
        list(batch_iterator(samples, 0))


def test_batch_values_within_range(tiny_synthetic_split):
    cache = preprocess_partition(tiny_synthetic_split.test, 3, 32)
    for batch in batch_iterator(cache, 8):
        assert np.isfinite(batch.data).all()
        assert batch.data.min() >= -1.0 and batch.data.max() <= 1.0
        assert len(batch.labels) == batch.data.shape[0] == len(batch.source_ids)


@settings(max_examples=25, deadline=None)
@given(n=st.integers(1, 40), batch_size=st.integers(1, 45), seed=st.integers(0, 5))
def test_batch_partition_property(n, batch_size, seed):
    samples = make_digit_samples(n)
    batches = list(
        batch_iterator(samples, batch_size, shuffle_seed=seed, target_channels=1, target_size=8)
    )
    ids = [i for b in batches for i in b.source_ids.tolist()]
    assert sorted(ids) == list(range(n))
    assert all(len(b) <= batch_size for b in batches)


# ---------------------------------------------------------------------------
# Split manifest
# ---------------------------------------------------------------------------


def test_manifest_round_trip(tmp_path, digit_samples):
    split = make_leave_one_digit_out_split(digit_samples, anomaly_digit=4, seed=6)
    path = tmp_path / "manifest.txt"
    write_split_manifest(split, path)
    rebuilt = read_split_manifest(path, digit_samples, split.descriptor, anomaly_class_tag=4)
    for name in split.partitions():
        orig = [(s.source_id, s.label) for s in split.partitions()[name]]
        back = [(s.source_id, s.label) for s in rebuilt.partitions()[name]]
        assert orig == back
    rebuilt.validate()


def test_manifest_rejects_unknown_partition(tmp_path, digit_samples):
    path = tmp_path / "manifest.txt"
    path.write_text("train_normal 0\nmystery 1\n")
    with pytest.raises(DatasetError):
        read_split_manifest(path, digit_samples, None)
