import gzip
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from slod import data as D
from slod.errors import FormatError, UsageError


def write(tmp_path, name, payload):
    path = tmp_path / name
    path.write_bytes(payload)
    return path


# -- IDX -------------------------------------------------------------------


def test_idx_images_hand_bytes(tmp_path):
    buf = bytes([0, 0, 8, 3]) + struct.pack(">3I", 1, 2, 2) + bytes([0, 128, 255, 64])
    img = D.load_idx_images(write(tmp_path, "img", buf))
    assert img.shape == (1, 2, 2) and img.dtype == np.uint8
    np.testing.assert_array_equal(img[0], [[0, 128], [255, 64]])


def test_idx_labels_hand_bytes(tmp_path):
    buf = bytes([0, 0, 8, 1]) + struct.pack(">I", 3) + bytes([7, 0, 9])
    np.testing.assert_array_equal(D.load_idx_labels(write(tmp_path, "lab", buf)), [7, 0, 9])


def test_idx_gzip(tmp_path):
    buf = bytes([0, 0, 8, 1]) + struct.pack(">I", 2) + bytes([4, 2])
    path = tmp_path / "lab.gz"
    path.write_bytes(gzip.compress(buf))
    np.testing.assert_array_equal(D.load_idx_labels(path), [4, 2])


def test_idx_wrong_magic_names_bytes(tmp_path):
    buf = bytes([0, 0, 8, 2]) + struct.pack(">2I", 1, 1) + bytes([5])
    with pytest.raises(FormatError, match="00 00 08 02"):
        D.load_idx_images(write(tmp_path, "img", buf))


def test_idx_wrong_type_byte():
    with pytest.raises(FormatError, match="00 00 0d 01"):
        D.parse_idx(bytes([0, 0, 0x0D, 1, 0, 0, 0, 0]))


@pytest.mark.parametrize("cut", [2, 9, 15, 19])
def test_idx_truncated(cut):
    buf = bytes([0, 0, 8, 3]) + struct.pack(">3I", 1, 2, 2) + bytes([0, 128, 255, 64])
    with pytest.raises(FormatError, match="truncated"):
        D.parse_idx(buf[:cut], expected_dims=3)


def test_idx_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError, match="nope"):
        D.load_idx_images(tmp_path / "nope")


@settings(max_examples=100, deadline=None)
@given(hnp.arrays(np.uint8, hnp.array_shapes(min_dims=1, max_dims=4, max_side=5)))
def test_idx_round_trip(arr):
    np.testing.assert_array_equal(D.parse_idx(D.encode_idx(arr), expected_dims=arr.ndim), arr)


# -- CIFAR-10 --------------------------------------------------------------


def cifar_record(label, r=0, g=0, b=0):
    return bytes([label]) + bytes([r]) * 1024 + bytes([g]) * 1024 + bytes([b]) * 1024


def test_cifar_hand_record(tmp_path):
    images, labels = D.load_cifar10_batch(write(tmp_path, "batch.bin", cifar_record(3, r=255)))
    assert images.shape == (1, 3, 32, 32)
    assert labels.tolist() == [3]
    assert np.all(images[0, 0] == 255)
    assert np.all(images[0, 1] == 0) and np.all(images[0, 2] == 0)


def test_cifar_plane_order():
    rec = bytearray(cifar_record(1))
    rec[1 + 1024 + 32 * 5 + 7] = 99
    images, _ = D.parse_cifar10(bytes(rec))
    assert images[0, 1, 5, 7] == 99
    assert images.sum() == 99


def test_cifar_empty_and_two_records():
    images, labels = D.parse_cifar10(b"")
    assert images.shape == (0, 3, 32, 32) and labels.shape == (0,)
    images, labels = D.parse_cifar10(cifar_record(0) + cifar_record(9, b=7))
    assert len(images) == 2 and labels.tolist() == [0, 9]


def test_cifar_bad_length():
    with pytest.raises(FormatError, match="3073"):
        D.parse_cifar10(cifar_record(0)[:-1])


def test_cifar_label_out_of_range():
    with pytest.raises(ValueError, match="label byte 10"):
        D.parse_cifar10(cifar_record(2) + cifar_record(10))


# -- synthetic OOD -----------------------------------------------------------


def test_synth_deterministic():
    a = D.synth_ood("gaussian", 8, (1, 28, 28), seed=3)
    b = D.synth_ood("gaussian", 8, (1, 28, 28), seed=3)
    c = D.synth_ood("gaussian", 8, (1, 28, 28), seed=4)
    assert a.images.tobytes() == b.images.tobytes()
    assert a.images.tobytes() != c.images.tobytes()


def test_synth_uniform_mean():
    ds = D.synth_ood("uniform", 200, (1, 28, 28), seed=0)
    assert ds.images.size >= 10**5
    assert abs(ds.images.mean() - 0.5) < 0.02
    assert ds.images.min() >= 0 and ds.images.max() <= 1


def test_synth_gaussian_clipped():
    ds = D.synth_ood("gaussian", 200, (3, 8, 8), seed=1)
    assert ds.images.min() >= 0.0 and ds.images.max() <= 1.0
    assert abs(ds.images.mean() - 0.5) < 0.02


def test_synth_uses_given_normalization():
    norm = D.Normalization((0.25,), (0.5,))
    plain = D.synth_ood("uniform", 4, (1, 4, 4), seed=2)
    normed = D.synth_ood("uniform", 4, (1, 4, 4), seed=2, norm=norm)
    np.testing.assert_allclose(normed.images, (plain.images - 0.25) / 0.5, atol=1e-6)


def test_synth_rejects_bad_args():
    with pytest.raises(UsageError):
        D.synth_ood("uniform", 0, (1, 2, 2), seed=0)
    with pytest.raises(UsageError):
        D.synth_ood("pink", 1, (1, 2, 2), seed=0)


# -- batching --------------------------------------------------------------


def test_batches_identity_without_shuffle():
    batches = D.make_batches(7, D.BatchPlan(batch_size=3, shuffle=False))
    np.testing.assert_array_equal(np.concatenate(batches), np.arange(7))


def test_batch_sizes_keep_partial():
    assert [len(b) for b in D.make_batches(10, D.BatchPlan(batch_size=3))] == [3, 3, 3, 1]


def test_batches_deterministic_per_seed_and_epoch():
    a = np.concatenate(D.make_batches(50, D.BatchPlan(8, seed=5, epoch=2)))
    b = np.concatenate(D.make_batches(50, D.BatchPlan(8, seed=5, epoch=2)))
    c = np.concatenate(D.make_batches(50, D.BatchPlan(8, seed=5, epoch=3)))
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c)
    np.testing.assert_array_equal(np.sort(a), np.arange(50))


def test_batches_reject_zero_batch():
    with pytest.raises(UsageError):
        D.make_batches(5, D.BatchPlan(batch_size=0))


# -- normalization and roles --------------------------------------------------


def test_normalization_fit_and_formula(rng):
    raw = rng.integers(0, 256, size=(20, 1, 6, 6), dtype=np.uint8)
    norm = D.Normalization.fit(raw)
    unit = raw / 255.0
    assert norm.mean[0] == pytest.approx(unit.mean())
    assert norm.std[0] == pytest.approx(unit.std())
    np.testing.assert_allclose(D.normalize(raw, norm), (unit - norm.mean[0]) / norm.std[0], atol=1e-5)


def test_normalization_per_channel(rng):
    raw = rng.integers(0, 256, size=(10, 3, 4, 4), dtype=np.uint8)
    raw[:, 2] = 0
    norm = D.Normalization.fit(raw)
    assert len(norm.mean) == 3 and norm.std[2] == 1.0


@settings(max_examples=100, deadline=None)
@given(hnp.arrays(np.uint8, (3, 2, 4, 4)), st.floats(0.0, 1.0), st.floats(0.05, 1.0))
def test_normalization_invertible(raw, mean, std):
    norm = D.Normalization((mean, mean / 2), (std, std * 2))
    back = D.denormalize(D.normalize(raw, norm), norm)
    np.testing.assert_allclose(back / 255.0, raw / 255.0, atol=1e-6)


def test_ood_labels_hidden():
    raw = np.zeros((3, 1, 4, 4), dtype=np.uint8)
    ds = D.make_dataset(raw, [1, 2, 3], D.OUT_OF_DISTRIBUTION, "x", D.Normalization.identity(1))
    with pytest.raises(UsageError, match="OOD"):
        ds.labels
    assert ds.diagnostic_labels().tolist() == [1, 2, 3]
    ind = D.make_dataset(raw, [1, 2, 3], D.IN_DISTRIBUTION, "y", D.Normalization.identity(1))
    assert ind.labels.tolist() == [1, 2, 3]


def test_dataset_label_length_checked():
    with pytest.raises(UsageError):
        D.make_dataset(np.zeros((3, 4, 4), dtype=np.uint8), [0, 1], D.IN_DISTRIBUTION, "z", D.Normalization.identity(1))


def test_take_batch_counts_draws():
    ds = D.synth_ood("uniform", 10, (1, 2, 2), seed=0)
    before = D.BATCH_DRAWS[D.OUT_OF_DISTRIBUTION]
    D.take_batch(ds, np.arange(3))
    assert D.BATCH_DRAWS[D.OUT_OF_DISTRIBUTION] == before + 1


# -- named sources -----------------------------------------------------------


def write_idx_set(root, name, n, seed):
    rng = np.random.default_rng(seed)
    folder = root / name
    folder.mkdir(parents=True)
    for split, (img_name, lab_name) in D.IDX_FILES.items():
        (folder / img_name).write_bytes(D.encode_idx(rng.integers(0, 256, size=(n, 28, 28), dtype=np.uint8)))
        (folder / lab_name).write_bytes(D.encode_idx(rng.integers(0, 10, size=n, dtype=np.uint8)))


def test_build_data_from_idx_files(tmp_path):
    write_idx_set(tmp_path, "mnist", 30, 0)
    write_idx_set(tmp_path, "fashion_mnist", 30, 1)
    cfg = {"data_root": str(tmp_path), "id_dataset": "mnist", "ood_test": ["fashion_mnist", "uniform"],
           "oe_outliers": ["fashion_mnist"], "test_limit": 20, "seed": 0}
    bundle = D.build_data(cfg)
    assert bundle.id_train.images.shape == (30, 1, 28, 28)
    assert len(bundle.id_test) == 20
    assert set(bundle.ood_tests) == {"fashion_mnist", "uniform"}
    assert all(ds.role == D.OUT_OF_DISTRIBUTION for ds in bundle.ood_tests.values())
    assert bundle.oe_train.role == D.OUT_OF_DISTRIBUTION
    assert bundle.ood_tests["fashion_mnist"].normalization == bundle.id_train.normalization
    assert abs(bundle.id_train.images.mean()) < 1e-5


def test_missing_dataset_names_path(tmp_path):
    with pytest.raises(FileNotFoundError, match="mnist"):
        D.load_raw("mnist", "train", str(tmp_path))


def test_unknown_dataset():
    with pytest.raises(UsageError):
        D.load_raw("svhn", "train", None)


def test_digits_stand_in_shapes():
    raw, labels = D.load_raw("digits", "train")
    assert raw.shape[1:] == (1, 28, 28) and raw.dtype == np.uint8
    assert set(np.unique(labels)) == set(range(10))
    test_raw, _ = D.load_raw("digits", "test")
    assert len(test_raw) == 500
