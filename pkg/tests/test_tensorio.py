import numpy as np
import pytest

from enerprune.errors import (
    BadMagicError,
    ConfigError,
    DimOverflowError,
    TruncatedPayloadError,
)
from enerprune.tensorio import (
    Dataset,
    load_dataset,
    read_tensor,
    save_dataset,
    write_tensor,
)


def test_round_trip_bit_exact(tmp_path):
    rng = np.random.default_rng(3)
    for shape in [(4,), (2, 3), (2, 3, 4, 5)]:
        t = rng.standard_normal(shape).astype(np.float32)
        path = tmp_path / "t.tnsr"
        write_tensor(path, t)
        back = read_tensor(path)
        assert back.shape == t.shape
        assert back.tobytes() == t.tobytes()


def test_empty_file_is_bad_magic(tmp_path):
    path = tmp_path / "empty.tnsr"
    path.write_bytes(b"")
    with pytest.raises(BadMagicError):
        read_tensor(path)


def test_wrong_magic(tmp_path):
    path = tmp_path / "bad.tnsr"
    path.write_bytes(b"NOPE" + bytes(32))
    with pytest.raises(BadMagicError):
        read_tensor(path)


def test_truncated_payload(tmp_path):
    path = tmp_path / "t.tnsr"
    write_tensor(path, np.ones((4, 4), dtype=np.float32))
    blob = path.read_bytes()
    path.write_bytes(blob[:-8])  # drop two floats
    with pytest.raises(TruncatedPayloadError):
        read_tensor(path)


def test_truncated_header(tmp_path):
    path = tmp_path / "t.tnsr"
    write_tensor(path, np.ones((4, 4), dtype=np.float32))
    path.write_bytes(path.read_bytes()[:8])
    with pytest.raises(TruncatedPayloadError):
        read_tensor(path)


def test_dim_overflow(tmp_path):
    import struct

    path = tmp_path / "huge.tnsr"
    header = b"TNSR" + struct.pack("<BB", 1, 2) + struct.pack("<2I", 2**20, 2**20)
    path.write_bytes(header + b"\x00" * 16)
    with pytest.raises(DimOverflowError):
        read_tensor(path)


def _toy_dataset(n=20):
    rng = np.random.default_rng(0)
    images = rng.standard_normal((n, 1, 4, 4)).astype(np.float32)
    labels = rng.integers(0, 4, size=n).astype(np.int64)
    n_train = int(0.8 * n)
    return Dataset(images, labels, np.arange(0, n_train), np.arange(n_train, n))


def test_dataset_round_trip(tmp_path):
    ds = _toy_dataset()
    save_dataset(tmp_path / "ds", ds)
    back = load_dataset(tmp_path / "ds")
    assert np.array_equal(back.images, ds.images)
    assert np.array_equal(back.labels, ds.labels)
    assert np.array_equal(back.train_idx, ds.train_idx)
    assert np.array_equal(back.val_idx, ds.val_idx)


def test_dataset_missing_file(tmp_path):
    with pytest.raises(ConfigError):
        load_dataset(tmp_path / "nowhere")


def test_dataset_rejects_fractional_labels(tmp_path):
    ds = _toy_dataset()
    save_dataset(tmp_path / "ds", ds)
    bad = read_tensor(tmp_path / "ds" / "labels.tnsr")
    bad[0] = 0.5
    write_tensor(tmp_path / "ds" / "labels.tnsr", bad)
    with pytest.raises(ConfigError):
        load_dataset(tmp_path / "ds")


def test_subset_classes_relabels():
    ds = _toy_dataset(40)
    sub = ds.subset_classes([1, 3])
    assert set(np.unique(sub.labels)) <= {0, 1}
    assert sub.images.shape[0] == int(np.isin(ds.labels, [1, 3]).sum())
    # kept images preserved under the relabelling
    orig_kept = ds.images[np.isin(ds.labels, [1, 3])]
    assert np.array_equal(sub.images, orig_kept)
    assert sub.train_idx.size + sub.val_idx.size == sub.images.shape[0]
