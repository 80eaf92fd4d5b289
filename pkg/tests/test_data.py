import gzip
import struct

import numpy as np
import pytest

from noisebound.data import (
    Dataset,
    IdxParseError,
    load_mnist,
    subset,
    synthetic_blobs,
    write_idx_images,
    write_idx_labels,
)
from noisebound.linalg import RngStream
from noisebound.network import LabeledExample


def tiny_idx_pair(tmp_path, n=4, rows=5, cols=3, seed=0):
    rng = np.random.default_rng(seed)
    imgs = rng.integers(0, 256, size=(n, rows, cols), dtype=np.uint8)
    labels = rng.integers(0, 10, size=n, dtype=np.uint8)
    ip, lp = tmp_path / "imgs.idx", tmp_path / "labels.idx"
    write_idx_images(ip, imgs)
    write_idx_labels(lp, labels)
    return ip, lp, imgs, labels


# ---------------------------------------------------------------- idx parsing

def test_idx_round_trip_bit_exact(tmp_path):
    ip, lp, imgs, labels = tiny_idx_pair(tmp_path)
    ds = load_mnist(ip, lp)
    assert len(ds) == 4 and ds.input_dim == 15 and ds.num_classes == 10
    flat = imgs.reshape(4, -1).astype(np.float64) / 255.0
    for i, ex in enumerate(ds):
        assert np.array_equal(ex.x, flat[i])
        assert ex.y == labels[i]


def test_idx_round_trip_through_rewrite(tmp_path):
    ip, lp, imgs, labels = tiny_idx_pair(tmp_path, seed=1)
    ds = load_mnist(ip, lp)
    back = np.round(np.stack([ex.x for ex in ds]) * 255.0).astype(np.uint8).reshape(imgs.shape)
    ip2, lp2 = tmp_path / "imgs2.idx", tmp_path / "labels2.idx"
    write_idx_images(ip2, back)
    write_idx_labels(lp2, [ex.y for ex in ds])
    assert ip2.read_bytes() == ip.read_bytes()
    assert lp2.read_bytes() == lp.read_bytes()


def test_idx_accepts_gzip(tmp_path):
    ip, lp, imgs, labels = tiny_idx_pair(tmp_path, seed=2)
    gz_ip, gz_lp = tmp_path / "imgs.gz", tmp_path / "labels.gz"
    gz_ip.write_bytes(gzip.compress(ip.read_bytes()))
    gz_lp.write_bytes(gzip.compress(lp.read_bytes()))
    plain, zipped = load_mnist(ip, lp), load_mnist(gz_ip, gz_lp)
    for a, b in zip(plain, zipped):
        assert np.array_equal(a.x, b.x) and a.y == b.y


def test_idx_pixel_255_maps_to_one(tmp_path):
    imgs = np.full((1, 2, 2), 255, dtype=np.uint8)
    ip, lp = tmp_path / "i.idx", tmp_path / "l.idx"
    write_idx_images(ip, imgs)
    write_idx_labels(lp, [7])
    ds = load_mnist(ip, lp)
    assert ds.examples[0].x.tolist() == [1.0, 1.0, 1.0, 1.0]


def test_idx_magic_is_2051(tmp_path):
    ip, lp, *_ = tiny_idx_pair(tmp_path)
    assert ip.read_bytes()[:4] == b"\x00\x00\x08\x03"  # 2051 big-endian
    assert lp.read_bytes()[:4] == b"\x00\x00\x08\x01"  # 2049


def test_idx_rejects_wrong_magic(tmp_path):
    ip, lp, *_ = tiny_idx_pair(tmp_path)
    corrupted = b"\x00\x00\x08\x04" + ip.read_bytes()[4:]
    bad = tmp_path / "bad.idx"
    bad.write_bytes(corrupted)
    with pytest.raises(IdxParseError, match="byte 0: bad magic 2052"):
        load_mnist(bad, lp)


def test_idx_rejects_truncation(tmp_path):
    ip, lp, *_ = tiny_idx_pair(tmp_path)
    clipped = tmp_path / "clip.idx"
    clipped.write_bytes(ip.read_bytes()[:-7])
    with pytest.raises(IdxParseError, match="promises"):
        load_mnist(clipped, lp)


def test_idx_rejects_count_mismatch(tmp_path):
    ip, _, _, labels = tiny_idx_pair(tmp_path)
    short = tmp_path / "short.idx"
    write_idx_labels(short, labels[:-1])
    with pytest.raises(IdxParseError, match="label count 3 != image count 4"):
        load_mnist(ip, short)


def test_idx_rejects_out_of_range_label(tmp_path):
    ip, _, _, _ = tiny_idx_pair(tmp_path)
    lp = tmp_path / "l11.idx"
    with open(lp, "wb") as fh:
        fh.write(struct.pack(">ii", 2049, 4))
        fh.write(bytes([1, 2, 11, 3]))
    with pytest.raises(IdxParseError, match="outside 0..9"):
        load_mnist(ip, lp)


def test_idx_error_carries_path_and_offset(tmp_path):
    empty = tmp_path / "empty.idx"
    empty.write_bytes(b"")
    with pytest.raises(IdxParseError) as ei:
        load_mnist(empty, empty)
    assert ei.value.path.endswith("empty.idx")
    assert ei.value.offset == 0


# ---------------------------------------------------------------- subset

def example_dataset(n=10):
    rng = RngStream(1, 1)
    exs = tuple(LabeledExample(rng.uniforms(3), i % 3) for i in range(n))
    return Dataset(exs, num_classes=3, input_dim=3, source="test")


def test_subset_full_size_is_permutation():
    ds = example_dataset(6)
    sub = subset(ds, 6, RngStream(2, 2))
    orig = sorted(tuple(ex.x.tolist()) for ex in ds)
    got = sorted(tuple(ex.x.tolist()) for ex in sub)
    assert got == orig


def test_subset_deterministic():
    ds = example_dataset(10)
    a = subset(ds, 4, RngStream(3, 3))
    b = subset(ds, 4, RngStream(3, 3))
    for ea, eb in zip(a, b):
        assert np.array_equal(ea.x, eb.x) and ea.y == eb.y


def test_subset_rejects_oversized():
    with pytest.raises(ValueError, match="subset of 11"):
        subset(example_dataset(10), 11, RngStream(0, 0))


def test_subset_selection_frequencies_uniform():
    ds = example_dataset(10)
    counts = np.zeros(10)
    trials = 400
    for s in range(trials):
        sub = subset(ds, 5, RngStream(100 + s, 0))
        for ex in sub:
            # identify original index by payload (examples are distinct)
            for i, orig in enumerate(ds):
                if orig.x is ex.x:
                    counts[i] += 1
                    break
    expected = trials * 0.5
    # 5-sigma band for Binomial(400, 0.5)
    assert np.all(np.abs(counts - expected) <= 5 * np.sqrt(trials * 0.25))


# ---------------------------------------------------------------- blobs

def test_blobs_zero_separation_centers_collapse():
    ds = synthetic_blobs(40, 3, 2, separation=0.0, rng=RngStream(5, 5))
    xs = np.stack([ex.x for ex in ds])
    ys = np.array([ex.y for ex in ds])
    mean_gap = np.linalg.norm(xs[ys == 0].mean(axis=0) - xs[ys == 1].mean(axis=0))
    assert mean_gap < 1.0  # overlapping clouds


def test_blobs_separated_nearest_center_accuracy():
    ds = synthetic_blobs(400, 2, 2, separation=10.0, rng=RngStream(6, 6))
    xs = np.stack([ex.x for ex in ds])
    ys = np.array([ex.y for ex in ds])
    centers = np.stack([xs[ys == k].mean(axis=0) for k in range(2)])
    pred = np.argmin(
        ((xs[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2), axis=1
    )
    assert (pred == ys).mean() >= 0.99


def test_blobs_features_in_unit_box():
    ds = synthetic_blobs(50, 4, 3, separation=4.0, rng=RngStream(7, 7))
    xs = np.stack([ex.x for ex in ds])
    assert xs.min() >= 0.0 and xs.max() <= 1.0


def test_blobs_reproducible():
    a = synthetic_blobs(20, 3, 2, 5.0, RngStream(8, 8))
    b = synthetic_blobs(20, 3, 2, 5.0, RngStream(8, 8))
    for ea, eb in zip(a, b):
        assert np.array_equal(ea.x, eb.x) and ea.y == eb.y


def test_blobs_rejects_single_class():
    with pytest.raises(ValueError, match="2 classes"):
        synthetic_blobs(10, 2, 1, 1.0, RngStream(0, 0))


# ---------------------------------------------------------------- dataset type

def test_dataset_validates_labels():
    with pytest.raises(ValueError, match="label 3"):
        Dataset((LabeledExample(np.zeros(2), 3),), num_classes=3, input_dim=2, source="t")


def test_dataset_validates_dims():
    with pytest.raises(ValueError, match="dim"):
        Dataset((LabeledExample(np.zeros(3), 0),), num_classes=2, input_dim=2, source="t")
