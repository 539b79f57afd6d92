import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from prunebench.data import Dataset, load_idx, split, synthetic_blobs, write_idx
from prunebench.errors import ContractError, FormatError


def _write_raw(tmp_path, pixels: bytes, n_img: int, labels: bytes, n_lab: int):
    img, lab = tmp_path / "img", tmp_path / "lab"
    img.write_bytes(struct.pack(">IIII", 0x803, n_img, 28, 28) + pixels)
    lab.write_bytes(struct.pack(">II", 0x801, n_lab) + labels)
    return img, lab


def test_hand_built_idx(tmp_path):
    pixels = bytes([0] * 784) + bytes([255] * 784)
    img, lab = _write_raw(tmp_path, pixels, 2, bytes([3, 7]), 2)
    ds = load_idx(img, lab)
    assert ds.images.shape == (2, 28, 28, 1)
    assert ds.labels.tolist() == [3, 7]
    assert np.all(ds.images[0] == 0.0) and np.all(ds.images[1] == 1.0)


def test_idx_errors(tmp_path):
    img, lab = _write_raw(tmp_path, bytes(2 * 784), 2, bytes([1]), 1)
    with pytest.raises(FormatError, match="labels"):
        load_idx(img, lab)
    img, lab = _write_raw(tmp_path, bytes(784 + 10), 2, bytes([1, 2]), 2)
    with pytest.raises(FormatError, match="payload"):
        load_idx(img, lab)
    bad = tmp_path / "bad"
    bad.write_bytes(struct.pack(">IIII", 0x801, 1, 28, 28) + bytes(784))
    with pytest.raises(FormatError, match="magic"):
        load_idx(bad, lab)


def test_write_then_load(tmp_path):
    rng = np.random.default_rng(0)
    pixels = rng.integers(0, 256, size=(5, 28, 28), dtype=np.uint8)
    labels = rng.integers(0, 10, size=5)
    write_idx(tmp_path / "i", tmp_path / "l", pixels, labels)
    ds = load_idx(tmp_path / "i", tmp_path / "l")
    assert np.array_equal(ds.images[..., 0], pixels / 255.0)
    assert np.array_equal(ds.labels, labels)
    again = load_idx(tmp_path / "i", tmp_path / "l")
    assert again.images.tobytes() == ds.images.tobytes()


def _toy(n=100):
    return Dataset(np.arange(n, dtype=float).reshape(n, 1) / n, np.arange(n) % 3)


def test_split_sizes_and_determinism():
    tr, va = split(_toy(), 0.1, seed=4)
    assert (len(tr), len(va)) == (90, 10)
    tr2, va2 = split(_toy(), 0.1, seed=4)
    assert np.array_equal(tr.images, tr2.images) and np.array_equal(va.images, va2.images)


@given(st.integers(2, 300), st.floats(0.01, 0.99), st.integers(0, 2**31))
def test_split_partitions(n, frac, seed):
    ds = Dataset(np.arange(n, dtype=float).reshape(n, 1), np.zeros(n, dtype=int))
    n_val = int(round(n * frac))
    if n_val in (0, n):
        with pytest.raises(ContractError):
            split(ds, frac, seed)
        return
    tr, va = split(ds, frac, seed)
    a, b = set(tr.images.ravel()), set(va.images.ravel())
    assert not a & b and a | b == set(range(n))


@pytest.mark.parametrize("frac", [0.0, 1.0, -0.2])
def test_split_degenerate(frac):
    with pytest.raises(ContractError):
        split(_toy(), frac)


def test_blobs_basic():
    ds = synthetic_blobs(2, 10, 5, seed=1)
    assert ds.images.shape == (10, 5) and len(ds.labels) == 10
    assert ds.images.min() >= 0 and ds.images.max() <= 1
    again = synthetic_blobs(2, 10, 5, seed=1)
    assert np.array_equal(ds.images, again.images)
    with pytest.raises(ContractError):
        synthetic_blobs(1, 10, 5)


def test_blobs_linear_probe_separates():
    ds = synthetic_blobs(3, 120, 6, seed=2)
    x = np.hstack([ds.images, np.ones((len(ds), 1))])
    onehot = np.eye(3)[ds.labels]
    W = np.zeros((7, 3))
    for _ in range(3000):
        z = x @ W
        p = np.exp(z - z.max(axis=1, keepdims=True))
        p /= p.sum(axis=1, keepdims=True)
        W -= 2.0 * x.T @ (p - onehot) / len(ds)
    assert np.mean((x @ W).argmax(axis=1) == ds.labels) == 1.0


@given(st.integers(2, 5), st.integers(1, 40), st.integers(0, 2**20))
def test_blobs_in_unit_box(classes, n, seed):
    ds = synthetic_blobs(classes, n, (4, 4, 1), seed=seed)
    assert ds.images.shape == (n, 4, 4, 1)
    assert ds.images.min() >= 0 and ds.images.max() <= 1
    assert ds.labels.max() < classes
