import hashlib

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from mixmask.datastore import (CIFAR10_MEAN, CIFAR10_STD, CIFAR100_MEAN, CIFAR100_STD, DatasetError, SyntheticSpec,
                               denormalize, gen_synthetic, load_dataset, normalize, read_cifar, read_cifar_raw,
                               read_png, write_cifar, write_png)


def _pixels(n, seed=0):
    return np.random.default_rng(seed).integers(0, 256, size=(n, 3, 32, 32), dtype=np.uint8)


def test_cifar100_two_records(tmp_path):
    path = tmp_path / "train.bin"
    write_cifar(path, _pixels(2), [7, 99], "fine", coarse_labels=[1, 19])
    assert path.stat().st_size == 6148  # two 3074-byte records
    batch = read_cifar(path, "fine")
    assert len(batch) == 2 and batch.labels.tolist() == [7, 99]
    assert read_cifar(path, "coarse").labels.tolist() == [1, 19]


def test_cifar10_two_records(tmp_path):
    path = tmp_path / "train.bin"
    write_cifar(path, _pixels(2), [3, 4])
    assert path.stat().st_size == 6146  # two 3073-byte records
    assert len(read_cifar(path)) == 2
    with pytest.raises(DatasetError):
        read_cifar(path, "fine")


def test_all_zero_record(tmp_path):
    path = tmp_path / "z.bin"
    path.write_bytes(bytes(3073))
    batch = read_cifar(path, "cifar10")
    assert batch.labels.tolist() == [0]
    expected = torch.tensor([-m / s for m, s in zip(CIFAR10_MEAN, CIFAR10_STD)]).view(3, 1, 1)
    torch.testing.assert_close(batch.data[0], expected.expand(3, 32, 32))


def test_cifar_roundtrip_bytes(tmp_path):
    px, labels = _pixels(5, 1), np.array([0, 3, 9, 1, 1])
    path = tmp_path / "r.bin"
    write_cifar(path, px, labels)
    raw = path.read_bytes()
    got_px, got_labels = read_cifar_raw(path)
    assert np.array_equal(got_px, px) and np.array_equal(got_labels, labels)
    write_cifar(tmp_path / "r2.bin", got_px, got_labels)
    assert (tmp_path / "r2.bin").read_bytes() == raw


@pytest.mark.parametrize("cut", [1, 100, 3072])
def test_truncated_file_rejected(tmp_path, cut):
    path = tmp_path / "t.bin"
    write_cifar(path, _pixels(2), [1, 2])
    path.write_bytes(path.read_bytes()[:-cut])
    with pytest.raises(DatasetError, match="multiple"):
        read_cifar(path)


def test_empty_file_and_bad_label(tmp_path):
    empty = tmp_path / "e.bin"
    empty.write_bytes(b"")
    with pytest.raises(DatasetError):
        read_cifar(empty)
    bad = tmp_path / "b.bin"
    bad.write_bytes(bytes([10]) + bytes(3072))
    with pytest.raises(DatasetError, match="label"):
        read_cifar(bad, "cifar10")


def test_cifar_directory_reads_all_batches(tmp_path):
    write_cifar(tmp_path / "data_batch_1.bin", _pixels(3), [0, 1, 2])
    write_cifar(tmp_path / "data_batch_2.bin", _pixels(2, 5), [3, 4])
    assert read_cifar(tmp_path).labels.tolist() == [0, 1, 2, 3, 4]
    assert len(load_dataset(f"cifar10:{tmp_path}")) == 5


def test_cifar100_constants_used(tmp_path):
    path = tmp_path / "c.bin"
    write_cifar(path, _pixels(1), [0], "fine")
    b = read_cifar(path, "fine")
    assert b.mean == CIFAR100_MEAN and b.std == CIFAR100_STD


def test_synthetic_size_and_determinism():
    spec = SyntheticSpec("striped-classes", classes=2, per_class=10, seed=3)
    a, b = gen_synthetic(spec), gen_synthetic(spec)
    assert len(a) == 20 and torch.equal(a.data, b.data) and torch.equal(a.labels, b.labels)
    assert not torch.equal(a.data, gen_synthetic(SyntheticSpec(seed=4)).data)


def test_striped_fft_peak():
    data = gen_synthetic(SyntheticSpec("striped-classes", classes=6, per_class=3, seed=0, noise=0.0))
    px = denormalize(data.data, data.mean, data.std).numpy()
    nfft = 1024
    for img, label in zip(px, data.labels.tolist()):
        row = img.mean(axis=(0, 1))
        spectrum = np.abs(np.fft.rfft(row - row.mean(), n=nfft))
        peak = int(spectrum[1:].argmax()) + 1
        # stripe period p shows up at frequency nfft / p (within one bin of leakage)
        assert abs(peak - nfft / (label + 2)) <= 1.5, (label, peak)


def test_gaussian_clusters_are_separable():
    data = gen_synthetic(SyntheticSpec("gaussian-clusters", classes=3, per_class=20, seed=1))
    flat = data.data.flatten(1)
    cents = torch.stack([flat[data.labels == c].mean(0) for c in range(3)])
    pred = torch.cdist(flat, cents).argmin(1)
    assert torch.equal(pred, data.labels)


def test_load_dataset_specs():
    b = load_dataset("synthetic:gaussian-clusters,classes=3,per_class=4,size=64,seed=2")
    assert b.data.shape == (12, 3, 64, 64)
    with pytest.raises(DatasetError):
        load_dataset("synthetic:striped-classes,colour=red")
    with pytest.raises(DatasetError):
        load_dataset("imagenet:/nowhere")
    with pytest.raises(DatasetError):
        load_dataset("cifar10:/does/not/exist")


def test_all_ones_mask_png_is_white(tmp_path):
    path = tmp_path / "m.png"
    write_png(np.ones((8, 8)), path)
    img = Image.open(path)
    assert img.mode == "L" and (np.asarray(img) == 255).all()


def test_png_roundtrip_within_quantization(tmp_path):
    mean, std = CIFAR10_MEAN, CIFAR10_STD
    px = torch.from_numpy(np.random.default_rng(0).uniform(0, 1, (1, 3, 16, 16)).astype(np.float32))
    x = normalize(px, mean, std)[0]
    path = tmp_path / "i.png"
    write_png(x, path, mean, std)
    back = denormalize(read_png(path, mean, std)[None], mean, std)[0]
    assert (back - px[0]).abs().max() <= 1 / 255


def test_png_bytes_deterministic(tmp_path):
    x = torch.from_numpy(np.random.default_rng(1).standard_normal((3, 8, 8)).astype(np.float32))
    write_png(x, tmp_path / "a.png", (0.5,) * 3, (0.25,) * 3)
    write_png(x, tmp_path / "b.png", (0.5,) * 3, (0.25,) * 3)
    digest = [hashlib.sha256((tmp_path / f).read_bytes()).hexdigest() for f in ("a.png", "b.png")]
    assert digest[0] == digest[1]


def test_png_rejects_bad_rank(tmp_path):
    with pytest.raises(ValueError):
        write_png(np.zeros(4), tmp_path / "x.png")


@given(st.lists(st.floats(0.1, 0.9), min_size=3, max_size=3), st.lists(st.floats(0.05, 2.0), min_size=3, max_size=3))
@settings(max_examples=50, deadline=None)
def test_normalize_invertible(mean, std):
    px = torch.rand(2, 3, 4, 4, dtype=torch.float64)
    torch.testing.assert_close(denormalize(normalize(px, mean, std), mean, std), px)


def test_synthetic_test_split_shares_classes():
    train = gen_synthetic(SyntheticSpec("gaussian-clusters", classes=4, per_class=20, seed=2))
    test = gen_synthetic(SyntheticSpec("gaussian-clusters", classes=4, per_class=20, seed=2, split="test"))
    assert not torch.equal(train.data, test.data)
    ft, fq = train.data.flatten(1), test.data.flatten(1)
    cents = torch.stack([ft[train.labels == c].mean(0) for c in range(4)])
    assert torch.equal(torch.cdist(fq, cents).argmin(1), test.labels)
