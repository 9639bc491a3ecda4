import numpy as np
import pytest

from crossvit.data import (
    CIFAR_RECORD,
    Dataset,
    DatasetError,
    from_spec,
    load_cifar10_binary,
    parse_cifar10_bytes,
    synth_dataset,
)


def _records(labels, rng):
    out = bytearray()
    pixels = []
    for lab in labels:
        px = rng.integers(0, 256, size=3072, dtype=np.uint8)
        px[0] = 255
        out += bytes([lab]) + px.tobytes()
        pixels.append(px)
    return bytes(out), pixels


@pytest.fixture
def cifar_dir(tmp_path, rng):
    train, train_px = _records([3, 7], rng)
    test, _ = _records([1], rng)
    (tmp_path / "data_batch_1.bin").write_bytes(train)
    (tmp_path / "test_batch.bin").write_bytes(test)
    return tmp_path, train_px


class TestCifar:
    def test_two_record_file(self, cifar_dir):
        path, px = cifar_dir
        ds = load_cifar10_binary(path)
        assert len(ds) == 2 and ds.labels.tolist() == [3, 7]
        # channel-planar R, G, B, each 32x32 row-major
        np.testing.assert_array_equal(ds.images[1] * 255.0, px[1].reshape(3, 32, 32).astype(np.float64))

    def test_max_byte_is_one(self, cifar_dir):
        ds = load_cifar10_binary(cifar_dir[0])
        assert ds.images[0, 0, 0, 0] == 1.0 and ds.images.max() <= 1.0

    def test_record_count(self, rng):
        buf, _ = _records([0, 1, 2, 9, 5], rng)
        images, labels = parse_cifar10_bytes(buf)
        assert len(labels) == len(buf) // CIFAR_RECORD == 5 and images.shape == (5, 3, 32, 32)

    def test_bad_length(self, rng):
        buf, _ = _records([1], rng)
        with pytest.raises(DatasetError, match="multiple"):
            parse_cifar10_bytes(buf + b"\x00")

    def test_bad_label(self, rng):
        buf, _ = _records([1, 10], rng)
        with pytest.raises(DatasetError, match="label"):
            parse_cifar10_bytes(buf)

    def test_split_limit_side(self, cifar_dir):
        path, _ = cifar_dir
        assert load_cifar10_binary(path, split="test").labels.tolist() == [1]
        assert len(load_cifar10_binary(path, limit=1)) == 1
        assert load_cifar10_binary(path, side=16).images.shape == (2, 3, 16, 16)

    def test_normalize(self, cifar_dir):
        raw = load_cifar10_binary(cifar_dir[0])
        norm = load_cifar10_binary(cifar_dir[0], normalize=True)
        np.testing.assert_allclose(norm.images[0, 0], (raw.images[0, 0] - 0.4914) / 0.2470, atol=1e-12)

    def test_missing_files(self, tmp_path):
        with pytest.raises(DatasetError):
            load_cifar10_binary(tmp_path)

    def test_spec(self, cifar_dir):
        ds = from_spec(f"cifar10:{cifar_dir[0]},split=train,limit=1", side=8)
        assert ds.images.shape == (1, 3, 8, 8)


class TestSynth:
    def test_deterministic(self):
        a, b = synth_dataset(32, 4, 16, seed=3), synth_dataset(32, 4, 16, seed=3)
        assert a.images.tobytes() == b.images.tobytes() and a.labels.tobytes() == b.labels.tobytes()
        assert synth_dataset(32, 4, 16, seed=4).images.tobytes() != a.images.tobytes()

    def test_balanced_labels(self):
        ds = synth_dataset(60, 6, 8)
        assert np.bincount(ds.labels, minlength=6).tolist() == [10] * 6

    def test_range(self):
        ds = synth_dataset(20, 5, 12)
        assert ds.images.shape == (20, 3, 12, 12) and ds.images.min() >= 0 and ds.images.max() <= 1

    def test_linear_probe(self):
        # fewer features than samples, so the probe cannot simply interpolate
        ds = synth_dataset(400, 10, 8, seed=1)
        x = np.concatenate([ds.images.reshape(len(ds), -1), np.ones((len(ds), 1))], axis=1)
        y = np.eye(10)[ds.labels]
        w, *_ = np.linalg.lstsq(x, y, rcond=None)
        assert np.mean(np.argmax(x @ w, axis=1) == ds.labels) > 0.8


class TestDataset:
    def test_npz_round_trip(self, tmp_path):
        ds = synth_dataset(8, 2, 6)
        ds.save(tmp_path / "d.npz")
        back = from_spec(f"npz:{tmp_path / 'd.npz'}")
        assert back.images.tobytes() == ds.images.tobytes() and back.num_classes == 2

    def test_label_out_of_range(self):
        with pytest.raises(DatasetError):
            Dataset(np.zeros((2, 3, 4, 4)), [0, 3], 3)

    def test_length_mismatch(self):
        with pytest.raises(DatasetError):
            Dataset(np.zeros((2, 3, 4, 4)), [0], 3)

    def test_resize_preserves_constants(self):
        ds = Dataset(np.full((1, 3, 8, 8), 0.25), [0], 1)
        np.testing.assert_allclose(ds.resized(20).images, 0.25, atol=1e-12)

    def test_unknown_spec(self):
        with pytest.raises(DatasetError):
            from_spec("imagenet:/data")

    def test_synth_spec(self):
        ds = from_spec("synth:n=12,classes=3,side=8,seed=2", side=16)
        assert ds.images.shape == (12, 3, 16, 16) and ds.num_classes == 3
