import os

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from reroute import ops
from reroute.data import (RECORD_BYTES, BatchStream, LabeledImages, augment, load_cifar10_binary,
                          load_cifar10_file, load_raw_labeled, make_toy_dataset, normalization_stats,
                          normalize, save_raw_labeled)
from reroute.errors import DataFormatError
from reroute.layers import Conv2d, Linear
from reroute.optim import SGD
from reroute.tensor import Tensor


def cifar_record(label, pixels=None, rng=None):
    rec = np.zeros(RECORD_BYTES, dtype=np.uint8)
    rec[0] = label
    if pixels is not None:
        rec[1:] = pixels
    elif rng is not None:
        rec[1:] = rng.integers(0, 256, RECORD_BYTES - 1, dtype=np.uint8)
    return rec


def write_cifar_dir(tmp_path, labels_per_file, rng):
    """Synthesize batch files in the exact CIFAR-10 binary layout."""
    for i, labels in enumerate(labels_per_file[:-1], start=1):
        recs = np.stack([cifar_record(l, rng=rng) for l in labels])
        (tmp_path / f"data_batch_{i}.bin").write_bytes(recs.tobytes())
    recs = np.stack([cifar_record(l, rng=rng) for l in labels_per_file[-1]])
    (tmp_path / "test_batch.bin").write_bytes(recs.tobytes())


class TestCifarLoader:
    def test_two_record_file_parses_labels(self, tmp_path):
        buf = np.concatenate([cifar_record(3), cifar_record(7)]).tobytes()
        p = tmp_path / "two.bin"
        p.write_bytes(buf)
        ds = load_cifar10_file(p, expect_records=2)
        assert ds.labels.tolist() == [3, 7]

    def test_pixel_byte_255_maps_to_one(self, tmp_path):
        px = np.full(RECORD_BYTES - 1, 255, dtype=np.uint8)
        p = tmp_path / "one.bin"
        p.write_bytes(cifar_record(0, pixels=px).tobytes())
        ds = load_cifar10_file(p, expect_records=1)
        assert ds.images.max() == ds.images.min() == 1.0

    def test_plane_order_is_rgb_row_major(self, tmp_path):
        px = np.zeros(RECORD_BYTES - 1, dtype=np.uint8)
        px[0] = 10          # R plane, pixel (0,0)
        px[1024] = 20       # G plane
        px[2048 + 33] = 30  # B plane, row 1 col 1
        p = tmp_path / "o.bin"
        p.write_bytes(cifar_record(1, pixels=px).tobytes())
        ds = load_cifar10_file(p, expect_records=1)
        assert ds.images[0, 0, 0, 0] == pytest.approx(10 / 255)
        assert ds.images[0, 1, 0, 0] == pytest.approx(20 / 255)
        assert ds.images[0, 2, 1, 1] == pytest.approx(30 / 255)

    def test_wrong_length_reports_byte_offset(self, tmp_path):
        p = tmp_path / "bad.bin"
        p.write_bytes(b"\x00" * (RECORD_BYTES + 100))
        with pytest.raises(DataFormatError, match="byte offset"):
            load_cifar10_file(p, expect_records=None)
        with pytest.raises(DataFormatError, match="offset"):
            load_cifar10_file(p, expect_records=2)

    def test_directory_loader_counts_and_histogram(self, tmp_path, rng):
        per_class = 4
        labels = np.repeat(np.arange(10), per_class)
        files = []
        for i in range(5):
            sh = rng.permutation(labels)
            files.append(sh)
        files.append(rng.permutation(labels))
        write_cifar_dir(tmp_path, files, rng)
        train, test = load_cifar10_binary(tmp_path, records_per_file=40)
        assert len(train) == 5 * 40 and len(test) == 40
        assert train.class_histogram().tolist() == [20] * 10

    def test_missing_file_reported(self, tmp_path):
        with pytest.raises(DataFormatError, match="missing"):
            load_cifar10_binary(tmp_path)


class TestRawFormat:
    def test_empty_payload_with_zero_count(self, tmp_path):
        p = tmp_path / "empty.rimg"
        save_raw_labeled(p, LabeledImages(np.zeros((0, 3, 32, 32), np.float32),
                                          np.zeros(0, np.int64), classes=10))
        ds = load_raw_labeled(p)
        assert len(ds) == 0 and ds.classes == 10

    def test_count_mismatch_rejected(self, tmp_path):
        p = tmp_path / "short.rimg"
        ds = make_toy_dataset(classes=2, per_class=3, seed=0)
        save_raw_labeled(p, ds)
        raw = p.read_bytes()
        p.write_bytes(raw[:-10])
        with pytest.raises(DataFormatError, match="promises"):
            load_raw_labeled(p)

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "bad.rimg"
        p.write_bytes(b"NOPE" + b"\x00" * 12)
        with pytest.raises(DataFormatError, match="magic"):
            load_raw_labeled(p)

    def test_roundtrip_lossless(self, tmp_path, rng):
        n = 17
        imgs = rng.integers(0, 256, (n, 3, 32, 32)).astype(np.float32) / 255.0
        ds = LabeledImages(imgs, rng.integers(0, 10, n), classes=10)
        p = tmp_path / "rt.rimg"
        save_raw_labeled(p, ds)
        back = load_raw_labeled(p)
        np.testing.assert_array_equal(back.images, ds.images)
        np.testing.assert_array_equal(back.labels, ds.labels)
        save_raw_labeled(tmp_path / "rt2.rimg", back)
        assert (tmp_path / "rt2.rimg").read_bytes() == p.read_bytes()

    @given(st.integers(0, 2 ** 31 - 1), st.integers(1, 5))
    @settings(max_examples=15, deadline=None)
    def test_roundtrip_property(self, seed, n):
        import tempfile

        r = np.random.default_rng(seed)
        imgs = r.integers(0, 256, (n, 3, 32, 32)).astype(np.float32) / 255.0
        ds = LabeledImages(imgs, r.integers(0, 10, n), classes=10)
        with tempfile.NamedTemporaryFile(suffix=".rimg") as f:
            save_raw_labeled(f.name, ds)
            back = load_raw_labeled(f.name)
        assert np.array_equal(back.images, ds.images)
        assert np.array_equal(back.labels, ds.labels)


class _ScriptedRng:
    """Deterministic stand-in driving augment()'s draws."""

    def __init__(self, offsets, flip):
        self._offsets = offsets
        self._flip = flip

    def integers(self, lo, hi, size=None):
        return np.array(self._offsets)

    def random(self):
        return 0.0 if self._flip else 1.0


class TestAugment:
    def test_center_crop_recovers_original(self, rng):
        img = rng.random((3, 32, 32)).astype(np.float32)
        out = augment(img, _ScriptedRng((4, 4), flip=False))
        np.testing.assert_array_equal(out, img)

    def test_double_flip_is_identity(self, rng):
        img = rng.random((3, 32, 32)).astype(np.float32)
        once = augment(img, _ScriptedRng((4, 4), flip=True))
        twice = augment(once, _ScriptedRng((4, 4), flip=True))
        np.testing.assert_array_equal(twice, img)

    def test_flip_preserves_pixel_multiset(self, rng):
        img = rng.random((3, 32, 32)).astype(np.float32)
        out = augment(img, _ScriptedRng((4, 4), flip=True))
        np.testing.assert_array_equal(np.sort(out, axis=None), np.sort(img, axis=None))

    def test_crop_shifts_content(self, rng):
        img = rng.random((3, 32, 32)).astype(np.float32)
        out = augment(img, _ScriptedRng((0, 0), flip=False))
        assert out.shape == (3, 32, 32)
        np.testing.assert_array_equal(out[:, 4:, 4:], img[:, :28, :28])
        assert np.all(out[:, :4, :] == 0)


class TestToyDataset:
    def test_deterministic_by_seed(self):
        a = make_toy_dataset(classes=3, per_class=5, seed=7)
        b = make_toy_dataset(classes=3, per_class=5, seed=7)
        assert a.images.tobytes() == b.images.tobytes()
        assert not np.array_equal(a.images,
                                  make_toy_dataset(classes=3, per_class=5, seed=8).images)

    def test_exact_class_counts(self):
        ds = make_toy_dataset(classes=6, per_class=11, seed=0)
        assert ds.class_histogram().tolist() == [11] * 6

    def test_pixels_in_unit_range_on_byte_grid(self):
        ds = make_toy_dataset(classes=2, per_class=4, seed=1)
        assert ds.images.min() >= 0.0 and ds.images.max() <= 1.0
        np.testing.assert_allclose(np.round(ds.images * 255), ds.images * 255, atol=1e-4)

    def test_small_convnet_learns_above_90pct_within_500_steps(self):
        # two conv layers + linear head, trained directly on the toy set
        train = make_toy_dataset(classes=10, per_class=64, seed=3)
        test = make_toy_dataset(classes=10, per_class=16, seed=4)
        mean, std = normalization_stats(train)
        rng = np.random.default_rng(0)

        conv1 = Conv2d(3, 12, 3, stride=2, padding=1, rng=rng)
        conv2 = Conv2d(12, 24, 3, stride=2, padding=1, rng=rng)
        head = Linear(24, 10, rng=rng)
        params = {"c1": conv1.weight, "c2": conv2.weight,
                  "hw": head.weight, "hb": head.bias}
        opt = SGD(params, lr=0.05, momentum=0.9, weight_decay=1e-4)

        def forward(xb):
            h = ops.relu(conv1(Tensor(xb)))
            h = ops.relu(conv2(h))
            return head(ops.global_avg_pool(h))

        stream = BatchStream(train, 64, np.random.default_rng(1), mean, std)
        for _ in range(500):
            xb, yb = stream.next_batch()
            loss = ops.cross_entropy_loss(forward(xb), yb)
            for p in params.values():
                p.grad = None
            loss.backward()
            opt.step()

        logits = forward(normalize(test.images, mean, std))
        acc = (logits.data.argmax(axis=1) == test.labels).mean()
        assert acc > 0.9


class TestNormalization:
    def test_stats_and_idempotent_application(self, rng):
        ds = make_toy_dataset(classes=2, per_class=20, seed=2)
        mean, std = normalization_stats(ds)
        out = normalize(ds.images, mean, std)
        assert abs(out.mean()) < 1e-3
        out2 = normalize(ds.images, mean, std)
        np.testing.assert_array_equal(out, out2)
