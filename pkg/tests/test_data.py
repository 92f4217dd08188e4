"""Generators, IDX archives, image rotation."""

import gzip
import os

import numpy as np
import pytest

from distgp.data import (gen_banana, gen_toy_regression, load_idx,
                         load_idx_dir, rotate_images, write_idx)
from distgp.errors import (BadMagic, CountMismatch, IOFormatError,
                           TruncatedFile)


class TestToyRegression:
    def test_shapes(self):
        x, y = gen_toy_regression(37, seed=0)
        assert x.shape == (37, 1) and y.shape == (37, 1)

    def test_inputs_avoid_gap_and_stay_in_domain(self):
        x, _ = gen_toy_regression(500, seed=1, gap=(2.0, 4.0),
                                  domain=(0.0, 6.5))
        assert np.all((x >= 0.0) & (x <= 6.5))
        assert not np.any((x > 2.0) & (x < 4.0))

    def test_both_sides_sampled(self):
        x, _ = gen_toy_regression(400, seed=2)
        assert np.sum(x < 2.0) > 50 and np.sum(x > 4.0) > 50

    def test_seed_determinism(self):
        a = gen_toy_regression(50, seed=7)
        b = gen_toy_regression(50, seed=7)
        c = gen_toy_regression(50, seed=8)
        assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])
        assert not np.array_equal(a[0], c[0])

    def test_target_is_noisy_sine_plus_trend(self):
        x, y = gen_toy_regression(2000, seed=3, noise_sd=0.1)
        resid = y - np.sin(2.0 * x) - 0.2 * x
        assert abs(float(resid.mean())) < 0.02
        assert 0.08 < float(resid.std()) < 0.12

    def test_custom_gap(self):
        x, _ = gen_toy_regression(300, seed=4, gap=(1.0, 5.0),
                                  domain=(0.0, 6.0))
        assert not np.any((x > 1.0) & (x < 5.0))


class TestBanana:
    def test_shapes_and_labels(self):
        x, labels = gen_banana(64, seed=0)
        assert x.shape == (64, 2)
        assert labels.shape == (64,) and labels.dtype == np.int64
        assert set(np.unique(labels)) <= {0, 1}

    def test_seed_determinism(self):
        a = gen_banana(40, seed=5)
        b = gen_banana(40, seed=5)
        assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])

    def test_classes_are_separable(self):
        # oracle: an off-the-shelf kernel classifier must find the structure
        sklearn = pytest.importorskip("sklearn.svm")
        x, labels = gen_banana(600, seed=1, noise_sd=0.1)
        acc = sklearn.SVC(kernel="rbf").fit(x[:400], labels[:400]) \
            .score(x[400:], labels[400:])
        assert acc >= 0.9


class TestIdxRoundTrip:
    def test_images_scale_to_unit_interval(self, tmp_path):
        rng = np.random.default_rng(0)
        raw = rng.integers(0, 256, size=(5, 4, 3), dtype=np.uint8)
        path = tmp_path / "imgs.idx3-ubyte"
        write_idx(path, raw)
        back = load_idx(path)
        assert back.shape == (5, 4, 3) and back.dtype == np.float64
        np.testing.assert_allclose(back, raw / 255.0)

    def test_labels_stay_integers(self, tmp_path):
        labels = np.array([3, 1, 9, 0], dtype=np.uint8)
        path = tmp_path / "labels.idx1-ubyte"
        write_idx(path, labels)
        back = load_idx(path)
        assert back.dtype == np.int64
        np.testing.assert_array_equal(back, labels)

    def test_gzip_round_trip(self, tmp_path):
        raw = np.arange(24, dtype=np.uint8).reshape(2, 3, 4)
        path = tmp_path / "imgs.idx3-ubyte.gz"
        write_idx(path, raw)
        with gzip.open(path, "rb") as fh:
            assert fh.read(4) == b"\x00\x00\x08\x03"
        np.testing.assert_allclose(load_idx(path), raw / 255.0)

    def test_truncated_header(self, tmp_path):
        path = tmp_path / "short.idx"
        path.write_bytes(b"\x00\x00")
        with pytest.raises(TruncatedFile):
            load_idx(path)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.idx"
        path.write_bytes(b"\x07\x00\x08\x01" + b"\x00" * 8)
        with pytest.raises(BadMagic):
            load_idx(path)

    def test_unsupported_dtype(self, tmp_path):
        path = tmp_path / "float.idx"
        path.write_bytes(b"\x00\x00\x0d\x01\x00\x00\x00\x01" + b"\x00" * 4)
        with pytest.raises(IOFormatError):
            load_idx(path)

    def test_truncated_payload(self, tmp_path):
        path = tmp_path / "cut.idx"
        write_idx(path, np.zeros((4, 4), dtype=np.uint8))
        blob = path.read_bytes()
        path.write_bytes(blob[:-3])
        with pytest.raises(TruncatedFile):
            load_idx(path)

    def test_payload_overrun(self, tmp_path):
        path = tmp_path / "long.idx"
        write_idx(path, np.zeros(4, dtype=np.uint8))
        path.write_bytes(path.read_bytes() + b"\x01\x02")
        with pytest.raises(CountMismatch):
            load_idx(path)


class TestIdxDir:
    def _write_set(self, directory, n_train=6, n_test=4, side=5):
        rng = np.random.default_rng(1)
        write_idx(os.path.join(directory, "train-images-idx3-ubyte"),
                  rng.integers(0, 256, (n_train, side, side), dtype=np.uint8))
        write_idx(os.path.join(directory, "train-labels-idx1-ubyte"),
                  rng.integers(0, 2, n_train, dtype=np.uint8))
        # mixed stem + gzip variants must both resolve
        write_idx(os.path.join(directory, "t10k-images.idx3-ubyte.gz"),
                  rng.integers(0, 256, (n_test, side, side), dtype=np.uint8))
        write_idx(os.path.join(directory, "t10k-labels-idx1-ubyte"),
                  rng.integers(0, 2, n_test, dtype=np.uint8))

    def test_loads_all_four(self, tmp_path):
        self._write_set(tmp_path)
        out = load_idx_dir(tmp_path)
        assert out["train_images"].shape == (6, 5, 5)
        assert out["test_images"].shape == (4, 5, 5)
        assert out["train_labels"].shape == (6,)
        assert out["test_labels"].shape == (4,)

    def test_missing_archive(self, tmp_path):
        self._write_set(tmp_path)
        os.remove(tmp_path / "t10k-labels-idx1-ubyte")
        with pytest.raises(IOFormatError):
            load_idx_dir(tmp_path)

    def test_count_mismatch(self, tmp_path):
        self._write_set(tmp_path)
        write_idx(tmp_path / "train-labels-idx1-ubyte",
                  np.zeros(9, dtype=np.uint8))
        with pytest.raises(CountMismatch):
            load_idx_dir(tmp_path)


class TestRotateImages:
    def test_zero_degrees_is_identity(self):
        rng = np.random.default_rng(2)
        imgs = rng.uniform(size=(3, 7, 7))
        np.testing.assert_allclose(rotate_images(imgs, 0.0), imgs, atol=1e-12)

    def test_quarter_turn_matches_rot90(self):
        rng = np.random.default_rng(3)
        imgs = rng.uniform(size=(2, 6, 6, 2))
        got = rotate_images(imgs, 90.0)
        want = np.rot90(imgs, k=1, axes=(1, 2))
        np.testing.assert_allclose(got, want, atol=1e-9)

    def test_full_turn_identity(self):
        rng = np.random.default_rng(4)
        imgs = rng.uniform(size=(1, 9, 9))
        np.testing.assert_allclose(rotate_images(imgs, 360.0), imgs, atol=1e-9)

    def test_out_of_frame_fills_zero(self):
        imgs = np.ones((1, 8, 8))
        rot = rotate_images(imgs, 45.0)
        assert rot[0, 0, 0] == 0.0 and rot[0, -1, -1] == 0.0
        assert rot.max() <= 1.0 + 1e-12

    def test_channel_axis_preserved(self):
        imgs = np.zeros((1, 5, 5, 3))
        imgs[0, 2, 4, 1] = 1.0
        rot = rotate_images(imgs, 90.0)
        assert rot.shape == (1, 5, 5, 3)
        # counterclockwise: the right-edge pixel lands on the top edge
        assert rot[0, 0, 2, 1] == pytest.approx(1.0)
