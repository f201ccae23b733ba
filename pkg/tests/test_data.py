import hashlib
import json
import struct

import numpy as np
import pytest

from kamamba import data
from kamamba.errors import ValidationError
from kamamba.losses import build_transition

SMALL = dict(steps=5, height=7, width=7)


@pytest.fixture(scope="module")
def T_star():
    return data.designed_transition()


@pytest.fixture(scope="module")
def small_ds(T_star):
    return data.generate(3, 30, 0.5, T_star, **SMALL)


class TestProfiles:
    def test_bounded(self):
        for p in data.class_profiles():
            c = p.curve()
            assert c.shape == (6, 23)
            assert np.abs(c).max() <= 3.0

    def test_confusable_pairs_are_close(self):
        profiles = data.class_profiles()
        curves = np.stack([p.curve() for p in profiles])
        dist = np.abs(curves[:, None] - curves[None]).mean(axis=(2, 3))
        for a, b in data.CONFUSABLE_PAIRS:
            others = np.delete(dist[a], [a, b])
            assert dist[a, b] < others.min()


class TestDesignedTransition:
    def test_row_structure(self):
        T = data.designed_transition(0.98, 0.01)
        np.testing.assert_allclose(T.sum(1), 1.0, atol=1e-15)
        assert (np.diag(T) == 0).all()
        for row in T:
            assert sorted(row)[-2:] == [0.01, 0.98]

    def test_invalid(self):
        with pytest.raises(ValidationError):
            data.designed_transition(0.9, 0.2)


class TestSamplePairs:
    def test_zero_rate_unchanged(self, T_star):
        a, b = data.sample_pairs(0, 500, 0.0, T_star)
        assert np.array_equal(a, b)

    def test_full_rate_always_changed(self, T_star):
        a, b = data.sample_pairs(0, 500, 1.0, T_star)
        assert (a != b).all()

    def test_deterministic(self, T_star):
        assert all(np.array_equal(x, y) for x, y in zip(data.sample_pairs(5, 100, 0.4, T_star),
                                                          data.sample_pairs(5, 100, 0.4, T_star)))

    def test_recovers_T_star(self, T_star):
        a, b = data.sample_pairs(11, 10_000, 1.0, T_star)
        est = build_transition(np.stack([a, b], 1)).T
        assert np.abs(est - T_star).max() <= 0.02

    def test_class_freq(self, T_star):
        freq = np.zeros(11)
        freq[[2, 5]] = [1, 3]
        a, _ = data.sample_pairs(0, 4000, 0.0, T_star, class_freq=freq)
        assert set(np.unique(a)) == {2, 5}
        assert abs((a == 5).mean() - 0.75) < 0.03

    def test_rejects_bad_inputs(self, T_star):
        with pytest.raises(ValidationError):
            data.sample_pairs(0, 10, 1.5, T_star)
        with pytest.raises(ValidationError):
            data.sample_pairs(0, 10, 0.5, T_star * 2)
        with pytest.raises(ValidationError, match="off-diagonal"):
            data.sample_pairs(0, 10, 0.5, np.eye(11))


class TestGenerate:
    def test_shapes_and_labels(self, small_ds):
        assert small_ds.pre.shape == (30, 6, 5, 7, 7)
        assert small_ds.pre.dtype == np.float32
        assert np.array_equal(small_ds.changed, small_ds.y_pre != small_ds.y_post)

    def test_splits_disjoint_and_complete(self, small_ds):
        parts = [set(small_ds.split(k).tolist()) for k in ("train", "val", "test")]
        assert sum(map(len, parts)) == 30
        assert set.union(*parts) == set(range(30))
        with pytest.raises(ValidationError):
            small_ds.split("holdout")

    def test_deterministic(self, T_star, small_ds):
        again = data.generate(3, 30, 0.5, T_star, **SMALL)
        assert again.pre.tobytes() == small_ds.pre.tobytes()
        assert again.post.tobytes() == small_ds.post.tobytes()

    def test_noise_free_centre_is_profile(self, T_star):
        ds = data.generate(1, 6, 0.5, T_star, noise=0.0, steps=23, height=13, width=13)
        profiles = data.class_profiles()
        for i in range(6):
            np.testing.assert_allclose(ds.pre[i][:, :, 6, 6], profiles[ds.y_pre[i]].curve(), atol=1e-6)
            np.testing.assert_allclose(ds.post[i][:, :, 6, 6], profiles[ds.y_post[i]].curve(), atol=1e-6)

    def test_borders_are_mixed(self, T_star):
        ds = data.generate(2, 20, 0.0, T_star, noise=0.0, steps=23, height=13, width=13)
        profiles = data.class_profiles()
        dev = [np.abs(ds.pre[i] - profiles[ds.y_pre[i]].curve()[:, :, None, None]).max() for i in range(20)]
        assert min(dev) > 0.05

    def test_normalization_uses_train_split(self, small_ds):
        tr = small_ds.tensors(small_ds.split("train"))
        both = np.concatenate([tr["pre"].numpy(), tr["post"].numpy()])
        np.testing.assert_allclose(both.mean(axis=(0, 2, 3, 4)), 0.0, atol=1e-5)
        np.testing.assert_allclose(both.std(axis=(0, 2, 3, 4)), 1.0, atol=1e-4)

    def test_rejects_wrong_matrix_size(self):
        with pytest.raises(ValidationError):
            data.generate(0, 2, 0.5, np.full((3, 3), 1 / 3), **SMALL)


class TestBalance:
    @pytest.mark.parametrize("count, cap", [(10, 10), (49, 10), (50, 50), (300, 50), (301, 100)])
    def test_caps(self, count, cap):
        assert data.balance_caps([count])[0] == cap

    def test_subset(self):
        labels = np.repeat(np.arange(3), [30, 120, 400])
        keep = data.balanced_subset(labels)
        counts = np.bincount(labels[keep], minlength=3)
        assert counts.tolist() == [10, 50, 100]
        assert np.all(np.diff(keep) > 0)


class TestContainer:
    def test_round_trip_bit_exact(self, small_ds, tmp_path):
        data.save(small_ds, tmp_path)
        back = data.load(tmp_path)
        for name in ("pre", "post", "y_pre", "y_post", "changed"):
            assert getattr(back, name).tobytes() == getattr(small_ds, name).tobytes()
        assert back.manifest["splits"] == small_ds.manifest["splits"]
        assert back.manifest["schema"] == "v1"

    def test_truncated_rejected(self, small_ds, tmp_path):
        data.save(small_ds, tmp_path)
        blob = (tmp_path / "values.bin").read_bytes()
        (tmp_path / "values.bin").write_bytes(blob[:-7])
        with pytest.raises(ValidationError, match="bytes"):
            data.load(tmp_path)

    def test_checksum_rejected(self, small_ds, tmp_path):
        data.save(small_ds, tmp_path)
        blob = bytearray((tmp_path / "values.bin").read_bytes())
        blob[100] ^= 0xFF
        (tmp_path / "values.bin").write_bytes(bytes(blob))
        with pytest.raises(ValidationError, match="checksum"):
            data.load(tmp_path)

    def test_shape_mismatch_rejected(self, small_ds, tmp_path):
        data.save(small_ds, tmp_path)
        m = json.loads((tmp_path / "manifest.json").read_text())
        m["cube_shape"] = [6, 5, 7, 8]
        (tmp_path / "manifest.json").write_text(json.dumps(m))
        with pytest.raises(ValidationError, match="shape"):
            data.load(tmp_path)

    def test_missing(self, tmp_path):
        with pytest.raises(ValidationError, match="not found"):
            data.load(tmp_path / "nowhere")

    def test_little_endian_golden_bytes(self, tmp_path):
        pre = np.array([1.0, -2.5, 0.1], dtype=np.float32).reshape(1, 1, 1, 1, 3)
        post = np.array([3.0, 0.0, -0.0], dtype=np.float32).reshape(1, 1, 1, 1, 3)
        ds = data.SyntheticDataset(pre, post, np.array([2], np.int32), np.array([258], np.int32),
                                   np.array([True]), {"schema": "v1", "n_samples": 1, "cube_shape": [1, 1, 1, 3]})
        data.save(ds, tmp_path)
        expected = (
            struct.pack("<3f", 1.0, -2.5, 0.1)
            + struct.pack("<3f", 3.0, 0.0, -0.0)
            + struct.pack("<i", 2)
            + struct.pack("<i", 258)
            + b"\x01"
        )
        assert (tmp_path / "values.bin").read_bytes() == expected
        assert expected.hex() == "0000803f000020c0cdcccc3d0000404000000000000000800200000002010000" "01"
        manifest = json.loads((tmp_path / "manifest.json").read_text())
        assert manifest["sha256"] == hashlib.sha256(expected).hexdigest()
        assert [s["offset"] for s in manifest["layout"]] == [0, 12, 24, 28, 32]
