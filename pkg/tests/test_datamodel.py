"""Map types, file round trips, and bundle digest verification."""
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from llrseg.datamodel import (
    IGNORE,
    BinaryOutlierMap,
    FeatureMap,
    LabelMap,
    ModelBundle,
    ScoreMap,
    load_feature_map,
    load_label_map,
    load_outlier_map,
    load_score_map,
    save_feature_map,
    save_label_map,
    save_outlier_map,
    save_score_map,
    tensor_digest,
    validate_pair,
)
from llrseg.errors import (
    BadMagic,
    DigestMismatch,
    DimMismatch,
    IllegalLabel,
    NonFinite,
    TruncatedPayload,
)


def f32_exact(rng, shape):
    """Random values exactly representable in float32."""
    return rng.normal(0, 1, shape).astype(np.float32).astype(np.float64)


class TestFeatureMap:
    def test_round_trip_zeros(self, tmp_path):
        fmap = FeatureMap(np.zeros((3, 2, 2)))
        save_feature_map(fmap, tmp_path / "z.fmap")
        loaded = load_feature_map(tmp_path / "z.fmap")
        assert np.array_equal(loaded.data, fmap.data)

    def test_round_trip_random(self, tmp_path):
        rng = np.random.default_rng(0)
        fmap = FeatureMap(f32_exact(rng, (4, 5, 6)))
        save_feature_map(fmap, tmp_path / "r.fmap")
        loaded = load_feature_map(tmp_path / "r.fmap")
        assert np.array_equal(loaded.data, fmap.data)
        assert (loaded.channels, loaded.height, loaded.width) == (4, 5, 6)

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "bad.fmap"
        p.write_bytes(b"XXXX" + b"\x00" * 40)
        with pytest.raises(BadMagic):
            load_feature_map(p)

    def test_nan_rejected_at_construction(self):
        data = np.zeros((2, 2, 2))
        data[1, 0, 1] = np.nan
        with pytest.raises(NonFinite) as exc:
            FeatureMap(data)
        assert exc.value.position == 5

    def test_truncated_payload(self, tmp_path):
        fmap = FeatureMap(np.zeros((2, 3, 3)))
        p = tmp_path / "t.fmap"
        save_feature_map(fmap, p)
        p.write_bytes(p.read_bytes()[:-4])
        with pytest.raises(TruncatedPayload):
            load_feature_map(p)

    def test_pixels_layout(self):
        data = np.arange(2 * 2 * 3, dtype=np.float64).reshape(2, 2, 3)
        px = FeatureMap(data).pixels()
        assert px.shape == (6, 2)
        assert np.array_equal(px[0], data[:, 0, 0])
        assert np.array_equal(px[5], data[:, 1, 2])

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_round_trip_identity_property(self, seed):
        import tempfile
        from pathlib import Path

        rng = np.random.default_rng(seed)
        shape = tuple(rng.integers(1, 5, size=3))
        fmap = FeatureMap(f32_exact(rng, shape))
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "m.fmap"
            save_feature_map(fmap, path)
            assert np.array_equal(load_feature_map(path).data, fmap.data)


class TestLabelAndOutlierMaps:
    def test_label_round_trip(self, tmp_path):
        lmap = LabelMap(np.array([[0, 1], [2, IGNORE]], dtype=np.uint8))
        save_label_map(lmap, tmp_path / "l.lmap")
        assert np.array_equal(load_label_map(tmp_path / "l.lmap").labels, lmap.labels)

    def test_outlier_round_trip(self, tmp_path):
        omap = BinaryOutlierMap(np.array([[0, 1], [IGNORE, 0]], dtype=np.uint8))
        save_outlier_map(omap, tmp_path / "o.lmap")
        assert np.array_equal(load_outlier_map(tmp_path / "o.lmap").labels, omap.labels)

    def test_outlier_rejects_other_values(self):
        with pytest.raises(IllegalLabel) as exc:
            BinaryOutlierMap(np.array([[0, 2]], dtype=np.uint8))
        assert exc.value.value == 2

    def test_score_round_trip(self, tmp_path):
        rng = np.random.default_rng(1)
        smap = ScoreMap(f32_exact(rng, (3, 4)))
        save_score_map(smap, tmp_path / "s.smap")
        assert np.array_equal(load_score_map(tmp_path / "s.smap").scores, smap.scores)

    def test_score_bad_magic(self, tmp_path):
        p = tmp_path / "s.smap"
        p.write_bytes(b"QQQQ" + b"\x00" * 16)
        with pytest.raises(BadMagic):
            load_score_map(p)


class TestValidatePair:
    def test_ok(self):
        f = FeatureMap(np.zeros((4, 8, 8)))
        l = LabelMap(np.arange(64, dtype=np.uint8).reshape(8, 8) % 5)
        validate_pair(f, l, 5)  # no exception

    def test_dim_mismatch(self):
        f = FeatureMap(np.zeros((4, 8, 8)))
        l = LabelMap(np.zeros((7, 8), dtype=np.uint8))
        with pytest.raises(DimMismatch):
            validate_pair(f, l, 5)

    def test_illegal_label(self):
        f = FeatureMap(np.zeros((4, 8, 8)))
        labels = np.zeros((8, 8), dtype=np.uint8)
        labels[3, 3] = 5
        with pytest.raises(IllegalLabel) as exc:
            validate_pair(f, LabelMap(labels), 5)
        assert exc.value.value == 5

    def test_ignore_is_always_legal(self):
        f = FeatureMap(np.zeros((4, 8, 8)))
        labels = np.full((8, 8), IGNORE, dtype=np.uint8)
        validate_pair(f, LabelMap(labels), 5)


class TestModelBundle:
    def make_bundle(self):
        rng = np.random.default_rng(3)
        tensors = {
            "decoder.0.weight": f32_exact(rng, (4, 3)),
            "decoder.0.bias": f32_exact(rng, (4,)),
        }
        return ModelBundle(manifest={"stage": "inlier"}, tensors=tensors)

    def test_round_trip(self, tmp_path):
        bundle = self.make_bundle()
        bundle.save(tmp_path / "b")
        loaded = ModelBundle.load(tmp_path / "b")
        assert loaded.stage == "inlier"
        for name, t in bundle.tensors.items():
            assert np.array_equal(loaded.tensors[name], t)

    def test_single_byte_flip_detected(self, tmp_path):
        bundle = self.make_bundle()
        bundle.save(tmp_path / "b")
        target = tmp_path / "b" / "decoder.0.weight.fmap"
        blob = bytearray(target.read_bytes())
        blob[-1] ^= 0x01
        target.write_bytes(bytes(blob))
        with pytest.raises(DigestMismatch):
            ModelBundle.load(tmp_path / "b")

    def test_digest_deterministic(self):
        t = np.arange(6, dtype=np.float64).reshape(2, 3)
        assert tensor_digest(t) == tensor_digest(t.copy())
        flipped = t.copy()
        flipped[0, 0] += 1
        assert tensor_digest(t) != tensor_digest(flipped)
