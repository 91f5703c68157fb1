"""Scene synthesis, outlier injection, and dataset generation."""
import json

import numpy as np
import pytest

from llrseg.anomalymix import (
    DatasetConfig,
    OutlierBank,
    inject_outliers,
    load_split,
    make_dataset,
    random_bank,
    random_spec,
    synth_scene,
)
from llrseg.datamodel import IGNORE


def far_bank(feature_dim=8, **kw):
    means = np.full((1, feature_dim), 100.0)
    return OutlierBank(means=means, scales=np.ones(1), **kw)


class TestSynthScene:
    def test_single_class_constant_labels(self):
        rng = np.random.default_rng(0)
        spec = random_spec(1, 4, 8, 8, rng)
        _, labels = synth_scene(spec, rng)
        assert np.all(labels.labels == 0)

    def test_same_seed_identical(self):
        spec = random_spec(3, 8, 16, 16, np.random.default_rng(1))
        f1, l1 = synth_scene(spec, np.random.default_rng(42))
        f2, l2 = synth_scene(spec, np.random.default_rng(42))
        assert np.array_equal(f1.data, f2.data)
        assert np.array_equal(l1.labels, l2.labels)

    def test_every_class_present(self):
        rng = np.random.default_rng(2)
        spec = random_spec(4, 8, 32, 32, rng)
        _, labels = synth_scene(spec, rng)
        assert set(np.unique(labels.labels)) == set(range(4))

    def test_empirical_class_means_match_spec(self):
        rng = np.random.default_rng(3)
        spec = random_spec(2, 6, 100, 100, rng)
        feats, labels = synth_scene(spec, rng)
        px = feats.pixels()
        lab = labels.labels.ravel()
        for k in range(2):
            sample = px[lab == k]
            n = sample.shape[0]
            sigma = spec.class_scales[k]
            tol = 4.0 * sigma / np.sqrt(n)
            assert np.all(np.abs(sample.mean(axis=0) - spec.class_means[k]) < tol)


class TestInjectOutliers:
    def scene(self, seed=0):
        rng = np.random.default_rng(seed)
        spec = random_spec(2, 8, 16, 16, rng)
        f, l = synth_scene(spec, rng)
        return f, l, rng

    def test_zero_count_is_identity(self):
        f, l, rng = self.scene()
        mixed, omap, new_labels = inject_outliers(f, l, far_bank(), rng,
                                                  count_range=(0, 0))
        assert np.array_equal(mixed.data, f.data)
        assert np.all(omap.labels == 0)
        assert np.array_equal(new_labels.labels, l.labels)

    def test_full_image_shape_marks_everything(self):
        # a shape far larger than the image clips to cover every pixel
        bank = far_bank(min_area=16.0, max_area=16.0)
        covered = False
        for seed in range(30):
            f, l, rng = self.scene(seed)
            _, omap, new_labels = inject_outliers(f, l, bank, rng,
                                                  count_range=(1, 1))
            if np.all(omap.labels == 1):
                covered = True
                assert np.all(new_labels.labels == IGNORE)
                break
        assert covered

    def test_pasted_pixels_marked_and_ignored(self):
        f, l, rng = self.scene(1)
        mixed, omap, new_labels = inject_outliers(f, l, far_bank(), rng,
                                                  count_range=(2, 2))
        pasted = omap.labels == 1
        assert pasted.any()
        assert np.all(new_labels.labels[pasted] == IGNORE)
        assert np.array_equal(new_labels.labels[~pasted], l.labels[~pasted])
        # pasted features are draws near the distant bank mean
        assert mixed.pixels()[pasted.ravel()].mean() > 50.0

    def test_outlier_fraction_bounded(self):
        bank = far_bank(min_area=0.01, max_area=0.10)
        fractions = []
        for seed in range(100):
            f, l, rng = self.scene(seed)
            _, omap, _ = inject_outliers(f, l, bank, rng, count_range=(1, 4))
            fractions.append(omap.labels.mean())
        fractions = np.array(fractions)
        assert np.all(fractions > 0.0)
        assert np.all(fractions <= 4 * 0.10 + 1e-12)

    def test_bank_separation_constraint(self):
        rng = np.random.default_rng(4)
        spec = random_spec(3, 8, 16, 16, rng)
        bank = random_bank(spec, 4, rng, separation=6.0)
        dists = np.linalg.norm(
            spec.class_means[:, None] - bank.means[None, :], axis=2)
        assert dists.min() >= 6.0 * spec.class_scales.max()


class TestMakeDataset:
    def config(self, seed=0):
        return DatasetConfig(num_classes=3, feature_dim=8, height=16,
                             width=16, bank_size=4, train_bank=2,
                             splits=(2, 2, 2), seed=seed)

    def test_scene_layout_and_manifest(self, tmp_path):
        manifest = make_dataset(self.config(), tmp_path)
        dirs = sorted(p.name for p in (tmp_path / "scenes").iterdir())
        assert dirs == [f"{i:04d}" for i in range(6)]
        assert len(manifest["scenes"]) == 6
        for i in range(6):
            scene = tmp_path / "scenes" / f"{i:04d}"
            for name in ("features.fmap", "labels.lmap", "outliers.lmap"):
                assert (scene / name).exists()

    def test_bank_splits_disjoint(self, tmp_path):
        manifest = make_dataset(self.config(), tmp_path)
        train = set(manifest["train_bank_indices"])
        ev = set(manifest["eval_bank_indices"])
        assert train and ev
        assert not (train & ev)
        assert train | ev == set(range(4))

    def test_regeneration_is_byte_identical(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        make_dataset(self.config(seed=9), a)
        make_dataset(self.config(seed=9), b)
        for p in sorted(a.rglob("*")):
            if p.is_file():
                q = b / p.relative_to(a)
                assert q.read_bytes() == p.read_bytes()

    def test_inlier_split_has_no_outliers(self, tmp_path):
        make_dataset(self.config(seed=1), tmp_path)
        for _, _, omap in load_split(tmp_path, "train_inlier"):
            assert np.all(omap.labels == 0)
        mixed = load_split(tmp_path, "train_uem")
        assert any(np.any(o.labels == 1) for _, _, o in mixed)

    def test_split_sizes(self, tmp_path):
        make_dataset(self.config(seed=2), tmp_path)
        assert len(load_split(tmp_path, "train_inlier")) == 2
        assert len(load_split(tmp_path, "train_uem")) == 2
        assert len(load_split(tmp_path, "eval")) == 2
