"""Dataset synthesis and loading: determinism, layout, batch contracts."""

import hashlib
from pathlib import Path

import numpy as np
import pytest

from musenet import dataset as D
from musenet import weather as W
from musenet.errors import DataIOError, UsageError


def tree_digest(root: Path) -> str:
    digest = hashlib.sha256()
    for path in sorted(root.rglob("*")):
        if path.is_file():
            digest.update(str(path.relative_to(root)).encode())
            digest.update(path.read_bytes())
    return digest.hexdigest()


class TestGenerate:
    def test_same_seed_gives_byte_identical_tree(self, small_spec, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        D.generate_dataset(small_spec, a, self_check=False)
        D.generate_dataset(small_spec, b, self_check=False)
        assert tree_digest(a) == tree_digest(b)

    def test_counts_match_spec(self, small_spec, small_dataset):
        root = small_dataset.root
        sats = list(root.rglob("satellite/*/*.ppm"))
        drones = list(root.rglob("drone/*/*.ppm"))
        total_ids = small_spec.train_ids + small_spec.test_ids + small_spec.distractor_ids
        assert len(sats) == total_ids
        assert len(drones) == (small_spec.train_ids + small_spec.test_ids) * small_spec.views_per_id

    def test_distractors_have_no_drone_views(self, small_dataset):
        for gid in small_dataset.distractor_ids:
            assert not list((small_dataset.root / "distractor" / "drone").glob(f"{gid:04d}/*"))

    def test_splits_are_disjoint(self, small_dataset):
        train = set(small_dataset.train_ids)
        test = set(small_dataset.test_ids)
        distract = set(small_dataset.distractor_ids)
        assert not (train & test) and not (train & distract) and not (test & distract)

    def test_structural_overlap_beats_threshold(self, small_spec, small_dataset):
        sats, views = {}, {}
        for split in ("train", "test"):
            for gid in small_dataset.ids[split]:
                sats[gid] = small_dataset.satellite_image(split, gid)
                views[gid] = [small_dataset.drone_image(split, gid, v)
                              for v in range(small_dataset.views_per_id)]
        rate = D.structural_overlap_rate(sats, views, np.random.default_rng(0), 120)
        assert rate >= D.OVERLAP_THRESHOLD

    def test_missing_manifest_rejected(self, tmp_path):
        with pytest.raises(DataIOError):
            D.SyntheticDataset(tmp_path)


class TestGeoSample:
    def test_satellite_with_style_rejected(self):
        img = np.zeros((4, 4, 3), dtype=np.uint8)
        with pytest.raises(UsageError):
            D.GeoSample(img, 0, W.Platform.SATELLITE, W.StyleKind.FOG, 2)

    def test_drone_sample_accepted(self):
        img = np.zeros((4, 4, 3), dtype=np.uint8)
        sample = D.GeoSample(img, 3, W.Platform.DRONE, W.StyleKind.RAIN, 3)
        assert sample.style_label == 3


class TestTrainingBatch:
    def test_composition(self, small_dataset):
        batch = D.load_training_batch(small_dataset, n=4, epoch=0, step=0, seed=11)
        assert batch.images.shape == (8, 3, 32, 32)
        assert (batch.style_labels[:4] == 0).all()
        assert ((batch.style_labels[4:] >= 1) & (batch.style_labels[4:] <= 10)).all()
        assert all(gid in small_dataset.train_ids for gid in batch.identity_labels)

    def test_deterministic(self, small_dataset):
        a = D.load_training_batch(small_dataset, 4, epoch=2, step=5, seed=3)
        b = D.load_training_batch(small_dataset, 4, epoch=2, step=5, seed=3)
        np.testing.assert_array_equal(a.images.data, b.images.data)
        np.testing.assert_array_equal(a.identity_labels, b.identity_labels)
        np.testing.assert_array_equal(a.style_labels, b.style_labels)

    def test_varies_across_steps(self, small_dataset):
        a = D.load_training_batch(small_dataset, 4, epoch=2, step=5, seed=3)
        b = D.load_training_batch(small_dataset, 4, epoch=2, step=6, seed=3)
        assert not np.array_equal(a.images.data, b.images.data)

    def test_oversized_batch_rejected(self, small_dataset):
        with pytest.raises(UsageError):
            D.load_training_batch(small_dataset, n=100, epoch=0, step=0, seed=0)

    def test_pixel_range_is_normalized(self, small_dataset):
        batch = D.load_training_batch(small_dataset, 4, epoch=0, step=0, seed=5)
        assert batch.images.data.min() >= -1.0 and batch.images.data.max() <= 1.0

    def test_style_pick_distribution(self):
        picks = D.pick_styles(np.random.default_rng(0), 10_000)
        freq = np.bincount(picks, minlength=10) / picks.size
        assert np.abs(freq - 0.1).max() < 0.02


class TestEvalSet:
    def test_d2s_structure(self, small_spec, small_dataset):
        eval_set = D.load_eval_set(small_dataset, W.StyleKind.FOG, D.Task.DRONE_TO_SAT)
        assert len(eval_set.query_ids) == small_spec.test_ids * small_spec.views_per_id
        assert len(eval_set.gallery_ids) == small_spec.test_ids + small_spec.distractor_ids
        # exactly one true match per drone query
        for gid in eval_set.query_ids:
            assert (eval_set.gallery_ids == gid).sum() == 1

    def test_s2d_has_views_per_id_matches(self, small_spec, small_dataset):
        eval_set = D.load_eval_set(small_dataset, W.StyleKind.SNOW, D.Task.SAT_TO_DRONE)
        assert len(eval_set.query_ids) == small_spec.test_ids
        for gid in eval_set.query_ids:
            assert (eval_set.gallery_ids == gid).sum() == small_spec.views_per_id

    def test_normal_condition_is_unstyled(self, small_dataset):
        eval_set = D.load_eval_set(small_dataset, W.StyleKind.NORMAL, D.Task.DRONE_TO_SAT)
        gid = small_dataset.test_ids[0]
        np.testing.assert_array_equal(
            eval_set.query_images[0], small_dataset.drone_image("test", gid, 0))

    def test_styling_is_frozen(self, small_dataset):
        a = D.load_eval_set(small_dataset, W.UNSEEN_COMPOSITE, D.Task.DRONE_TO_SAT)
        b = D.load_eval_set(small_dataset, W.UNSEEN_COMPOSITE, D.Task.DRONE_TO_SAT)
        np.testing.assert_array_equal(a.query_images, b.query_images)

    def test_unknown_condition_rejected(self, small_dataset):
        with pytest.raises(UsageError):
            D.load_eval_set(small_dataset, "sandstorm", D.Task.DRONE_TO_SAT)
