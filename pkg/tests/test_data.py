import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from prompt_distill import data
from prompt_distill.errors import ConfigError, DataError, TokenizationError


@pytest.fixture(scope="module")
def small():
    return data.generate_synthetic_dataset(
        data.DatasetSpec(num_classes=10, images_per_class=20, test_per_class=5, seed=3))


def digest(arr: np.ndarray) -> bytes:
    return np.ascontiguousarray(arr).tobytes()


class TestGenerator:
    def test_deterministic(self, small):
        again = data.generate_synthetic_dataset(small.spec)
        assert digest(again.train.images) == digest(small.train.images)
        assert digest(again.test.images) == digest(small.test.images)
        assert again.class_names == small.class_names == [f"class_{k}" for k in range(10)]

    def test_seed_changes_data(self, small):
        other = data.generate_synthetic_dataset(data.DatasetSpec(num_classes=10, images_per_class=20,
                                                                 test_per_class=5, seed=4))
        assert digest(other.train.images) != digest(small.train.images)

    def test_zero_noise_reproduces_prototypes(self):
        ds = data.generate_synthetic_dataset(data.DatasetSpec(num_classes=4, images_per_class=3,
                                                              test_per_class=2, noise_std=0.0))
        for img, lab in zip(ds.train.images, ds.train.labels):
            np.testing.assert_array_equal(img, ds.prototypes[lab])

    def test_train_test_are_separate_draws(self, small):
        assert not np.array_equal(small.train.images[:5], small.test.images[:5])

    def test_reference_task_is_separable(self):
        # nearest-prototype is Bayes-optimal for isotropic noise
        ds = data.generate_synthetic_dataset(data.DatasetSpec())
        assert data.nearest_prototype_accuracy(ds.train, ds.prototypes) == 1.0
        assert data.nearest_prototype_accuracy(ds.test, ds.prototypes) == 1.0

    @pytest.mark.parametrize("field,value", [("num_classes", 3), ("images_per_class", 0),
                                             ("noise_std", -1.0)])
    def test_invalid_spec(self, field, value):
        with pytest.raises(ConfigError):
            data.generate_synthetic_dataset(data.DatasetSpec(**{field: value}))


class TestSplit:
    def test_ten_classes(self):
        s = data.base_novel_split(data.class_names_for(10))
        assert s.base == (0, 1, 2, 3, 4) and s.novel == (5, 6, 7, 8, 9)

    def test_odd_count_rounds_base_up(self):
        s = data.base_novel_split(data.class_names_for(5))
        assert len(s.base) == 3 and len(s.novel) == 2

    @given(st.integers(4, 300))
    def test_disjoint_and_covering(self, n):
        s = data.base_novel_split(data.class_names_for(n))
        assert not set(s.base) & set(s.novel)
        assert sorted(s.base + s.novel) == list(range(n))
        assert len(s.base) == math.ceil(n / 2)
        assert data.base_novel_split(data.class_names_for(n)) == s

    def test_too_few_classes(self):
        with pytest.raises(ConfigError):
            data.base_novel_split(["a", "b", "c"])


class TestFewShot:
    def test_exact_counts(self, small):
        split = data.base_novel_split(small.class_names)
        fs = data.few_shot_sample(small.train, 16, split.base, seed=0)
        assert len(fs) == 80
        counts = np.bincount(fs.labels, minlength=10)
        assert all(counts[c] == 16 for c in split.base)
        assert not np.isin(fs.labels, split.novel).any()

    def test_seeds(self, small):
        split = data.base_novel_split(small.class_names)
        a = data.few_shot_sample(small.train, 4, split.base, seed=0)
        b = data.few_shot_sample(small.train, 4, split.base, seed=0)
        c = data.few_shot_sample(small.train, 4, split.base, seed=1)
        assert digest(a.images) == digest(b.images)
        assert digest(a.images) != digest(c.images)

    def test_insufficient(self, small):
        with pytest.raises(DataError, match="class 0"):
            data.few_shot_sample(small.train, 21, (0, 1), seed=0)


class TestPool:
    def test_label_free(self, small):
        pool = data.unlabeled_pool(small.train)
        assert not hasattr(pool, "labels")
        assert set(vars(pool)) == {"images", "source_indices"}
        assert len(pool) == len(small.train)

    def test_base_only(self, small):
        split = data.base_novel_split(small.class_names)
        pool = data.unlabeled_pool(small.train, "base_only", split=split)
        hidden = small.train.labels[pool.source_indices]
        assert not np.isin(hidden, split.novel).any()
        assert len(pool) == 20 * len(split.base)

    def test_cap_larger_than_class_is_everything(self, small):
        pool = data.unlabeled_pool(small.train, per_class_cap=500)
        assert len(pool) == len(small.train)

    def test_cap_arithmetic_at_imagenet_scale(self):
        # 1000 classes x 64 images per class; images kept tiny
        labels = np.repeat(np.arange(1000), 70)
        train = data.LabeledSet(np.zeros((len(labels), 2, 2), np.float32), labels, 1000)
        pool = data.unlabeled_pool(train, per_class_cap=64)
        assert len(pool) == 64_000
        assert np.all(np.bincount(labels[pool.source_indices]) == 64)


class TestAugment:
    def test_identity(self, small):
        img = small.train.images[0]
        rng = np.random.default_rng(0)
        np.testing.assert_array_equal(data.augment(img, rng, scale=1.0, flip=False), img)

    def test_flip_is_involution(self, small):
        img = small.train.images[1]
        rng = np.random.default_rng(0)
        once = data.augment(img, rng, scale=1.0, flip=True)
        assert not np.array_equal(once, img)
        np.testing.assert_array_equal(data.augment(once, rng, scale=1.0, flip=True), img)

    @settings(max_examples=50)
    @given(st.integers(0, 2**32 - 1))
    def test_shape_and_determinism(self, seed):
        img = np.arange(256, dtype=np.float32).reshape(16, 16)
        a = data.augment(img, np.random.default_rng(seed))
        b = data.augment(img, np.random.default_rng(seed))
        assert a.shape == img.shape
        np.testing.assert_array_equal(a, b)

    def test_crop_stays_within_value_range(self):
        img = np.random.default_rng(1).random((16, 16)).astype(np.float32)
        out = data.augment(img, np.random.default_rng(2), scale=0.6)
        assert img.min() - 1e-6 <= out.min() and out.max() <= img.max() + 1e-6


class TestTokenize:
    def test_template_first(self):
        vocab = data.Vocabulary(data.class_names_for(10))
        ids = data.tokenize(data.DEFAULT_TEMPLATE, "class_7", vocab)
        assert len(ids) == 5
        assert ids[:4] == vocab.template_ids() == vocab.ids(["a", "photo", "of", "a"])
        assert ids == data.tokenize(data.DEFAULT_TEMPLATE, "class_7", vocab)

    def test_unknown_word(self):
        vocab = data.Vocabulary(data.class_names_for(4))
        with pytest.raises(TokenizationError, match="zebra"):
            vocab.tokenize("zebra")


def test_manifest_round_trip(tmp_path):
    ds = data.generate_synthetic_dataset(data.DatasetSpec(num_classes=4, images_per_class=2,
                                                          test_per_class=1, image_side=4))
    path = tmp_path / "manifest.txt"
    data.write_manifest(path, ds)
    header, train, test = data.read_manifest(path)
    assert header == {"N": "4", "images_per_class": "2", "seed": "0"}
    np.testing.assert_array_equal(train.images, ds.train.images)
    np.testing.assert_array_equal(test.labels, ds.test.labels)
