import numpy as np
import pytest

from panolabel import (
    FeatureMap,
    SceneParams,
    TrainConfig,
    TrainSample,
    ValidationError,
    build_mixed_batch,
    default_catalog,
    gen_scene,
    train_few_shot,
)
from panolabel.estimators import FewShotHead, PanopticLabelGenerator
from panolabel.training import BOUNDARY, SEMANTIC


def small_params(sigma, **kw):
    kw.setdefault("instance_count", (1, 3))
    kw.setdefault("min_extent", 3)
    kw.setdefault("max_extent", 5)
    return SceneParams(noise_sigma=sigma, **kw)


def scene_samples(seed, kind, n=1, sigma=0.0, hp=16, params=None):
    cat = default_catalog()
    params = params or small_params(sigma)
    out = []
    for i in range(n):
        fm, pan = gen_scene((seed, i), hp, hp, 8, cat, params)
        sem, inst = pan.split()
        if kind == SEMANTIC:
            out.append(TrainSample.build(fm, semantic=sem))
        else:
            out.append(TrainSample.build(fm, instances=inst))
    return cat, out


class TestMixedBatch:
    def test_degenerate_batch_is_gt_only(self, rng):
        spec = build_mixed_batch([], ["g1", "g2"], 1, rng)
        assert spec.pseudo_samples == ()
        assert spec.gt_sample in (0, 1)

    def test_distinct_pseudo_plus_one_gt(self, rng):
        pool = list(range(10))
        gt_hits = np.zeros(3, dtype=int)
        for _ in range(1000):
            spec = build_mixed_batch(pool, ["a", "b", "c"], 4, rng)
            assert len(spec.pseudo_samples) == 3
            assert len(set(spec.pseudo_samples)) == 3
            assert all(0 <= i < 10 for i in spec.pseudo_samples)
            gt_hits[spec.gt_sample] += 1
        assert gt_hits.min() > 250  # roughly uniform over the 3 gt images

    def test_pool_too_small_rejected(self, rng):
        with pytest.raises(ValidationError):
            build_mixed_batch([1], ["g"], 3, rng)


class TestTrainFewShot:
    def test_separable_converges_fast(self):
        cat, samples = scene_samples(
            100, SEMANTIC, n=1, hp=32,
            params=small_params(0.0, instance_count=(1, 2), min_extent=10, max_extent=12),
        )
        cfg = TrainConfig(epochs=200, hidden_dims=(48, 48, 48), crop_patches=None,
                          flip_prob=0.0, seed=0)
        _, trace = train_few_shot(samples, SEMANTIC, cat.num_classes, cfg)
        assert len(trace) == 200
        assert trace[-1][1] < 0.05

    def test_fixed_seed_bit_identical(self):
        cat, samples = scene_samples(7, SEMANTIC, n=2, sigma=0.3)
        cfg = TrainConfig(epochs=5, hidden_dims=(16, 16, 16), crop_patches=(8, 8), seed=3)
        h1, t1 = train_few_shot(samples, SEMANTIC, cat.num_classes, cfg)
        h2, t2 = train_few_shot(samples, SEMANTIC, cat.num_classes, cfg)
        assert t1 == t2
        for a, b in zip(h1.weights + h1.biases, h2.weights + h2.biases):
            assert np.array_equal(a, b)

    def test_different_seed_differs(self):
        cat, samples = scene_samples(7, SEMANTIC, n=1, sigma=0.3)
        cfg1 = TrainConfig(epochs=3, hidden_dims=(16, 16, 16), seed=0, crop_patches=(8, 8))
        cfg2 = TrainConfig(epochs=3, hidden_dims=(16, 16, 16), seed=1, crop_patches=(8, 8))
        h1, _ = train_few_shot(samples, SEMANTIC, cat.num_classes, cfg1)
        h2, _ = train_few_shot(samples, SEMANTIC, cat.num_classes, cfg2)
        assert not np.array_equal(h1.weights[0], h2.weights[0])

    def test_boundary_head_trains(self):
        cat, samples = scene_samples(8, BOUNDARY, n=1, sigma=0.2)
        cfg = TrainConfig(
            epochs=30, hidden_dims=(16, 16, 16), crop_patches=None, seed=0, upsample_factor=2
        )
        head, trace = train_few_shot(samples, BOUNDARY, 2, cfg)
        assert head.out_classes == 2
        assert trace[-1][1] < trace[0][1]

    def test_boundary_all_background_crop_accepted(self):
        # A scene with no instances: retries exhaust, the all-zero target is used.
        cat = default_catalog()
        fm, pan = gen_scene(3, 12, 12, 8, cat, SceneParams(instance_count=(0, 0)))
        sample = TrainSample.build(fm, instances=pan.split()[1])
        cfg = TrainConfig(epochs=2, hidden_dims=(8, 8, 8), crop_patches=(6, 6), seed=0,
                          upsample_factor=2)
        _, trace = train_few_shot([sample], BOUNDARY, 2, cfg)
        assert len(trace) == 2

    def test_semantic_needs_matching_label_size(self):
        fm = FeatureMap(np.zeros((4, 4, 8), dtype=np.float32), patch_size=4)
        from panolabel import SemanticMap

        bad = TrainSample.build(fm, semantic=SemanticMap(np.zeros((8, 8), dtype=np.uint16)))
        with pytest.raises(ValidationError):
            train_few_shot([bad], SEMANTIC, 7, TrainConfig(epochs=1))

    def test_batch_size_two_runs(self):
        cat, samples = scene_samples(11, SEMANTIC, n=4, sigma=0.2)
        cfg = TrainConfig(epochs=2, batch_size=2, hidden_dims=(8, 8, 8), crop_patches=(8, 8), seed=0)
        _, trace = train_few_shot(samples, SEMANTIC, cat.num_classes, cfg)
        assert len(trace) == 4  # 4 samples / batch 2 = 2 steps per epoch

    def test_feature_variants_are_sampled(self):
        cat = default_catalog()
        fm, pan = gen_scene(5, 12, 12, 8, cat, small_params(0.2))
        fm2 = FeatureMap(fm.data + 0.01, patch_size=fm.patch_size)
        sample = TrainSample.build([fm, fm2], semantic=pan.split()[0])
        cfg = TrainConfig(epochs=4, hidden_dims=(8, 8, 8), crop_patches=(6, 6), seed=0)
        _, trace = train_few_shot([sample], SEMANTIC, cat.num_classes, cfg)
        assert len(trace) == 4


class TestEstimators:
    def test_few_shot_head_estimator(self):
        cat = default_catalog()
        fm, pan = gen_scene(21, 16, 16, 8, cat, small_params(0.2))
        est = FewShotHead(
            kind=SEMANTIC, num_classes=cat.num_classes, hidden_dims=(16, 16, 16),
            epochs=30, crop_patches=None, seed=0,
        )
        est.fit([fm], [pan.split()[0]])
        probs = est.predict_proba(fm, scales=(1,))
        assert probs.data.shape == (64, 64, cat.num_classes)
        params = est.get_params()
        assert params["epochs"] == 30 and params["kind"] == SEMANTIC

    def test_unfitted_predict_raises(self):
        from sklearn.exceptions import NotFittedError

        est = FewShotHead(num_classes=4)
        with pytest.raises(NotFittedError):
            est.predict_proba(FeatureMap(np.zeros((2, 2, 3), dtype=np.float32)))

    def test_label_generator_fit_predict(self):
        cat = default_catalog()
        params = small_params(0.2)
        scenes = [gen_scene((31, i), 16, 16, 8, cat, params) for i in range(3)]
        gen = PanopticLabelGenerator(
            cat, hidden_dims=(16, 16, 16), epochs=40, crop_patches=None, seed=0,
            boundary_upsample=2, sem_scales=(1,), bnd_scales=(1, 2),
            min_blob_area=40, min_instance_area=20,
        )
        gen.fit([fm for fm, _ in scenes], [p for _, p in scenes])
        pred = gen.predict(scenes[0][0])
        assert pred.entries.shape == (64, 64)
        pred.validate_against(cat)
        assert gen.get_params()["min_blob_area"] == 40
