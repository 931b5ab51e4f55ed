import numpy as np
import pytest

from panolabel import (
    FeatureMap,
    ProbMap,
    ScaleSet,
    ValidationError,
    predict_multiscale,
    predict_single,
    scale_fuse,
    tile_split,
)
from panolabel.grids import resample_array, softmax_array
from panolabel.heads import head_forward, init_head


def make_feats(rng, hp=4, wp=4, c=6, patch=2):
    return FeatureMap(rng.standard_normal((hp, wp, c)).astype(np.float32), patch_size=patch)


class TestTileSplit:
    def test_scale_one_is_whole_grid(self, rng):
        fm = make_feats(rng)
        tiles = tile_split(fm, 1)
        assert len(tiles) == 1
        assert np.array_equal(tiles[0].features.data, fm.data)

    def test_even_split_partitions(self, rng):
        fm = make_feats(rng, 4, 4)
        tiles = tile_split(fm, 2)
        assert [(t.row0, t.row1, t.col0, t.col1) for t in tiles] == [
            (0, 2, 0, 2), (0, 2, 2, 4), (2, 4, 0, 2), (2, 4, 2, 4)
        ]
        cover = np.zeros((4, 4), dtype=int)
        for t in tiles:
            cover[t.row0 : t.row1, t.col0 : t.col1] += 1
        assert np.all(cover == 1)

    def test_remainder_goes_to_last_tile(self, rng):
        fm = make_feats(rng, 5, 5)
        tiles = tile_split(fm, 2)
        sizes = {(t.row1 - t.row0, t.col1 - t.col0) for t in tiles}
        assert sizes == {(2, 2), (2, 3), (3, 2), (3, 3)}

    def test_partition_property_all_scales(self, rng):
        fm = make_feats(rng, 7, 9)
        for s in (1, 2, 3, 4, 5, 6, 7):
            cover = np.zeros((7, 9), dtype=int)
            for t in tile_split(fm, s):
                cover[t.row0 : t.row1, t.col0 : t.col1] += 1
            assert np.all(cover == 1)

    def test_oversized_scale_rejected(self, rng):
        with pytest.raises(ValidationError):
            tile_split(make_feats(rng, 3, 3), 4)


class TestScaleFuse:
    def _prob(self, arr):
        return ProbMap(np.asarray(arr, dtype=np.float32))

    def test_mean_of_identical_maps_is_exact(self, rng):
        pm = self._prob(softmax_array(rng.standard_normal((3, 3, 4))).astype(np.float32))
        fused = scale_fuse([pm, pm, pm])
        assert np.array_equal(fused.data, pm.data)

    def test_single_map_identity(self, rng):
        pm = self._prob(softmax_array(rng.standard_normal((2, 2, 3))).astype(np.float32))
        assert np.array_equal(scale_fuse([pm]).data, pm.data)

    def test_two_map_arithmetic(self):
        a = self._prob([[[0.2, 0.8]]])
        b = self._prob([[[0.6, 0.4]]])
        fused = scale_fuse([a, b])
        assert np.allclose(fused.data[0, 0], [0.4, 0.6], atol=1e-7)

    def test_permutation_invariant(self, rng):
        maps = [
            self._prob(softmax_array(rng.standard_normal((4, 4, 3))).astype(np.float32))
            for _ in range(4)
        ]
        base = scale_fuse(maps).data
        for order in ((3, 1, 0, 2), (2, 3, 1, 0)):
            assert np.array_equal(scale_fuse([maps[i] for i in order]).data, base)

    def test_empty_list_rejected(self):
        with pytest.raises(ValidationError):
            scale_fuse([])


class TestPredictMultiscale:
    def _head(self, seed, c=6, n=4, factor=2):
        return init_head(c, (8, 8, 8), n, factor, np.random.default_rng(seed))

    def test_scale_one_equals_single_pass(self, rng):
        fm = make_feats(rng, 6, 6)
        head = self._head(0)
        multi = predict_multiscale(head, fm, ScaleSet((1,)), 12, 12)
        single = predict_single(head, fm, 12, 12)
        assert np.array_equal(multi.data, single.data)

    def test_constant_features_constant_probs(self):
        fm = FeatureMap(np.ones((6, 6, 6), dtype=np.float32), patch_size=2)
        head = self._head(1)
        out = predict_multiscale(head, fm, ScaleSet((1, 2, 3)), 12, 12)
        assert np.allclose(out.data, out.data[0, 0], atol=1e-6)

    def test_matches_hand_composed_oracle(self, rng):
        # [DERIVED] independent composition of the split/predict/paste/mean steps.
        fm = make_feats(rng, 4, 4)
        head = self._head(2)
        out_h = out_w = 8
        per_scale = []
        for s in (1, 2):
            canvas = np.zeros((out_h, out_w, 4), dtype=np.float64)
            edges = [i * (4 // s) for i in range(s)] + [4]
            for i in range(s):
                for j in range(s):
                    r0, r1 = edges[i], edges[i + 1]
                    c0, c1 = edges[j], edges[j + 1]
                    tile = fm.data[r0:r1, c0:c1]
                    blown = resample_array(tile, 4, 4)
                    probs = softmax_array(head_forward(head, blown)).astype(np.float32)
                    pr0, pr1 = r0 * out_h // 4, r1 * out_h // 4
                    pc0, pc1 = c0 * out_w // 4, c1 * out_w // 4
                    canvas[pr0:pr1, pc0:pc1] = resample_array(probs, pr1 - pr0, pc1 - pc0)
            per_scale.append(canvas)
        expected = (per_scale[0] + per_scale[1]) / 2
        got = predict_multiscale(head, fm, ScaleSet((1, 2)), out_h, out_w)
        assert np.allclose(got.data, expected, atol=1e-5)

    def test_deterministic(self, rng):
        fm = make_feats(rng, 5, 5)
        head = self._head(3)
        a = predict_multiscale(head, fm, ScaleSet((1, 2, 3)), 10, 10)
        b = predict_multiscale(head, fm, ScaleSet((1, 2, 3)), 10, 10)
        assert np.array_equal(a.data, b.data)


def test_scaleset_validation():
    with pytest.raises(ValidationError):
        ScaleSet(())
    with pytest.raises(ValidationError):
        ScaleSet((1, 1))
    with pytest.raises(ValidationError):
        ScaleSet((0, 2))
