import numpy as np
import pytest

from core.encoder import FeatureGrid
from core.prototype_head import (ProtoGrid, activation_map, channel_softmax, channel_softmax_var,
                                 presence_pool, presence_var)
from tests.helpers import assert_gradients_match, weighted_sum


def _grid(values):
    return ProtoGrid(np.asarray(values, dtype=np.float64))


class TestChannelSoftmax:
    def test_zero_features_are_uniform(self):
        g = channel_softmax(FeatureGrid(np.zeros((2, 3, 4))))
        np.testing.assert_allclose(g.values, 0.25)

    def test_known_logits(self):
        g = channel_softmax(FeatureGrid(np.array([[[1.0, 2.0, 3.0]]])))
        np.testing.assert_allclose(g.values[0, 0], [0.09003, 0.24473, 0.66524], atol=1e-5)

    def test_shift_at_one_location(self):
        z = np.random.default_rng(0).normal(size=(2, 2, 5))
        shifted = z.copy()
        shifted[1, 0] += 7.0
        np.testing.assert_allclose(channel_softmax(FeatureGrid(shifted)).values,
                                   channel_softmax(FeatureGrid(z)).values, atol=1e-12)

    @pytest.mark.parametrize("seed", range(5))
    def test_simplex_at_every_location(self, seed):
        g = channel_softmax(FeatureGrid(np.random.default_rng(seed).normal(scale=5.0, size=(3, 4, 6))))
        np.testing.assert_allclose(g.values.sum(axis=-1), 1.0, atol=1e-12)
        assert np.all((g.values > 0) & (g.values < 1))


class TestPresence:
    def test_uniform_grid(self):
        pv = presence_pool(_grid(np.full((3, 3, 4), 0.25)))
        np.testing.assert_allclose(pv.p, 0.25)

    def test_one_hot_location(self):
        values = np.full((2, 2, 2), 0.5)
        values[1, 0] = [1.0, 0.0]
        pv = presence_pool(_grid(values))
        assert pv.p[0] == 1.0
        assert pv.argmax_locations[0] == (1, 0)

    def test_known_position(self):
        values = np.array([[0.1, 0.4], [0.3, 0.2]])[:, :, None]
        pv = presence_pool(_grid(values))
        assert pv.p[0] == pytest.approx(0.4)
        assert pv.argmax_locations[0] == (0, 1)

    def test_ties_pick_first_row_major_location(self):
        values = np.array([[0.2, 0.5], [0.5, 0.1]])[:, :, None]
        assert presence_pool(_grid(values)).argmax_locations[0] == (0, 1)

    @pytest.mark.parametrize("seed", range(5))
    def test_argmax_location_holds_the_presence(self, seed):
        g = channel_softmax(FeatureGrid(np.random.default_rng(seed).normal(size=(3, 4, 5))))
        pv = presence_pool(g)
        for d, (row, col) in enumerate(pv.argmax_locations):
            assert g.values[row, col, d] == pv.p[d]
            assert pv.p[d] == g.values[:, :, d].max()

    def test_presence_is_monotone(self):
        values = np.random.default_rng(1).uniform(0.1, 0.5, size=(2, 2, 3))
        raised = values.copy()
        raised[0, 1, 2] = 0.9
        assert presence_pool(_grid(raised)).p[2] >= presence_pool(_grid(values)).p[2]


class TestActivationMap:
    def test_identity_size(self):
        values = np.random.default_rng(0).random((4, 4, 2))
        amap = activation_map(_grid(values), 1, (4, 4))
        np.testing.assert_allclose(amap.raster, values[:, :, 1])
        assert amap.size == (4, 4)

    def test_constant_channel(self):
        amap = activation_map(_grid(np.full((2, 2, 1), 0.3)), 0, (10, 6))
        assert amap.raster.shape == (6, 10)
        np.testing.assert_allclose(amap.raster, 0.3)

    def test_corner_upsampling(self):
        values = np.array([[0.0, 0.0], [0.0, 1.0]])[:, :, None]
        raster = activation_map(_grid(values), 0, (4, 4)).raster
        for i in range(4):
            for j in range(4):
                assert raster[i, j] == pytest.approx((i / 3) * (j / 3))
        assert raster.max() == raster[3, 3] == pytest.approx(1.0)

    def test_values_in_unit_interval(self):
        g = channel_softmax(FeatureGrid(np.random.default_rng(2).normal(size=(3, 3, 4))))
        raster = activation_map(g, 2, (17, 13)).raster
        assert raster.min() >= 0.0 and raster.max() <= 1.0

    def test_grid_aligned_maximum_equals_presence(self):
        g = channel_softmax(FeatureGrid(np.random.default_rng(3).normal(size=(2, 2, 3))))
        pv = presence_pool(g)
        for d in range(3):
            assert activation_map(g, d, (4, 4)).raster.max() == pytest.approx(pv.p[d])

    def test_peak_between_pixels_keeps_presence(self):
        # 3 * 31 / 3 is not an integer, so without snapping node (1, 2) would fall between pixels
        logits = np.zeros((4, 4, 2))
        logits[1, 2, 0] = 5.0
        g = channel_softmax(FeatureGrid(logits))
        p = presence_pool(g).p[0]
        raster = activation_map(g, 0, (32, 32)).raster
        assert p == pytest.approx(0.99331, abs=1e-5)
        assert abs(raster.max() - p) <= 1e-6
        assert np.unravel_index(np.argmax(raster), raster.shape) == (10, 21)

    @pytest.mark.parametrize("grid,target", [((3, 5), (13, 17)), ((4, 4), (30, 30)), ((6, 7), (64, 40))])
    def test_non_aligned_maximum_equals_presence(self, grid, target):
        g = channel_softmax(FeatureGrid(np.random.default_rng(5).normal(scale=2.0, size=(*grid, 4))))
        pv = presence_pool(g)
        for d in range(4):
            raster = activation_map(g, d, target).raster
            assert abs(raster.max() - pv.p[d]) <= 1e-6

    @pytest.mark.parametrize("d", [-1, 3])
    def test_prototype_out_of_range(self, d):
        with pytest.raises(IndexError):
            activation_map(_grid(np.zeros((2, 2, 3))), d, (4, 4))


def _separated_logits(rng, shape, gap=1e-2):
    """Draw logits until every channel has a clear maximum over locations"""
    while True:
        z = rng.normal(size=shape)
        p = np.exp(z - z.max(axis=-1, keepdims=True))
        p /= p.sum(axis=-1, keepdims=True)
        flat = np.sort(p.reshape(shape[0], -1, shape[-1]), axis=1)
        if np.all(flat[:, -1] - flat[:, -2] > gap):
            return z


@pytest.mark.parametrize("seed", range(10))
def test_presence_gradient_matches_finite_differences(seed):
    z = _separated_logits(np.random.default_rng(seed), (2, 2, 2, 3))

    def fn(v):
        return weighted_sum(presence_var(v.graph, channel_softmax_var(v.graph, v)))

    assert_gradients_match(fn, [z])
