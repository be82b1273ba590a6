import numpy as np
import pytest

from core.errors import ContractViolation, NumericFailure, ShapeError
from core.numerics import (Graph, bilinear_resize, evaluate, evaluate_with_gradients,
                           finite_difference_gradient, interpolation_matrix, softmax)
from tests.helpers import assert_gradients_match, weighted_sum

SEEDS = range(10)


def _separated(rng, shape, gap=1e-2):
    """Random values whose sorted neighbours differ by at least `gap`"""
    n = int(np.prod(shape))
    values = (rng.permutation(n) + rng.uniform(0.0, 1.0 - gap, n)) * 0.1
    return values.reshape(shape)


class TestEvaluation:
    def test_square_value_and_gradient(self):
        g = Graph(np.float64)
        x = g.input("x", 3.0)
        y = x * x
        value, grads = evaluate_with_gradients(g, output=y)
        assert float(value) == pytest.approx(9.0)
        assert float(grads["x"]) == pytest.approx(6.0)

    def test_replay_with_new_input(self):
        g = Graph(np.float64)
        x = g.input("x", 3.0)
        y = x * x
        value, grads = evaluate_with_gradients(g, {"x": 4.0}, y)
        assert float(value) == pytest.approx(16.0)
        assert float(grads["x"]) == pytest.approx(8.0)

    def test_constant_output_has_zero_gradient(self):
        g = Graph(np.float64)
        x = g.input("x", [1.0, 2.0])
        y = g.sum(g.const([1.0, 1.0]))
        grads = g.gradients(y)
        np.testing.assert_array_equal(grads["x"], np.zeros(2))
        assert float(y.value) == 2.0
        assert x.shape == (2,)

    def test_log_tanh_gradient(self):
        g = Graph(np.float64)
        x = g.input("x", 1.0)
        y = g.log(g.tanh(x) + 1e-8)
        _, grads = evaluate_with_gradients(g, output=y)
        assert float(grads["x"]) == pytest.approx(0.55145, abs=1e-4)

        fd = finite_difference_gradient(lambda v: float(evaluate(lambda a: a.graph.log(a.graph.tanh(a) + 1e-8), v)),
                                        np.array(1.0))
        assert float(grads["x"]) == pytest.approx(float(fd), abs=1e-6)

    def test_non_scalar_output_is_rejected(self):
        g = Graph(np.float64)
        x = g.input("x", [1.0, 2.0])
        with pytest.raises(ContractViolation):
            g.gradients(x * 2.0)

    def test_duplicate_input_name(self):
        g = Graph()
        g.input("x", 1.0)
        with pytest.raises(ContractViolation):
            g.input("x", 2.0)

    def test_log_of_negative_names_the_node(self):
        g = Graph(np.float64)
        x = g.input("x", -1.0)
        with pytest.raises(NumericFailure) as info:
            g.log(x, name="bad_log")
        assert info.value.node == "bad_log"

    def test_shape_mismatch_is_a_shape_error(self):
        g = Graph()
        a = g.input("a", np.ones((2, 3)))
        b = g.input("b", np.ones((4, 5)))
        with pytest.raises(ShapeError):
            a @ b

    def test_gradients_are_deterministic(self):
        def run():
            g = Graph(np.float64)
            x = g.input("x", np.random.default_rng(3).normal(size=(4, 5)))
            y = weighted_sum(g.tanh(g.softmax(x, axis=-1) @ np.ones((5, 2))))
            return g.gradients(y)["x"]

        assert run().tobytes() == run().tobytes()


class TestFiniteDifference:
    def test_square(self):
        fd = finite_difference_gradient(lambda x: float(x ** 2), np.array(3.0))
        assert float(fd) == pytest.approx(6.0, abs=1e-6)

    def test_rejects_non_positive_step(self):
        with pytest.raises(ContractViolation):
            finite_difference_gradient(lambda x: float(x), np.array(1.0), h=0.0)

    def test_non_finite_function(self):
        with pytest.raises(NumericFailure):
            finite_difference_gradient(lambda x: float(np.log(x)), np.array(0.0))

    def test_softmax_component(self):
        fd = finite_difference_gradient(lambda x: float(softmax(x)[0]), np.zeros(2))
        np.testing.assert_allclose(fd, [0.25, -0.25], atol=1e-6)


class TestSoftmax:
    def test_known_values(self):
        np.testing.assert_allclose(softmax(np.array([1.0, 2.0, 3.0])), [0.09003, 0.24473, 0.66524], atol=1e-5)

    def test_shift_invariance(self):
        x = np.random.default_rng(0).normal(size=(3, 5))
        np.testing.assert_allclose(softmax(x + 100.0), softmax(x), atol=1e-12)

    def test_large_logits_stay_finite(self):
        out = softmax(np.array([1000.0, 0.0, -1000.0]))
        assert np.all(np.isfinite(out))
        assert out.sum() == pytest.approx(1.0)

    @pytest.mark.parametrize("seed", SEEDS)
    def test_rows_sum_to_one(self, seed):
        x = np.random.default_rng(seed).normal(scale=20.0, size=(6, 7))
        out = softmax(x, axis=-1)
        np.testing.assert_allclose(out.sum(axis=-1), 1.0, atol=1e-12)
        assert np.all(out > 0)


class TestInterpolation:
    def test_identity_matrix(self):
        np.testing.assert_allclose(interpolation_matrix(4, 4), np.eye(4))

    def test_corner_aligned(self):
        m = interpolation_matrix(2, 3)
        np.testing.assert_allclose(m, [[1.0, 0.0], [0.5, 0.5], [0.0, 1.0]])

    def test_bilinear_matches_scalar_oracle(self):
        grid = np.array([[0.0, 1.0], [2.0, 3.0]])
        out = bilinear_resize(grid, 4, 4)
        for i in range(4):
            for j in range(4):
                assert out[i, j] == pytest.approx(j / 3 + 2 * i / 3)

    def test_snapped_nodes_land_on_pixels(self):
        m = interpolation_matrix(4, 32, snap_nodes=True)
        for i, pixel in enumerate([0, 10, 21, 31]):
            expected = np.zeros(4)
            expected[i] = 1.0
            np.testing.assert_array_equal(m[pixel], expected)
        np.testing.assert_allclose(m.sum(axis=1), 1.0)
        assert m.min() >= 0.0

    def test_snapping_matches_plain_weights_when_aligned(self):
        np.testing.assert_allclose(interpolation_matrix(8, 64, snap_nodes=True), interpolation_matrix(8, 64))

    def test_snapping_leaves_downsampling_alone(self):
        np.testing.assert_allclose(interpolation_matrix(8, 4, snap_nodes=True), interpolation_matrix(8, 4))


# Each op is differentiated inside a scalar weighted sum and compared against
# central differences in float64.
GRADIENT_CASES = {
    "add_broadcast": (lambda a, b: weighted_sum(a + b), [(3, 4), (4,)], False),
    "mul_broadcast": (lambda a, b: weighted_sum(a * b), [(3, 4), (3, 1)], False),
    "sub_div": (lambda a, b: weighted_sum((a - b) / b), [(2, 3), (2, 3)], True),
    "matmul": (lambda a, b: weighted_sum(a @ b), [(2, 3, 4), (4, 5)], False),
    "exp": (lambda a: weighted_sum(a.graph.exp(a)), [(3, 3)], False),
    "log": (lambda a: weighted_sum(a.graph.log(a)), [(3, 3)], True),
    "tanh": (lambda a: weighted_sum(a.graph.tanh(a)), [(3, 3)], False),
    "power_cube": (lambda a: weighted_sum(a ** 3.0), [(4,)], True),
    "power_inverse": (lambda a: weighted_sum(a.graph.power(a, -1.0)), [(4,)], True),
    "power_sqrt": (lambda a: weighted_sum(a.graph.power(a, 0.5)), [(4,)], True),
    "sum_axis": (lambda a: weighted_sum(a.sum(axis=1)), [(3, 4, 2)], False),
    "mean_keepdims": (lambda a: weighted_sum(a.mean(axis=0, keepdims=True)), [(3, 4)], False),
    "softmax": (lambda a: weighted_sum(a.graph.softmax(a, axis=-1)), [(3, 5)], False),
    "softmax_axis0": (lambda a: weighted_sum(a.graph.softmax(a, axis=0)), [(3, 5)], False),
    "layer_norm": (lambda a: weighted_sum(a.graph.layer_norm(a)), [(3, 6)], False),
    "reshape_transpose": (lambda a: weighted_sum(a.reshape(4, 3).transpose(1, 0)), [(2, 6)], False),
    "concatenate": (lambda a, b: weighted_sum(a.graph.concatenate([a, b], axis=1)), [(2, 3), (2, 2)], False),
    "l2_norm": (lambda a: weighted_sum(a.graph.l2_norm(a, axis=-1)), [(3, 4)], False),
}


@pytest.mark.parametrize("case", sorted(GRADIENT_CASES))
@pytest.mark.parametrize("seed", SEEDS)
def test_reverse_mode_matches_finite_differences(case, seed):
    fn, shapes, positive = GRADIENT_CASES[case]
    rng = np.random.default_rng(seed)
    arrays = [rng.uniform(0.5, 2.0, s) if positive else rng.normal(size=s) for s in shapes]
    assert_gradients_match(fn, arrays)


@pytest.mark.parametrize("seed", SEEDS)
def test_max_and_minimum_gradients(seed):
    rng = np.random.default_rng(seed)
    x = _separated(rng, (4, 5))
    assert_gradients_match(lambda a: weighted_sum(a.max(axis=1)), [x])
    assert_gradients_match(lambda a: weighted_sum(a.graph.minimum(a, axis=0, keepdims=True)), [x])


def test_max_tie_breaks_to_first_occurrence():
    g = Graph(np.float64)
    x = g.input("x", [1.0, 3.0, 3.0])
    grads = g.gradients(x.max(axis=0))
    np.testing.assert_array_equal(grads["x"], [0.0, 1.0, 0.0])
