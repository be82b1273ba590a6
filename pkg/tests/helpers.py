import numpy as np

from core.numerics import evaluate, finite_difference_gradient, trace


def assert_gradients_match(fn, arrays, rtol=1e-4, atol=1e-6, h=1e-4):
    """Reverse-mode gradients of the scalar fn(*vars) against central differences, in float64"""
    names = [f"a{i}" for i in range(len(arrays))]
    graph, out = trace(lambda **kw: fn(*[kw[n] for n in names]), dict(zip(names, arrays)), dtype=np.float64)
    grads = graph.gradients(out)
    for i, name in enumerate(names):
        def f(x, i=i):
            args = list(arrays)
            args[i] = x
            return float(evaluate(fn, *args))

        expected = finite_difference_gradient(f, arrays[i], h)
        np.testing.assert_allclose(grads[name], expected, rtol=rtol, atol=atol, err_msg=name)


def weighted_sum(y, seed=100):
    """Scalar reduction with fixed random weights so every output element matters"""
    w = np.random.default_rng(seed).normal(size=y.shape)
    return y.graph.sum(y * w)
