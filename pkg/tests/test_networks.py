import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from deepprior import autodiff as ad
from deepprior.errors import ConfigurationError, DomainError
from deepprior.networks import (
    EmbeddingNet,
    ResidualMLP,
    embed_forward,
    gaussian_loglik,
    hetero_noise,
    regress_forward,
)
from deepprior.rng import make_rng


def test_zero_network_outputs_zero():
    net = ResidualMLP(d_x=1, d_z=3, width=8, n_layers=4)
    params = {k: np.zeros_like(v) for k, v in net.init(make_rng(0, "t")).items()}
    mu, s = regress_forward(np.array([0.7]), np.array([1.0, -2.0, 0.5]), params, net)
    assert mu.value == 0.0 and s.value == 0.0


def test_output_is_two_scalars_per_example():
    net = ResidualMLP(d_x=1, d_z=2, width=8, n_layers=2)
    params = net.init(make_rng(0, "t"))
    mu, s = regress_forward(np.linspace(-1, 1, 5), np.ones((5, 2)), params, net)
    assert mu.shape == (5,) and s.shape == (5,)
    mu1, s1 = regress_forward(np.array([0.3]), np.ones(2), params, net)
    assert mu1.shape == () and s1.shape == ()


def test_seeded_forward_is_bit_identical():
    def run():
        net = ResidualMLP(d_x=1, d_z=4, width=16, n_layers=12)
        params = net.init(make_rng(0, "net"))
        mu, s = regress_forward(np.zeros(1), np.zeros(4), params, net)
        return mu.value.tobytes() + s.value.tobytes()

    assert run() == run()


def test_odd_layer_count_rejected():
    with pytest.raises(ConfigurationError):
        ResidualMLP(1, 2, n_layers=3)


def test_hetero_noise_values():
    assert hetero_noise(0.0) == pytest.approx(0.051, abs=1e-15)
    assert hetero_noise(-800.0) == pytest.approx(0.001, abs=1e-15)
    assert hetero_noise(800.0) == pytest.approx(0.101, abs=1e-15)


@settings(max_examples=200, deadline=None)
@given(st.floats(-30, 30), st.floats(0.01, 5))
def test_hetero_noise_bounds_and_monotone(s, ds):
    lo, hi = hetero_noise(s), hetero_noise(s + ds)
    assert 0.001 < lo < 0.101
    assert hi > lo


def test_gaussian_loglik_values():
    expected = -0.5 * math.log(2 * math.pi) - math.log(0.051)
    assert gaussian_loglik(1.3, 1.3, 0.051) == pytest.approx(expected, abs=1e-12)
    assert expected == pytest.approx(2.056991113, abs=1e-9)
    assert gaussian_loglik(0.2, 0.2, 1 / math.sqrt(2 * math.pi)) == pytest.approx(0.0, abs=1e-14)
    with pytest.raises(DomainError):
        gaussian_loglik(0.0, 0.0, 0.0)


def test_gaussian_loglik_integrates_to_one():
    ys = np.linspace(-5, 5, 200_001)
    dens = np.exp(gaussian_loglik(ys, 0.4, 0.3))
    assert np.trapezoid(dens, ys) == pytest.approx(1.0, abs=1e-9)


def test_gaussian_loglik_node_matches_numpy():
    y, mu, sig = np.array([0.1, -0.4]), np.array([0.3, 0.2]), np.array([0.05, 0.09])
    node = gaussian_loglik(ad.Node(y), ad.Node(mu), ad.Node(sig))
    np.testing.assert_allclose(node.value, gaussian_loglik(y, mu, sig), rtol=1e-14)


def test_embedding_zero_and_permutation():
    net = EmbeddingNet(d_x=3, d_z=2, hidden=(8,), d_gamma=4)
    params = net.init(make_rng(1, "e"))
    zero = {k: np.zeros_like(v) for k, v in params.items()}
    x = make_rng(2, "x").normal(size=(6, 3))
    z = make_rng(3, "z").normal(size=(6, 2))
    np.testing.assert_array_equal(embed_forward(x, z, zero, net).value, np.zeros((6, 4)))
    perm = np.array([3, 1, 5, 0, 2, 4])
    out = embed_forward(x, z, params, net).value
    np.testing.assert_array_equal(embed_forward(x[perm], z[perm], params, net).value, out[perm])


def test_embedding_gradient_in_z():
    net = EmbeddingNet(d_x=3, d_z=2, hidden=(8, 8), d_gamma=4)
    params = net.init(make_rng(1, "e"))
    x = make_rng(2, "x").normal(size=(5, 3))
    w = make_rng(4, "w").normal(size=(5, 4))
    for seed in range(5):
        z0 = make_rng(seed, "z").normal(size=(5, 2))
        err = ad.finite_diff_check(lambda z: ad.sum_(ad.tanh(embed_forward(x, z, params, net)) * w), z0)
        assert err < 1e-4


def _regression_likelihood(net, params_nodes, x, y, z):
    mu, s = regress_forward(x, z, params_nodes, net)
    return -ad.sum_(gaussian_loglik(y, mu, hetero_noise(s)))


def test_regression_likelihood_gradient_reduced_network():
    net = ResidualMLP(d_x=1, d_z=2, width=6, n_layers=2)
    rng = make_rng(5, "data")
    x = rng.normal(size=4)
    y = rng.normal(size=4) * 0.1
    z = rng.normal(size=(4, 2))
    base = net.init(make_rng(6, "init"))
    for name in sorted(base):
        def f(v, name=name):
            params = dict(base)
            params[name] = v
            return _regression_likelihood(net, params, x, y, z)

        assert ad.finite_diff_check(f, base[name]) < 1e-4, name
    assert ad.finite_diff_check(lambda zz: _regression_likelihood(net, base, x, y, zz), z) < 1e-4
