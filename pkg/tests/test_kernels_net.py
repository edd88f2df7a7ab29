import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dkgp import autodiff as ad
from dkgp.autodiff import ParamVector
from dkgp.feature_net import (
    Layer,
    FeatureNetParams,
    NetSpec,
    forward,
    init_params,
    linear_params,
    load_params,
    save_params,
)
from dkgp.kernels import (
    ArdSeParams,
    DeepKernel,
    ard_se_matrix,
    correlation_profile,
    deep_kernel_matrix,
    mean_abs_correlation,
)


def se(sf2=1.0, l2=(1.0,)):
    return ArdSeParams(math.log(sf2), np.log(np.asarray(l2, dtype=float)))


def brute_se(sf2, l2, A, B):
    out = np.empty((len(A), len(B)))
    for i, a in enumerate(A):
        for j, b in enumerate(B):
            out[i, j] = sf2 * math.exp(-0.5 * sum((a[d] - b[d]) ** 2 / l2[d] for d in range(len(a))))
    return out


def test_se_examples():
    x = np.array([[0.3, -1.0]])
    assert ard_se_matrix(se(2.5, (1.0, 3.0)), x)[0, 0] == pytest.approx(2.5, abs=1e-15)
    k = ard_se_matrix(se(), np.array([[0.0]]), np.array([[math.sqrt(2)]]))
    assert k[0, 0] == pytest.approx(math.exp(-1), rel=1e-14)
    pruned = ard_se_matrix(se(1.7, (1.0, 1e12)), np.array([[0.0, 0.0]]), np.array([[0.0, 3.0]]))
    assert abs(pruned[0, 0] - 1.7) < 1e-6


def test_se_matches_brute_force_and_dimension_errors():
    rng = np.random.default_rng(0)
    A, B = rng.normal(size=(4, 3)), rng.normal(size=(5, 3))
    l2 = [0.5, 2.0, 1.3]
    np.testing.assert_allclose(ard_se_matrix(se(1.4, l2), A, B), brute_se(1.4, l2, A, B), rtol=1e-12)
    with pytest.raises(ValueError):
        ard_se_matrix(se(1.0, l2), A, rng.normal(size=(2, 2)))
    with pytest.raises(ValueError):
        ard_se_matrix(se(1.0, [1.0, 1.0]), A)


@settings(max_examples=30, deadline=None)
@given(n=st.integers(2, 50), q=st.integers(1, 4), seed=st.integers(0, 2**31 - 1))
def test_se_gram_symmetric_psd(n, q, seed):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, q)) * 2
    sf2 = float(np.exp(rng.normal()))
    K = ard_se_matrix(se(sf2, np.exp(rng.normal(size=q))), X)
    assert np.max(np.abs(K - K.T)) <= 1e-12
    assert np.linalg.eigvalsh(K).min() >= -1e-8 * sf2


def test_se_row_permutation():
    rng = np.random.default_rng(1)
    A, B = rng.normal(size=(6, 2)), rng.normal(size=(3, 2))
    p = rng.permutation(6)
    K = ard_se_matrix(se(1.0, (0.7, 1.9)), A, B)
    np.testing.assert_array_equal(ard_se_matrix(se(1.0, (0.7, 1.9)), A[p], B), K[p])


def test_deep_kernel_identity_and_constant_networks():
    rng = np.random.default_rng(2)
    X = rng.normal(size=(7, 2))
    base = se(1.3, (0.8, 1.5))
    ident = DeepKernel(base, linear_params(np.eye(2)))
    np.testing.assert_array_equal(deep_kernel_matrix(ident, X), ard_se_matrix(base, X))
    const = DeepKernel(base, linear_params(np.zeros((2, 2)), np.array([0.4, -0.2])))
    np.testing.assert_allclose(deep_kernel_matrix(const, X), np.full((7, 7), 1.3), rtol=1e-14)
    assert mean_abs_correlation(const, X) == pytest.approx(1.0, abs=1e-14)
    rho = correlation_profile(const, X[0], np.linspace(-5, 5, 30)[:, None].repeat(2, axis=1))
    assert np.all(np.abs(rho - 1) < 1e-3)


def test_deep_kernel_random_network_psd():
    net = init_params(NetSpec(3, (30, 20), 2, False, seed=5))
    X = np.random.default_rng(3).normal(size=(20, 3))
    K = deep_kernel_matrix(DeepKernel(se(1.0, (1.0, 1.0)), net), X)
    assert np.linalg.eigvalsh(K).min() >= -1e-8


def test_correlation_profile_properties():
    k = se(2.0, (0.5,))
    grid = np.linspace(-3, 3, 61)[:, None]
    rho = correlation_profile(k, [[0.0]], grid)
    assert rho[30] == pytest.approx(1.0, abs=1e-15)
    np.testing.assert_allclose(rho, rho[::-1], rtol=1e-14)
    assert np.all((rho > 0) & (rho <= 1))
    with pytest.raises(ValueError):
        correlation_profile(ArdSeParams(-np.inf, np.zeros(1)), [[0.0]], grid)


def test_mean_abs_correlation():
    X = np.array([[0.0], [1.0], [2.5], [4.0]])
    oracle = np.mean([math.exp(-0.5 * (a - b) ** 2) for i, a in enumerate(X[:, 0]) for b in X[i + 1 :, 0]])
    assert mean_abs_correlation(se(3.0, (1.0,)), X) == pytest.approx(oracle, rel=1e-13)
    assert mean_abs_correlation(se(1.0, (1e-8,)), X) < 1e-12
    with pytest.raises(ValueError):
        mean_abs_correlation(se(), X[:1])


# ---------------------------------------------------------------------------
# feature network


def test_init_is_deterministic_with_zero_biases():
    spec = NetSpec(2, (), 3, seed=9)
    a, b = init_params(spec), init_params(spec)
    np.testing.assert_array_equal(a.layers[0].W, b.layers[0].W)
    assert all(np.all(layer.b == 0) for layer in a.layers)


def test_glorot_variance():
    W = init_params(NetSpec(200, (), 200, seed=1)).layers[0].W
    assert abs(W.var() / (2 / 400) - 1) < 0.2


def test_forward_examples():
    X = np.random.default_rng(0).normal(size=(4, 3))
    zero = FeatureNetParams((Layer(np.zeros((5, 3)), np.zeros(5), True), Layer(np.zeros((2, 5)), np.zeros(2), False)))
    np.testing.assert_array_equal(forward(zero, X), np.zeros((4, 2)))
    np.testing.assert_array_equal(forward(linear_params(np.eye(3)), X), X)
    assert forward(linear_params([[1.0]], relu=True), np.array([[-1.0]]))[0, 0] == 0.0
    with pytest.raises(ValueError):
        forward(linear_params(np.eye(2)), X)


def test_toy_default_spec():
    spec = NetSpec(1)
    net = init_params(spec)
    assert spec.hidden == (100, 50) and spec.feature_dim == 2
    assert [layer.relu for layer in net.layers] == [True, True, False]


def test_positive_homogeneity_of_first_layer():
    net = init_params(NetSpec(3, (4,), 2, seed=2))
    X = np.random.default_rng(5).normal(size=(6, 3))
    W = net.layers[0].W.copy()
    W[1] *= 2.5
    pre = X @ net.layers[0].W.T
    pre_scaled = X @ W.T
    np.testing.assert_allclose(pre_scaled[:, 1], 2.5 * pre[:, 1], rtol=1e-14)


def test_forward_gradient_away_from_kinks():
    rng = np.random.default_rng(7)
    net = init_params(NetSpec(3, (8, 6), 2, seed=0))
    X = rng.normal(size=(10, 3))
    theta = ParamVector({k: np.asarray(v) for k, v in net.named_arrays().items()})
    f = lambda v: ad.mean(forward(net.replace_arrays(v), X) ** 2)
    # distance of every hidden pre-activation from zero bounds the FD step safely
    h = X
    for layer in net.layers[:-1]:
        h = h @ layer.W.T + layer.b
        assert np.min(np.abs(h)) > 1e-3
        h = np.maximum(h, 0)
    assert ad.check_gradient(f, theta) < 1e-5


def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(8)
    p = ParamVector({"net.layer0.W": rng.normal(size=(3, 2)), "log_sigma_f2": np.array(0.1 + 1e-17), "z": rng.normal(size=4) * 1e300})
    save_params(tmp_path / "a.params", p)
    q = load_params(tmp_path / "a.params")
    assert q.names == p.names
    assert [q.shape_of(n) for n in q.names] == [p.shape_of(n) for n in p.names]
    np.testing.assert_array_equal(q.data, p.data)
    (tmp_path / "bad.params").write_text("nonsense\n")
    with pytest.raises(ValueError):
        load_params(tmp_path / "bad.params")
