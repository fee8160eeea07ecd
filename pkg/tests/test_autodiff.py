import numpy as np
import pytest
from hypothesis import given, strategies as st

from ceql.autodiff import backward, far_from_guards, finite_difference_oracle, gradient_pairs
from ceql.bench import per_sample_gradient
from ceql.complexmath import OperatorKind as Op
from ceql.errors import EmptyBatch
from ceql.graph import InitPolicy, LayerSpec, build_network, default_library
from ceql.loss import LossSpec
from ceql.train import make_engine

from conftest import A_EDGE, division_network, identity_network

SPEC = LossSpec("mse", lambda_im=1e-3, lambda_l1=1e-4, lambda_arg=0.5)


def rel_err(a, b):
    return np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-12)


def test_division_closed_form():
    # d/dRe(a) of (1/(x+a) - 1/x)^2 at a = 1, x = 1 is 2*g with g = a/(x(x+a)^3)
    net = division_network(1.0)
    _, grad = backward(net, np.array([[1.0]]), np.array([1.0]), LossSpec())
    e = net.edge_id(*A_EDGE)
    assert gradient_pairs(net, grad)[e, 0] == pytest.approx(0.25)
    assert per_sample_gradient(1.0, 1.0) == pytest.approx(1 / 8)


def test_identity_matches_oracle():
    net = identity_network(0.7 + 0.2j, 1.3 - 0.1j)
    X = np.array([[0.5], [-1.0], [2.0]])
    y = np.array([0.1, 0.2, 0.3])
    spec = LossSpec("mse", 0.1, 0.1, 0.0)
    _, g = backward(net, X, y, spec)
    assert np.max(np.abs(g - finite_difference_oracle(net, X, y, spec))) < 1e-8


def test_division_off_pole_matches_oracle():
    net = division_network(1.5 + 0.5j)
    X = np.linspace(-3, 3, 10).reshape(-1, 1)
    _, g = backward(net, X, 1 / X[:, 0], LossSpec())
    assert rel_err(g, finite_difference_oracle(net, X, 1 / X[:, 0], LossSpec())) < 1e-5


def test_flagged_samples_excluded_identically():
    net = division_network(0.0)
    X = np.array([[0.0], [1.0], [2.0]])
    y = np.array([0.0, 1.0, 0.4])
    _, g = backward(net, X, y, LossSpec())
    _, g1 = backward(net, X[1:], y[1:], LossSpec())
    assert np.array_equal(g, g1)
    assert rel_err(g, finite_difference_oracle(net, X, y, LossSpec())) < 1e-5


def test_all_flagged_raises():
    net = division_network(0.0)
    with pytest.raises(EmptyBatch):
        backward(net, np.array([[0.0]]), np.array([1.0]), LossSpec())


def test_disconnected_weight_has_zero_gradient():
    net = build_network(1, default_library(), True, seed=4)
    # drop every output edge but the first: upstream of other columns becomes dead
    out = net.n_blocks - 1
    for row in range(1, net.shapes[out][0]):
        if net.block(net.structural, out)[row, 0]:
            net.set_edge(out, row, 0, 0.0, active=False)
    _, g = backward(net, np.array([[0.3], [0.9]]), np.array([1.0, 2.0]), LossSpec())
    # weights feeding layer-2 column 4 (sqrt) no longer reach the output
    col = net.block(g, 1)[:, 4]
    assert np.all(col == 0)


def test_oracle_step_bounds():
    with pytest.raises(ValueError):
        finite_difference_oracle(identity_network(), np.ones((1, 1)), np.ones(1), LossSpec(), h=1e-2)


@given(st.integers(0, 10_000), st.floats(0.1, 100.0))
def test_gradient_linearity(seed, alpha):
    net = build_network(1, default_library(), True, seed=seed)
    X = np.random.default_rng(seed).uniform(-2, 2, (8, 1))
    from ceql.graph import forward_batch
    tr = forward_batch(net, X)
    if not tr.valid.any():
        return
    y = tr.prediction  # exact fit: only the penalties carry gradient
    spec = LossSpec("mse", 1e-3, 1e-4, 0.5)
    scaled = LossSpec("mse", alpha * 1e-3, alpha * 1e-4, alpha * 0.5)
    p, g = backward(net, X, y, spec)
    pa, ga = backward(net, X, y, scaled)
    assert pa.total == pytest.approx(alpha * p.total, rel=1e-12)
    np.testing.assert_allclose(ga, alpha * g, rtol=1e-12, atol=1e-300)


@given(st.integers(0, 10_000))
def test_imag_gradient_only_through_holomorphic_ops(seed):
    spec = LayerSpec((Op.IDENTITY, Op.SQUARE, Op.CONSTANT), (Op.MULTIPLY,))
    net = build_network(1, [spec, spec], True, InitPolicy(-1, 1, 0, 0), seed=seed)
    X = np.random.default_rng(seed).uniform(-2, 2, (8, 1))
    _, g = backward(net, X, np.cos(X[:, 0]), LossSpec())
    assert np.all(g.imag == 0)


@given(st.floats(-3, 3), st.floats(-3, 3))
def test_per_sample_sign(x, a):
    if abs(x) < 1e-3 or abs(x + a) < 1e-3 or abs(a) < 1e-9:
        return
    g = per_sample_gradient(x, a)
    assert np.sign(g) == np.sign(a) * np.sign(x) * np.sign(x + a)


@pytest.mark.parametrize("seed", range(12))
def test_random_networks_match_oracle(seed):
    rng = np.random.default_rng(seed)
    net = build_network(1, default_library(), True, seed=seed)
    X = rng.uniform(-2, 2, (8, 1))
    keep = far_from_guards(net, X)
    if not keep.any():
        pytest.skip("every sample sits in a guard neighbourhood")
    X = X[keep]
    y = rng.normal(size=len(X))
    _, g = backward(net, X, y, SPEC)
    assert rel_err(g, finite_difference_oracle(net, X, y, SPEC)) < 1e-5


@pytest.mark.parametrize("seed", range(6))
def test_numba_engine_matches_numpy(seed):
    rng = np.random.default_rng(seed)
    net = build_network(2, default_library(), True, seed=seed)
    X = rng.uniform(-2, 2, (32, 2))
    y = rng.normal(size=32)
    p_ref, g_ref, _ = make_engine(net, "numpy").evaluate(X, y, SPEC)
    p_fast, g_fast, _ = make_engine(net, "numba").evaluate(X, y, SPEC)
    assert p_fast.total == pytest.approx(p_ref.total, rel=1e-12)
    assert p_fast.n_flagged == p_ref.n_flagged
    np.testing.assert_allclose(g_fast, g_ref, rtol=1e-9, atol=1e-12)
