import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ceql.errors import InvalidConfig
from ceql.graph import active_edge_count, build_network, default_library, forward_batch
from ceql.loss import LossSpec
from ceql.train import (IMPACT_ITERATIVE, THRESHOLD_ONCE, Adam, PhaseConfig, PhaseSchedule,
                        PlateauPolicy, PrunePolicy, cascade_cleanup, default_schedule,
                        edge_impacts, impact_prune, output_connected, run_training,
                        threshold_prune)

from conftest import affine_network

X = np.linspace(0.1, 2.0, 32).reshape(-1, 1)
Y = 1.87 * X[:, 0] + 2.01


def random_net(seed, drop=0.0):
    net = build_network(1, default_library(), True, seed=seed)
    if drop:
        rng = np.random.default_rng(seed + 1000)
        net.deactivate(np.flatnonzero(rng.random(net.n_edges) < drop))
    return net


def test_default_schedule_values():
    s = default_schedule()
    assert [p.epochs for p in s.phases] == [100_000, 200_000, 50_000]
    assert s.phases[0].pruning.kind == THRESHOLD_ONCE
    assert s.phases[1].pruning == PrunePolicy(IMPACT_ITERATIVE, interval_epochs=10_000,
                                              fraction=0.1, min_edges=15)
    assert s.phases[2].lr_plateau == PlateauPolicy(2000, 0.1, 1e-5)
    assert s.phases[2].effective_loss.lambda_l1 == 0.0
    assert (s.convergence_threshold, s.convergence_patience) == (1e-7, 2000)


def test_schedule_roundtrip_and_scaling():
    s = default_schedule()
    assert PhaseSchedule.from_dict(s.to_dict()) == s
    half = s.scaled(0.5)
    assert [p.epochs for p in half.phases] == [50_000, 100_000, 25_000]
    assert half.phases[1].pruning.interval_epochs == 5_000


def test_schedule_rejects_bad_policies():
    with pytest.raises(InvalidConfig):
        PrunePolicy("random")
    with pytest.raises(InvalidConfig):
        PrunePolicy(IMPACT_ITERATIVE, fraction=1.5)
    p = PhaseConfig(10, LossSpec())
    with pytest.raises(InvalidConfig):
        PhaseSchedule((p, p))
    with pytest.raises(InvalidConfig):
        PhaseSchedule((PhaseConfig(10, LossSpec(), pruning=PrunePolicy(IMPACT_ITERATIVE)), p, p))


def test_adam_skips_inactive():
    params = np.array([1 + 1j, 2 + 2j, 3 + 3j])
    active = np.array([True, False, True])
    opt = Adam(3)
    opt.step(params, np.array([1 + 1j, 1 + 1j, -1 - 1j]), 0.1, active)
    assert params[1] == 2 + 2j
    # first Adam step moves each component by lr in the sign of the gradient
    np.testing.assert_allclose(params[[0, 2]], [0.9 + 0.9j, 3.1 + 3.1j])


@given(st.integers(0, 10_000), st.floats(1e-3, 1.0))
def test_threshold_prune_exact(seed, t):
    net = random_net(seed)
    w = net.edge_weights()
    expect = np.count_nonzero(np.abs(w) < t)
    assert threshold_prune(net, t) == expect
    live = net.edge_active()
    assert np.all(np.abs(net.edge_weights()[live]) >= t)


@settings(max_examples=25)
@given(st.integers(0, 10_000), st.integers(5, 40), st.floats(0.05, 0.5))
def test_impact_prune_floor(seed, min_edges, fraction):
    net = random_net(seed, drop=0.5)
    cascade_cleanup(net)
    before = active_edge_count(net)
    if before == 0 or not forward_batch(net, X).valid.any():
        return
    chosen = impact_prune(net, X, Y, fraction, min_edges)
    assert len(chosen) <= math.floor(fraction * before)
    cascade_cleanup(net)
    after = active_edge_count(net)
    if chosen:
        assert after >= min_edges
    if before <= min_edges:
        assert chosen == []


def test_impact_prune_keeps_important_edges():
    net = affine_network(1.87, 2.01)
    # a harmless extra edge into an otherwise unused column
    net.set_edge(1, net.source_index(1, "input", 0), 1, 1e-6)
    edges, impacts = edge_impacts(net, X, Y)
    weak = net.edge_id(1, net.source_index(1, "input", 0), 1)
    assert impacts[list(edges).index(weak)] < impacts.max()
    chosen = impact_prune(net, X, Y, 0.5, 1)
    assert weak in chosen


@settings(max_examples=40)
@given(st.integers(0, 10_000), st.floats(0.2, 0.9))
def test_cascade_cleanup_preserves_output(seed, drop):
    net = random_net(seed, drop=drop)
    Xs = np.linspace(-2, 2, 40).reshape(-1, 1)
    t0 = forward_batch(net, Xs)
    removed = cascade_cleanup(net)
    t1 = forward_batch(net, Xs)
    assert np.all(t1.valid[t0.valid])
    # removed edges carried exact zeros: outputs agree to the bit
    assert np.array_equal(t0.prediction[t0.valid], t1.prediction[t0.valid])
    assert cascade_cleanup(net) == 0
    assert removed >= 0


def test_cascade_cleanup_unfed_column():
    net = affine_network(1.87, 2.01)
    # an edge out of layer-1 act 1, whose constant column has no bias edge
    net.set_edge(1, net.source_index(1, "act", 1), 0, 5.0)
    assert cascade_cleanup(net) == 1
    assert not net.active[net.edge_pos[net.edge_id(1, net.source_index(1, "act", 1), 0)]]


def test_output_connected():
    net = affine_network(1.0, 0.0)
    assert output_connected(net)
    net.set_edge(2, net.source_index(2, "act", 0), 0, 0.0, active=False)
    assert not output_connected(net)


def tiny_schedule(epochs=(300, 300, 200)):
    return PhaseSchedule((
        PhaseConfig(epochs[0], LossSpec("mse", 1e-10, 1e-10, 1e-10), 1e-2,
                    PrunePolicy(THRESHOLD_ONCE, threshold=1e-2)),
        PhaseConfig(epochs[1], LossSpec("mse", 1e-3, 1e-7, 1e3), 1e-2,
                    PrunePolicy(IMPACT_ITERATIVE, interval_epochs=100, fraction=0.1, min_edges=15)),
        PhaseConfig(epochs[2], LossSpec("mse", 1e3, 1e-7, 1e3), 1e-2, None,
                    PlateauPolicy(50, 0.1, 1e-5), sparsity=False),
    ))


def test_run_training_history_and_floor():
    net = build_network(1, default_library(), True, seed=3)
    res = run_training(net, X, Y, tiny_schedule(), engine="numpy")
    assert res.ok
    h = res.history
    assert len(h) > 0
    phases = h.column("phase")
    assert np.all(np.diff(phases) >= 0)
    assert np.all(np.diff(h.column("epoch")) > 0)
    assert h.column("active_edges")[phases == 3].min() >= 15


def test_engines_agree_on_short_run():
    a = build_network(1, default_library(), True, seed=5)
    b = a.copy()
    sched = tiny_schedule((50, 0, 0))
    ra = run_training(a, X, Y, sched, engine="numpy")
    rb = run_training(b, X, Y, sched, engine="numba")
    np.testing.assert_allclose(ra.history.column("loss"), rb.history.column("loss"), rtol=1e-8)
    np.testing.assert_allclose(a.params, b.params, rtol=1e-7, atol=1e-10)


def test_too_few_samples():
    net = build_network(1, default_library(), True, seed=0)
    with pytest.raises(InvalidConfig):
        run_training(net, X[:1], Y[:1], tiny_schedule())
