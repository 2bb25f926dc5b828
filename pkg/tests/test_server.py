import math

import mpmath
import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from fedora.client import ClientState, TD3BCConfig, actor_spec_for, critic_spec_for, init_networks
from fedora.data import OfflineDataset
from fedora.nn import NetworkSpec, ParamVector
from fedora.server import (
    FederationConfig,
    ServerState,
    compute_priorities,
    compute_weights,
    federate_actor,
    federate_critic,
    fedavg_weights,
    run_round,
    sample_clients,
)

finite_J = st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=12)


def mp_softmax(J, beta):
    mpmath.mp.dps = 50
    e = [mpmath.exp(mpmath.mpf(beta) * mpmath.mpf(j)) for j in J]
    s = sum(e)
    return [float(x / s) for x in e]


def test_priorities_against_arbitrary_precision():
    p = compute_priorities([10.0, 0.0], 0.1)
    ref = mp_softmax([10, 0], "0.1")
    np.testing.assert_allclose(p, ref, atol=1e-15)
    np.testing.assert_allclose(p, [0.73106, 0.26894], atol=1e-5)


def test_priorities_uniform_cases():
    np.testing.assert_array_equal(compute_priorities([3.0] * 4, 0.1), [0.25] * 4)
    np.testing.assert_allclose(compute_priorities([1.0, 50.0, -7.0], 0.0), [1 / 3] * 3, rtol=1e-15)


def test_priorities_survive_large_values():
    p = compute_priorities([1e5, 1e5 - 10], 0.1)
    assert np.all(np.isfinite(p))
    np.testing.assert_allclose(p, mp_softmax([10, 0], "0.1"), atol=1e-12)


def test_priority_errors():
    with pytest.raises(ValueError):
        compute_priorities([], 0.1)
    with pytest.raises(ValueError):
        compute_priorities([1.0, math.nan], 0.1)


@settings(max_examples=200)
@given(finite_J, st.floats(0.0, 2.0))
def test_priorities_sum_to_one(J, beta):
    assert abs(compute_priorities(J, beta).sum() - 1.0) <= 1e-12


@settings(max_examples=200)
@given(finite_J, st.floats(0.0, 1.0), st.floats(-1e3, 1e3))
def test_priorities_shift_invariant(J, beta, c):
    a = compute_priorities(J, beta)
    b = compute_priorities([j + c for j in J], beta)
    np.testing.assert_allclose(a, b, atol=1e-9)


@settings(max_examples=200)
@given(st.floats(-100, 100), st.floats(-100, 100), st.floats(0.001, 1.0))
def test_priorities_monotone(a, b, beta):
    assume(beta * abs(a - b) > 1e-9)
    p = compute_priorities([a, b], beta)
    assert (p[0] > p[1]) == (a > b)


def test_weights_examples():
    # direct evaluation: 3655.3 / 6344.7 and 2689.4 / 6344.7
    np.testing.assert_allclose(compute_weights([0.73106, 0.26894], [5000, 10000]),
                               [3655.3 / 6344.7, 2689.4 / 6344.7], rtol=1e-14)
    np.testing.assert_allclose(compute_weights([0.73106, 0.26894], [5000, 10000]),
                               [0.57612, 0.42388], atol=1e-5)
    np.testing.assert_array_equal(compute_weights([1.0, 0.0], [3, 700]), [1.0, 0.0])
    np.testing.assert_array_equal(compute_weights([0.25] * 4, [10] * 4), [0.25] * 4)
    with pytest.raises(ValueError):
        compute_weights([0.5, 0.5], [1])
    with pytest.raises(ValueError):
        compute_weights([0.0, 0.0], [1, 2])
    with pytest.raises(ValueError):
        compute_weights([1.5, -0.5], [1, 2])


@settings(max_examples=200)
@given(st.lists(st.integers(1, 10_000), min_size=1, max_size=10))
def test_uniform_priorities_reduce_to_fedavg(sizes):
    p = np.full(len(sizes), 1.0 / len(sizes))
    np.testing.assert_array_equal(compute_weights(p, sizes), fedavg_weights(sizes))


@settings(max_examples=200)
@given(st.lists(st.integers(1, 10_000), min_size=1, max_size=10), st.integers(2, 50),
       st.integers(0, 2**31))
def test_weights_scale_invariant(sizes, k, seed):
    p = np.random.default_rng(seed).dirichlet(np.ones(len(sizes)))
    np.testing.assert_allclose(compute_weights(p, sizes), compute_weights(p, [k * s for s in sizes]),
                               rtol=1e-12)


def test_fedavg_weights():
    np.testing.assert_array_equal(fedavg_weights([7] * 10), [0.1] * 10)
    np.testing.assert_array_equal(fedavg_weights([5000, 15000]), [0.25, 0.75])
    with pytest.raises(ValueError):
        fedavg_weights([])


def _vec(seed, spec=NetworkSpec(2, 1, (3,))):
    return ParamVector(spec, np.random.default_rng(seed).normal(size=spec.n_params))


def test_federate_actor_cases():
    a, b = _vec(1), _vec(2)
    np.testing.assert_array_equal(federate_actor([a], [1.0]).values, a.values)
    np.testing.assert_allclose(federate_actor([a, a], [0.3, 0.7]).values, a.values, rtol=1e-15)
    got = federate_actor([a, b], [0.3, 0.7]).values
    for i in range(len(got)):
        assert got[i] == pytest.approx(0.3 * a.values[i] + 0.7 * b.values[i], abs=1e-15)


def test_federate_critic_positionwise():
    pairs = [(_vec(1), _vec(2)), (_vec(3), _vec(4))]
    q1, q2 = federate_critic(pairs, [0.25, 0.75])
    np.testing.assert_allclose(q1.values, 0.25 * pairs[0][0].values + 0.75 * pairs[1][0].values)
    np.testing.assert_allclose(q2.values, 0.25 * pairs[0][1].values + 0.75 * pairs[1][1].values)
    with pytest.raises(ValueError):
        federate_critic(pairs, [1.0])


def test_sample_clients():
    ids = list(range(50))
    assert sample_clients(ids, 1.0, np.random.default_rng(0)) == ids
    s = sample_clients(ids, 0.4, np.random.default_rng(0))
    assert len(s) == 20 and len(set(s)) == 20 and s == sorted(s)
    assert s == sample_clients(ids, 0.4, np.random.default_rng(0))
    assert len(sample_clients(list(range(10)), 0.3, np.random.default_rng(0))) == 3
    assert len(sample_clients(list(range(20)), 0.01, np.random.default_rng(0))) == 1
    for bad in (0.0, 1.5, -0.1):
        with pytest.raises(ValueError):
            sample_clients(ids, bad, np.random.default_rng(0))


@settings(max_examples=100)
@given(st.integers(1, 60), st.floats(0.01, 1.0), st.integers(0, 2**31))
def test_sample_size_formula(n, f, seed):
    s = sample_clients(list(range(n)), f, np.random.default_rng(seed))
    assert len(s) == min(n, math.ceil(f * n - 1e-9)) or len(s) == 1
    assert len(set(s)) == len(s)


# rounds -----------------------------------------------------------------------------


def _setup(n_clients=3, size=40, seed=0, cfg=None):
    cfg = cfg or TD3BCConfig(local_steps=4, batch_size=16)
    rng = np.random.default_rng(seed)
    actor, critics = init_networks(actor_spec_for(5, 2, (8,)), critic_spec_for(5, 2, (8,)), rng)
    clients = []
    for i in range(n_clients):
        r = np.random.default_rng([seed, i])
        n = size + 10 * i
        ds = OfflineDataset(r.normal(size=(n, 5)), r.uniform(-1, 1, (n, 2)), r.normal(size=n) + i,
                            r.normal(size=(n, 5)), np.zeros(n), f"c{i}")
        clients.append(ClientState.create(i, ds, actor, critics, cfg, np.random.default_rng([seed, 9, i])))
    return ServerState(actor, critics), clients, cfg


def test_round_report_invariants():
    server, clients, cfg = _setup()
    new, rep = run_round(server, clients, cfg, FederationConfig(fraction=1.0), np.random.default_rng(0))
    assert new.round == 1 and rep.round == 1
    assert rep.client_ids == [0, 1, 2]
    assert abs(sum(rep.weights) - 1) <= 1e-9 and abs(sum(rep.priorities) - 1) <= 1e-12
    np.testing.assert_allclose(rep.priorities, compute_priorities(rep.J, 0.1))
    np.testing.assert_allclose(rep.weights, compute_weights(rep.priorities, rep.sizes))
    assert rep.sizes == [40, 50, 60]
    assert math.isnan(rep.eval_mean)


def test_round_convexity_and_sampling():
    server, clients, cfg = _setup(n_clients=5)
    new, rep = run_round(server, clients, cfg, FederationConfig(fraction=0.4), np.random.default_rng(3))
    assert len(rep.client_ids) == 2
    actors = np.array([clients[i].actor.values for i in rep.client_ids])
    assert np.all(new.fed_actor.values >= actors.min(0) - 1e-12)
    assert np.all(new.fed_actor.values <= actors.max(0) + 1e-12)
    # clients outside the sample were left untouched
    for c in clients:
        if c.client_id not in rep.client_ids:
            np.testing.assert_array_equal(c.actor.values, server.fed_actor.values)


def test_rounds_are_deterministic():
    def run():
        server, clients, cfg = _setup(n_clients=4)
        rng = np.random.default_rng(11)
        reports = []
        for _ in range(2):
            server, rep = run_round(server, clients, cfg, FederationConfig(fraction=0.5), rng,
                                    evaluator=lambda a, r: (float(a.values.sum()), float(r)))
            reports.append(rep)
        return server, reports

    (s1, r1), (s2, r2) = run(), run()
    assert s1.fed_actor.values.tobytes() == s2.fed_actor.values.tobytes()
    assert [vars(r) for r in r1] == [vars(r) for r in r2]
    assert r1[1].eval_std == 2.0


def test_fedavg_weighting_mode():
    server, clients, cfg = _setup()
    _, rep = run_round(server, clients, cfg, FederationConfig(weighting="fedavg"), np.random.default_rng(0))
    np.testing.assert_array_equal(rep.weights, fedavg_weights([40, 50, 60]))


def test_config_validation():
    with pytest.raises(ValueError):
        FederationConfig(fraction=0.0)
    with pytest.raises(ValueError):
        FederationConfig(weighting="uniform")
    with pytest.raises(ValueError):
        ServerState(None, None, beta=-1.0)
    server, _, cfg = _setup()
    with pytest.raises(ValueError):
        run_round(server, [], cfg, FederationConfig(), np.random.default_rng(0))
