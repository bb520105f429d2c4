import math

import numpy as np
import pytest

from fedsr.algorithms import (AlgoConfig, Federation, constant, cosine, estimate_gradient_bound,
                              fedavg_round, fedprox_local_update, fedsr_round, harmonic,
                              hierfavg_round, incremental_gradient, lr_at, ring_optimization,
                              ring_pass, ring_round)
from fedsr.data import Dataset, EdgeGrouping, Partition, generate_synthetic, partition_pathological
from fedsr.errors import ContractViolation
from fedsr.harness import seed_streams
from fedsr.metrics import audit_step_sizes
from fedsr.model import linear_softmax, local_train, loss_and_gradient, mlp
from fedsr.topology import RoundPlan, form_rings


def make_fed(K=4, algorithm="fedsr", seed=0, n=80, model=None, identical=False, **cfg):
    rng = np.random.default_rng(seed)
    if identical:
        base = generate_synthetic(n // K, 3, 3, 2.0, rng)
        ds = Dataset(np.tile(base.inputs, (K, 1)), np.tile(base.labels, K), 3)
        part = Partition.from_indices([np.arange(k * (n // K), (k + 1) * (n // K)) for k in range(K)],
                                      ds.labels, 3)
    else:
        ds = generate_synthetic(n, 3, 3, 2.0, rng)
        part = partition_pathological(ds, K, 1, rng)
    model = model or linear_softmax(3, 3)
    config = AlgoConfig(algorithm, **cfg)
    return Federation(model, ds, part, config, seed_streams(seed).devices(K)), model


def fresh_rngs(seed, K):
    return seed_streams(seed).devices(K)


class TestSchedules:
    def test_cosine_endpoints(self):
        s = cosine(0.01, 1e-5, 500)
        assert lr_at(s, 0) == pytest.approx(0.01, abs=1e-15)
        assert lr_at(s, 499) == pytest.approx(1e-5, abs=1e-15)

    def test_cosine_midpoint_and_monotone(self):
        s = cosine(0.2, 0.02, 11)
        assert lr_at(s, 5) == pytest.approx(0.11, abs=1e-15)
        vals = [lr_at(s, t) for t in range(11)]
        assert all(b <= a for a, b in zip(vals, vals[1:]))

    def test_cosine_horizon(self):
        with pytest.raises(ContractViolation):
            lr_at(cosine(0.1, 0.0, 5), 5)

    def test_harmonic_and_constant(self):
        assert lr_at(harmonic(0.01), 99) == pytest.approx(1e-4, abs=1e-18)
        assert lr_at(constant(0.3), 1000) == 0.3

    def test_step_size_audit(self):
        assert audit_step_sizes(harmonic(0.1))["passes"]
        res = audit_step_sizes(constant(0.1))
        assert not res["passes"] and res["failing"] == ["vanishing", "square_summable"]
        assert "sum_diverges" in audit_step_sizes(cosine(0.01, 0.0, 10))["failing"]


class TestRingPass:
    def test_quadratics_settle_near_mean(self):
        grads = {i: (lambda x, i=i: 2 * (x - i)) for i in (1, 2, 3, 4)}
        x = ring_pass([1, 2, 3, 4], np.array([0.0]), 2000,
                      lambda i, x: x - 0.01 * grads[i](x))
        assert abs(x[0] - 2.5) < 0.05

    def test_incremental_gradient_agrees(self):
        grads = [lambda x, i=i: 2 * (x - i) for i in (1, 2, 3, 4)]
        via_ring = ring_pass([0, 1, 2, 3], np.array([0.0]), 50,
                             lambda i, x: x - 0.01 * grads[i](x))
        direct = incremental_gradient(grads, [0.0], lambda t: 0.01, 50)
        assert np.array_equal(via_ring, direct)

    def test_visit_order_and_wraparound(self):
        seen = []
        out = ring_pass(["a", "b", "c"], "", 2, lambda k, w: w + k,
                        on_step=lambda k, wi, wo: seen.append((k, wi)))
        assert out == "abcabc"
        assert seen[3] == ("a", "abc")  # pass two starts from the last device's output

    def test_rejects_degenerate(self):
        with pytest.raises(ContractViolation):
            ring_pass([], 0, 1, lambda k, w: w)
        with pytest.raises(ContractViolation):
            ring_pass([1], 0, 0, lambda k, w: w)


class TestRingOptimization:
    def test_single_device_equals_local_train(self):
        fed, model = make_fed(local_epochs=3)
        w0 = model.init_params(np.random.default_rng(1))
        out = ring_optimization(fed, (2,), w0, 0.1)
        x, y = fed.device_data(2)
        ref = local_train(model, w0, x, y, 3, 0.1, 32, fresh_rngs(0, 4)[2], momentum=0.5)
        assert out.tobytes() == ref.tobytes()

    def test_two_device_composition(self):
        fed, model = make_fed(local_epochs=1)
        w0 = model.init_params(np.random.default_rng(1))
        out = ring_optimization(fed, (3, 1), w0, 0.05)
        rngs = fresh_rngs(0, 4)
        a = local_train(model, w0, *fed.device_data(3), 1, 0.05, 32, rngs[3], momentum=0.5)
        b = local_train(model, a, *fed.device_data(1), 1, 0.05, 32, rngs[1], momentum=0.5)
        assert out.tobytes() == b.tobytes()

    def test_identical_data_ring_is_plain_sgd(self):
        # full-batch steps make the shuffle irrelevant
        fed, model = make_fed(K=3, identical=True, n=30, batch_size=10, momentum=0.0,
                              ring_rounds=2)
        w0 = model.init_params(np.random.default_rng(2))
        out = ring_optimization(fed, (0, 1, 2), w0, 0.1)
        ref = local_train(model, w0, *fed.device_data(0), 3 * 2, 0.1, 10,
                          np.random.default_rng(0))
        np.testing.assert_allclose(out, ref, rtol=0, atol=1e-12)


def hand_step(w, x, y, lr, n_classes=2):
    """One full-batch gradient step for linear softmax on a single sample."""
    W, b = w[:-n_classes].reshape(len(x), n_classes), w[-n_classes:]
    z = x @ W + b
    p = np.exp(z - z.max())
    p /= p.sum()
    p[y] -= 1.0
    return np.concatenate([(W - lr * np.outer(x, p)).ravel(), b - lr * p])


class TestFedSRRound:
    def test_single_edge_is_ring_plus_identity(self):
        fed, model = make_fed(ring_rounds=2)
        w0 = model.init_params(np.random.default_rng(1))
        plan = RoundPlan(0, (0, 1, 2, 3), ((2, 0, 3, 1),), (80,))
        out = fedsr_round(fed, w0, plan, 0.05)
        fed2, _ = make_fed(ring_rounds=2)
        ref = ring_optimization(fed2, (2, 0, 3, 1), w0, 0.05)
        assert out.tobytes() == ref.tobytes()

    def test_zero_lr_fixed_point(self):
        fed, model = make_fed(identical=True)
        w0 = model.init_params(np.random.default_rng(1))
        plan = RoundPlan(0, (0, 1, 2, 3), ((0, 1), (2, 3)), (40, 40))
        assert np.array_equal(fedsr_round(fed, w0, plan, 0.0), w0)

    def test_two_edges_hand_trace(self):
        ds = Dataset(np.array([[1.0], [2.0]]), np.array([0, 1]), 2)
        part = Partition.from_indices([[0], [1]], ds.labels, 2)
        fed = Federation(linear_softmax(1, 2), ds, part,
                         AlgoConfig("fedsr", momentum=0.0), fresh_rngs(0, 2))
        w0 = np.array([0.3, -0.2, 0.1, 0.0])
        plan = RoundPlan(0, (0, 1), ((0,), (1,)), (1, 1))
        expected = 0.5 * hand_step(w0, np.array([1.0]), 0, 0.5) \
            + 0.5 * hand_step(w0, np.array([2.0]), 1, 0.5)
        np.testing.assert_allclose(fedsr_round(fed, w0, plan, 0.5), expected, atol=1e-15)

    def test_edge_order_does_not_matter(self):
        fed, model = make_fed(K=6, n=120)
        w0 = model.init_params(np.random.default_rng(1))
        plan = RoundPlan(0, tuple(range(6)), ((0, 1), (2, 3), (4, 5)), (30, 50, 40))
        flipped = RoundPlan(0, tuple(range(6)), ((4, 5), (0, 1), (2, 3)), (40, 30, 50))
        a = fedsr_round(fed, w0, plan, 0.1)
        fed2, _ = make_fed(K=6, n=120)
        b = fedsr_round(fed2, w0, flipped, 0.1)
        np.testing.assert_allclose(a, b, rtol=0, atol=1e-12)

    def test_threads_give_identical_result(self):
        w0 = linear_softmax(3, 3).init_params(np.random.default_rng(1))
        plan = RoundPlan(0, tuple(range(6)), ((0, 1), (2, 3), (4, 5)), (30, 50, 40))
        fed1, _ = make_fed(K=6, n=120)
        fed4, _ = make_fed(K=6, n=120)
        fed4.workers = 4
        assert fedsr_round(fed1, w0, plan, 0.1).tobytes() == fedsr_round(fed4, w0, plan, 0.1).tobytes()


class TestFedAvg:
    def test_one_device_equals_local_train(self):
        fed, model = make_fed(algorithm="fedavg", local_epochs=2)
        w0 = model.init_params(np.random.default_rng(1))
        out = fedavg_round(fed, w0, RoundPlan(0, (1,), ((1,),), (20,)), 0.1)
        ref = local_train(model, w0, *fed.device_data(1), 2, 0.1, 32, fresh_rngs(0, 4)[1],
                          momentum=0.5)
        assert out.tobytes() == ref.tobytes()

    def test_identical_devices(self):
        fed, model = make_fed(K=2, algorithm="fedavg", identical=True, n=40)
        fed.rngs = [np.random.default_rng(7), np.random.default_rng(7)]
        w0 = model.init_params(np.random.default_rng(1))
        out = fedavg_round(fed, w0, RoundPlan(0, (0, 1), ((0, 1),), (40,)), 0.1)
        ref = local_train(model, w0, *fed.device_data(0), 1, 0.1, 32, np.random.default_rng(7),
                          momentum=0.5)
        np.testing.assert_allclose(out, ref, rtol=0, atol=1e-15)

    def test_full_batch_equals_centralized_step(self):
        fed, model = make_fed(K=10, algorithm="fedavg", identical=True, n=100, batch_size=10,
                              momentum=0.0)
        w0 = model.init_params(np.random.default_rng(1))
        out = fedavg_round(fed, w0, RoundPlan(0, tuple(range(10)), (tuple(range(10)),), (100,)), 0.2)
        _, g = loss_and_gradient(model, w0, fed.dataset.inputs, fed.dataset.labels)
        np.testing.assert_allclose(out, w0 - 0.2 * g, rtol=0, atol=1e-12)


class TestFedProx:
    def test_zero_mu_is_fedavg(self):
        fed_a, model = make_fed(algorithm="fedavg", local_epochs=2)
        fed_p, _ = make_fed(algorithm="fedprox", local_epochs=2, mu=0.0)
        w0 = model.init_params(np.random.default_rng(1))
        plan = RoundPlan(0, (0, 1, 2, 3), ((0, 1, 2, 3),), (80,))
        assert fedavg_round(fed_a, w0, plan, 0.1).tobytes() == \
            fedavg_round(fed_p, w0, plan, 0.1).tobytes()
        assert fed_a.train_device(0, w0, 0.1).tobytes() == \
            fedprox_local_update(fed_p, 0, w0, 0.1).tobytes()

    def test_huge_mu_pins_model(self):
        fed, model = make_fed(algorithm="fedprox", mu=1e6, local_epochs=5, momentum=0.0)
        w0 = model.init_params(np.random.default_rng(1))
        out = fedprox_local_update(fed, 0, w0, 1e-7)
        assert np.abs(out - w0).max() < 1e-3

    def test_first_step_has_no_proximal_pull(self):
        fed, model = make_fed(algorithm="fedprox", mu=5.0, local_epochs=1, batch_size=1000)
        fed_plain, _ = make_fed(algorithm="fedavg", local_epochs=1, batch_size=1000)
        w0 = model.init_params(np.random.default_rng(1))
        # one full-batch step: w_local == w_glob at that step
        assert fedprox_local_update(fed, 0, w0, 0.1).tobytes() == \
            fed_plain.train_device(0, w0, 0.1).tobytes()


class TestHierFAVG:
    def test_single_edge_single_period_is_fedavg(self):
        w0 = linear_softmax(3, 3).init_params(np.random.default_rng(1))
        plan = RoundPlan(0, (0, 1, 2, 3), ((3, 1, 0, 2),), (80,))
        fed_h, _ = make_fed(algorithm="hierfavg", edge_period=1)
        fed_a, _ = make_fed(algorithm="fedavg")
        assert hierfavg_round(fed_h, w0, plan, 0.1).tobytes() == \
            fedavg_round(fed_a, w0, plan, 0.1).tobytes()

    def test_identical_devices_match_device_model(self):
        fed, model = make_fed(K=4, algorithm="hierfavg", identical=True, n=40, edge_period=3,
                              batch_size=10, momentum=0.0)
        w0 = model.init_params(np.random.default_rng(1))
        plan = RoundPlan(0, (0, 1, 2, 3), ((0, 1), (2, 3)), (20, 20))
        out = hierfavg_round(fed, w0, plan, 0.1)
        ref = local_train(model, w0, *fed.device_data(0), 3, 0.1, 10, np.random.default_rng(0))
        np.testing.assert_allclose(out, ref, rtol=0, atol=1e-12)

    def test_rejects_zero_period(self):
        fed, model = make_fed(algorithm="hierfavg")
        with pytest.raises(ContractViolation):
            hierfavg_round(fed, model.init_params(np.random.default_rng(0)),
                           RoundPlan(0, (0,), ((0,),), (1,)), 0.1, edge_period=0)


def test_budget_parity_fedsr_vs_fedavg():
    fed_s, model = make_fed(K=4, local_epochs=1, ring_rounds=5)
    fed_a, _ = make_fed(K=4, algorithm="fedavg", local_epochs=5)
    w0 = model.init_params(np.random.default_rng(1))
    fedsr_round(fed_s, w0, RoundPlan(0, (0, 1, 2, 3), ((0, 1), (2, 3)), (40, 40)), 0.1)
    fedavg_round(fed_a, w0, RoundPlan(0, (0, 1, 2, 3), ((0, 1, 2, 3),), (80,)), 0.1)
    assert [s.epochs for s in fed_s.stats] == [s.epochs for s in fed_a.stats] == [5] * 4
    assert [s.steps for s in fed_s.stats] == [s.steps for s in fed_a.stats]


def test_ring_round_uses_one_ring():
    fed, model = make_fed(algorithm="ring", ring_rounds=2)
    w0 = model.init_params(np.random.default_rng(1))
    out = ring_round(fed, w0, RoundPlan(0, (0, 1, 2, 3), ((1, 0, 3, 2),), (80,)), 0.05)
    fed2, _ = make_fed(algorithm="ring", ring_rounds=2)
    assert out.tobytes() == ring_optimization(fed2, (1, 0, 3, 2), w0, 0.05).tobytes()
    assert fed.ledger.device_to_device == 8 and fed.ledger.device_to_cloud == 1


class TestGradientBound:
    def test_zero_params_recomputed(self):
        fed, model = make_fed()
        zero = np.zeros(model.parameter_count())
        expected = 0.0
        for ix in fed.partition.device_indices:
            x, y = fed.dataset.inputs[ix], fed.dataset.labels[ix]
            # gradient at zero: softmax is uniform, so dL/dz = 1/3 - onehot
            dz = np.full((len(y), 3), 1 / 3)
            dz[np.arange(len(y)), y] -= 1
            dz /= len(y)
            g = np.concatenate([(x.T @ dz).ravel(), dz.sum(axis=0)])
            expected = max(expected, np.linalg.norm(g))
        got = estimate_gradient_bound(model, fed.dataset, fed.partition, [zero])
        assert got == pytest.approx(expected, rel=1e-12)

    def test_single_point_is_exact_norm(self):
        fed, model = make_fed(K=1)
        w = model.init_params(np.random.default_rng(0))
        _, g = loss_and_gradient(model, w, fed.dataset.inputs[fed.partition.device_indices[0]],
                                 fed.dataset.labels[fed.partition.device_indices[0]])
        assert estimate_gradient_bound(model, fed.dataset, fed.partition, [w]) == np.linalg.norm(g)

    def test_converged_norm_below_initial(self):
        rng = np.random.default_rng(0)
        ds = generate_synthetic(200, 2, 2, 10.0, rng)
        part = Partition.from_indices([np.arange(200)], ds.labels, 2)
        model = linear_softmax(2, 2)
        w0 = np.zeros(6)
        w1 = local_train(model, w0, ds.inputs, ds.labels, 100, 0.5, 32, rng)
        assert estimate_gradient_bound(model, ds, part, [w1]) < \
            estimate_gradient_bound(model, ds, part, [w0])

    def test_needs_points(self):
        fed, model = make_fed()
        with pytest.raises(ContractViolation):
            estimate_gradient_bound(model, fed.dataset, fed.partition, [])


def test_mlp_runs_through_fedsr():
    fed, _ = make_fed(model=mlp(3, [5], 3))
    w0 = fed.model.init_params(np.random.default_rng(0))
    plan = form_rings(EdgeGrouping([0, 0, 1, 1], 2), range(4), np.random.default_rng(0),
                      fed.device_sizes)
    out = fedsr_round(fed, w0, plan, 0.1)
    assert out.shape == w0.shape and np.isfinite(out).all() and not np.array_equal(out, w0)
    assert math.isclose(sum(plan.edge_weights), 80)
