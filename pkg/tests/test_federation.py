"""
Tests for partitioning, client selection, local training and aggregation
"""

import unittest

import numpy as np

from feddpg.config import RoundConfig
from feddpg.errors import AggregationError, ContractError, PartitionError
from feddpg.federation import (
    ClientState,
    FederatedSimulation,
    LocalResult,
    ServerState,
    Transport,
    aggregate,
    evaluate_global,
    local_train,
    partition,
    partition_indices,
    run_round,
    select_clients,
)
from feddpg.generator import GeneratorParams, init_generator, sgd_step
from feddpg.tensor import backward

from test_utils import make_dataset, make_encoder, make_tiny_model, tiny_encoder_config


def vector(values) -> GeneratorParams:
    return GeneratorParams.from_arrays({"w": np.array(values, dtype=np.float64)})


class TestPartition(unittest.TestCase):
    """Disjoint client shards"""

    def test_one_sample_per_client(self):
        parts = partition_indices(np.zeros(100, dtype=int), 100, "iid", seed=0)
        self.assertTrue(all(len(p) == 1 for p in parts))

    def test_conservation_and_disjointness(self):
        labels = np.random.default_rng(0).integers(0, 3, size=257)
        for scheme in ("iid", "label_skew"):
            with self.subTest(scheme=scheme):
                parts = partition_indices(labels, 10, scheme, seed=1, alpha=0.5)
                flat = sorted(i for p in parts for i in p)
                self.assertEqual(flat, list(range(257)))
                self.assertTrue(all(len(p) >= 1 for p in parts))

    def test_remainder_goes_to_low_ids(self):
        parts = partition_indices(np.zeros(10, dtype=int), 3, "iid", seed=0)
        self.assertEqual([len(p) for p in parts], [4, 3, 3])

    def test_too_few_samples(self):
        with self.assertRaises(PartitionError):
            partition_indices(np.zeros(5, dtype=int), 6)

    def test_large_alpha_approaches_global_proportions(self):
        data = make_dataset(1000)
        shards = partition(data, 10, "label_skew", seed=0, alpha=1000.0)
        global_p = data.label_counts() / len(data)
        for shard in shards:
            shard_p = shard.label_counts() / len(shard)
            self.assertLessEqual(0.5 * np.abs(shard_p - global_p).sum(), 0.1)

    def test_shards_are_subsets(self):
        data = make_dataset(40)
        shards = partition(data, 4, seed=3)
        self.assertEqual(sum(len(s) for s in shards), 40)
        self.assertEqual(
            sorted(map(tuple, (seq for s in shards for seq in s.sequences))),
            sorted(map(tuple, data.sequences)),
        )


class TestSelectClients(unittest.TestCase):
    """Per-round client sampling"""

    def test_full_participation(self):
        self.assertEqual(select_clients(10, 1.0, seed=0, round_t=1), list(range(10)))

    def test_cardinality(self):
        ids = select_clients(100, 0.05, seed=0, round_t=3)
        self.assertEqual(len(set(ids)), 5)
        self.assertEqual(ids, sorted(ids))

    def test_deterministic(self):
        self.assertEqual(select_clients(100, 0.1, 4, 7), select_clients(100, 0.1, 4, 7))

    def test_selection_must_be_possible(self):
        with self.assertRaises(ContractError):
            select_clients(10, 0.01, 0, 1)


class TestAggregate(unittest.TestCase):
    """Unweighted mean of client updates"""

    def test_mean(self):
        out = aggregate([(0, vector([1.0, 3.0])), (1, vector([3.0, 5.0]))])
        np.testing.assert_array_equal(out["w"].data, [2.0, 4.0])

    def test_identical_updates(self):
        u = init_generator(make_tiny_model().cfg, 0)
        out = aggregate([(cid, u.copy()) for cid in range(7)])
        self.assertTrue(out.bit_equal(u))

    def test_matches_independent_sum(self):
        rng = np.random.default_rng(5)
        values = [rng.uniform(-1, 1, size=50) for _ in range(5)]
        out = aggregate([(cid, vector(v)) for cid, v in enumerate(values)])
        np.testing.assert_allclose(out["w"].data, sum(values) / 5, rtol=0, atol=1e-15)

    def test_linearity(self):
        rng = np.random.default_rng(6)
        values = [rng.normal(size=20) for _ in range(6)]
        base = aggregate([(cid, vector(v)) for cid, v in enumerate(values)])
        scaled = aggregate([(cid, vector(2.0 * v)) for cid, v in enumerate(values)])
        np.testing.assert_allclose(scaled["w"].data, 2.0 * base["w"].data, rtol=0, atol=1e-15)

    def test_order_of_arrival_does_not_matter(self):
        updates = [(cid, vector(np.random.default_rng(cid).normal(size=8))) for cid in range(4)]
        a = aggregate(updates)
        b = aggregate(list(reversed(updates)))
        self.assertTrue(a.bit_equal(b))

    def test_structure_mismatch_names_client(self):
        with self.assertRaises(AggregationError) as ctx:
            aggregate([(0, vector([1.0, 2.0])), (3, vector([1.0]))])
        self.assertEqual(ctx.exception.client_id, 3)

    def test_empty(self):
        with self.assertRaises(AggregationError):
            aggregate([])


class TestLocalTraining(unittest.TestCase):
    """Client-side training of θ_P"""

    def setUp(self):
        self.model = make_tiny_model()
        self.client = ClientState(0, make_dataset(12, seed=1), seed=11)
        self.params = init_generator(self.model.cfg, 0)

    def test_zero_epochs(self):
        cfg = RoundConfig(num_clients=1, selection_ratio=1.0, local_epochs=0)
        result = local_train(self.client, self.params, cfg, self.model, 1)
        self.assertTrue(result.params.bit_equal(self.params))

    def test_zero_learning_rate(self):
        cfg = RoundConfig(num_clients=1, selection_ratio=1.0, lr=0.0)
        result = local_train(self.client, self.params, cfg, self.model, 1)
        self.assertTrue(result.params.bit_equal(self.params))

    def test_global_params_untouched(self):
        before = self.params.copy()
        cfg = RoundConfig(num_clients=1, selection_ratio=1.0, lr=0.5)
        result = local_train(self.client, self.params, cfg, self.model, 1)
        self.assertTrue(self.params.bit_equal(before))
        self.assertFalse(result.params.bit_equal(before))

    def test_loss_decreases_on_separable_shard(self):
        client = ClientState(0, make_dataset(16, seed=2, signal_rate=1.0), seed=5)
        cfg = RoundConfig(
            num_clients=1, selection_ratio=1.0, local_epochs=20, lr=0.003125, batch_size=16
        )
        result = local_train(client, self.params, cfg, self.model, 1)
        self.assertEqual(len(result.epoch_losses), 20)
        self.assertLess(result.epoch_losses[-1], result.epoch_losses[0])

    def test_step_descends_summed_batch_loss(self):
        client = ClientState(0, make_dataset(4, seed=3), seed=7)
        cfg = RoundConfig(num_clients=1, selection_ratio=1.0, lr=0.1, batch_size=4)
        result = local_train(client, self.params, cfg, self.model, 1)

        expected = self.params.copy()
        ids, mask = client.shard.arrays()
        loss, _ = self.model.forward_loss(expected, ids, mask, client.shard.label_array)
        backward(loss)
        sgd_step(expected, 0.1)
        for name, arr in expected.arrays().items():
            np.testing.assert_allclose(result.params[name].data, arr, rtol=1e-9, atol=1e-12)

    def test_empty_shard_is_skipped(self):
        client = ClientState(1, make_dataset(0), seed=0)
        cfg = RoundConfig(num_clients=1, selection_ratio=1.0)
        with self.assertLogs("feddpg.federation", level="WARNING"):
            self.assertIsNone(local_train(client, self.params, cfg, self.model, 1))


class TestEvaluateGlobal(unittest.TestCase):
    """Global test accuracy"""

    def test_deterministic(self):
        model = make_tiny_model()
        params = init_generator(model.cfg, 0)
        test = make_dataset(50, stream=1)
        self.assertEqual(
            evaluate_global(params, test, model), evaluate_global(params, test, model)
        )

    def test_uniform_predictions_are_chance(self):
        cfg = tiny_encoder_config()
        encoder = make_encoder(
            arrays={"head.w": np.zeros((cfg.d_e, cfg.num_classes)), "head.b": np.zeros(2)}
        )
        model = make_tiny_model(encoder=encoder)
        accuracy = evaluate_global(init_generator(model.cfg, 0), make_dataset(400), model)
        self.assertGreaterEqual(accuracy, 0.4)
        self.assertLessEqual(accuracy, 0.6)

    def test_perfect_oracle(self):
        test = make_dataset(30)

        class Oracle:
            def predict(self, params, ids, mask, batch_size):
                return test.label_array

        self.assertEqual(evaluate_global(None, test, Oracle()), 1.0)

    def test_empty_test_set(self):
        model = make_tiny_model()
        with self.assertRaises(ContractError):
            evaluate_global(init_generator(model.cfg, 0), make_dataset(0), model)


class TestTransport(unittest.TestCase):
    """Instrumented server/client channel"""

    def test_payload_is_a_decoded_copy(self):
        transport = Transport()
        params = vector([1.0, 2.0])
        received = transport.broadcast(params, client_id=3, round_t=1)
        self.assertTrue(received.bit_equal(params))
        self.assertIsNot(received["w"], params["w"])
        self.assertEqual(transport.total_bytes, params.serialized_size())
        self.assertEqual(transport.payload_types(), {"GeneratorParams"})

    def test_only_generator_parameters_cross(self):
        transport = Transport()
        with self.assertRaises(ContractError):
            transport.upload(make_dataset(3), client_id=0, round_t=1)


class TestRounds(unittest.TestCase):
    """Full federated rounds"""

    def setUp(self):
        self.model = make_tiny_model()
        self.train = make_dataset(60)
        self.test = make_dataset(30, stream=1)

    def _simulation(self, **round_cfg):
        values = dict(num_clients=10, selection_ratio=0.3, batch_size=4, lr=0.1)
        values.update(round_cfg)
        return FederatedSimulation(self.model, self.train, RoundConfig(**values), seed=0)

    def test_round_metrics(self):
        sim = self._simulation()
        digest = self.model.encoder.digest()
        metrics = sim.run_round(self.test)
        self.assertEqual(metrics.round, 1)
        self.assertEqual(sim.server.round, 1)
        self.assertEqual(len(metrics.selected), 3)
        self.assertEqual(metrics.aggregated, metrics.selected)
        self.assertEqual(
            metrics.bytes_transmitted, 2 * 3 * sim.global_params.serialized_size()
        )
        self.assertTrue(0.0 <= metrics.accuracy <= 1.0)
        self.assertEqual(self.model.encoder.digest(), digest)
        for cid in metrics.selected:
            self.assertIsNotNone(sim.clients[cid].local_generator)

    def test_unchanged_updates_leave_global_unchanged(self):
        sim = self._simulation(lr=0.0)
        before = sim.global_params.copy()
        sim.run(3)
        self.assertTrue(sim.global_params.bit_equal(before))
        self.assertEqual(sim.server.round, 3)

    def test_communication_accounting(self):
        sim = self._simulation(selection_ratio=1.0, local_epochs=0)
        sim.run(10)
        self.assertEqual(sim.total_bytes, 200 * sim.global_params.serialized_size())
        self.assertEqual(sim.transport.payload_types("up"), {"GeneratorParams"})
        self.assertEqual(sim.transport.payload_types("down"), {"GeneratorParams"})

    def test_equal_contribution_regardless_of_shard_size(self):
        sim = self._simulation(selection_ratio=1.0)
        values = {cid: np.full(3, float(cid)) for cid in range(10)}

        def trainer(round_t, jobs):
            return [
                LocalResult(c.client_id, vector(values[c.client_id]), 10**c.client_id)
                for c, _ in jobs
            ]

        sim.server.global_generator = vector(np.zeros(3))
        sim.trainer = trainer
        sim.run_round()
        np.testing.assert_array_equal(sim.global_params["w"].data, np.full(3, 4.5))

    def test_empty_shards_are_excluded(self):
        model = self.model
        shards = [make_dataset(5, seed=1), make_dataset(0), make_dataset(5, seed=2)]
        clients = [ClientState(cid, shard, seed=cid) for cid, shard in enumerate(shards)]
        params = init_generator(model.cfg, 0)
        server = ServerState(params, model.encoder.digest(), seed=0)
        cfg = RoundConfig(num_clients=3, selection_ratio=1.0, batch_size=5)
        transport = Transport()
        metrics = run_round(server, clients, cfg, model, transport)
        self.assertEqual(metrics.selected, [0, 1, 2])
        self.assertEqual(metrics.aggregated, [0, 2])
        self.assertEqual(metrics.bytes_transmitted, 2 * 2 * params.serialized_size())

    def test_server_rejects_mismatched_structure(self):
        sim = self._simulation()
        with self.assertRaises(AggregationError):
            sim.server.advance(vector([1.0]))

    def test_runs_are_bit_identical(self):
        a, b = self._simulation(), self._simulation()
        a.initial_metrics(self.test)
        b.initial_metrics(self.test)
        a.run(3, self.test)
        b.run(3, self.test)
        self.assertEqual(a.global_params.digest(), b.global_params.digest())
        def strip(rows):
            return [dict(m.to_dict(), wall_time=0.0) for m in rows]

        self.assertEqual(strip(a.history), strip(b.history))
        self.assertEqual(a.history[0].round, 0)


if __name__ == "__main__":
    unittest.main()
