"""Tests for the synthetic population, local training and FedAvg."""

import numpy as np
import pytest

from mufl.affinity import AffinityProbe
from mufl.federation import (
    Batch,
    ClientDataset,
    SyntheticTaskSpec,
    TaskGenerator,
    aggregation_weights,
    clustered_spec,
    evaluate,
    fedavg,
    generate_population,
    local_train,
    rng_stream,
    sample_clients,
)
from mufl.nn_core import HyperParams, ShapeError
from mufl.oracle import tiny_model
from mufl.orchestrator import consolidate
from tests.helpers import scalar_batch, scalar_dataset, scalar_model

PLAIN = HyperParams(momentum=0.0, weight_decay=0.0)


class TestRngStream:
    """Test cases for named random streams."""

    def test_replayable(self):
        """Test that equal keys give equal draws."""
        a = rng_stream(7, "sample", "s|d", 3).random(5)
        b = rng_stream(7, "sample", "s|d", 3).random(5)
        assert np.array_equal(a, b)

    @pytest.mark.parametrize("other", [(8, "sample", "s|d", 3), (7, "shuffle", "s|d", 3),
                                       (7, "sample", "s", 3), (7, "sample", "s|d", 4)])
    def test_keys_separate_streams(self, other):
        """Test that changing any key part changes the draws."""
        assert not np.array_equal(rng_stream(7, "sample", "s|d", 3).random(5),
                                  rng_stream(*other).random(5))


class TestBatchesAndDatasets:
    """Test cases for Batch and ClientDataset."""

    def test_row_mismatch(self):
        """Test that targets must have one row per example."""
        with pytest.raises(ShapeError):
            Batch(features=np.ones((3, 2)), targets={"a": np.ones((2, 1))})

    def test_empty_batch(self):
        """Test that a batch needs at least one example."""
        with pytest.raises(ShapeError):
            Batch(features=np.ones((0, 2)), targets={})

    def test_batches_cover_examples(self):
        """Test that n_examples equals the summed batch sizes, last batch short."""
        dataset = scalar_dataset(23, batch_size=10, i=1.0)
        sizes = [b.size for b in dataset.batches]
        assert sizes == [10, 10, 3]
        assert sum(sizes) == dataset.n_examples == 23
        assert dataset.n_batches == 3

    def test_epoch_reshuffle_is_permutation(self):
        """Test that a shuffled epoch visits every example once, targets kept aligned."""
        dataset = ClientDataset(0, np.arange(12.0).reshape(12, 1), {"i": np.arange(12.0).reshape(12, 1)}, 5)
        batches = dataset.epoch_batches(rng_stream(0, "shuffle"))
        seen = np.concatenate([b.features[:, 0] for b in batches])
        assert sorted(seen) == list(range(12))
        assert not np.array_equal(seen, np.arange(12.0))
        for b in batches:
            assert np.array_equal(b.features, b.targets["i"])

    def test_unshuffled_order(self):
        """Test that batches follow storage order without a generator."""
        dataset = ClientDataset(0, np.arange(6.0).reshape(6, 1), {"i": np.zeros((6, 1))}, 4)
        assert dataset.batches[0].features[:, 0].tolist() == [0.0, 1.0, 2.0, 3.0]


class TestSyntheticTaskSpec:
    """Test cases for SyntheticTaskSpec validation."""

    def test_defaults_to_regression(self):
        """Test regression with one output unless told otherwise."""
        spec = clustered_spec([["a"], ["b"]])
        assert spec.loss_kinds == {"a": "regression", "b": "regression"}
        assert spec.output_dim("a") == 1

    def test_classification_width(self):
        """Test that classification heads have one output per class."""
        spec = clustered_spec([["a", "b"]], loss_kinds={"b": "classification"}, n_classes=4)
        assert spec.output_dim("b") == 4

    @pytest.mark.parametrize("kwargs", [
        {"input_dim": 0},
        {"noise_std": -0.1},
        {"heterogeneity": -1.0},
        {"n_classes": 1},
        {"loss_kinds": {"z": "regression"}},
        {"loss_kinds": {"a": "ranking"}},
        {"latent_scale": 0.0},
        {"shared_dim": -1},
    ])
    def test_invalid(self, kwargs):
        """Test that invalid settings are rejected."""
        with pytest.raises(ValueError):
            clustered_spec([["a", "b"]], **kwargs)

    def test_activity_in_two_clusters(self):
        """Test that clusters must be disjoint."""
        with pytest.raises(ValueError, match="more than one cluster"):
            clustered_spec([["a", "b"], ["b"]])

    def test_record_roundtrip(self):
        """Test that the record rebuilds an equal spec."""
        spec = clustered_spec([["a", "b"], ["c"]], seed=9, noise_std=0.2, shared_dim=2, latent_scale=1.0)
        assert SyntheticTaskSpec.from_record(spec.to_record()) == spec


class TestGeneratePopulation:
    """Test cases for generate_population."""

    def test_deterministic(self, two_cluster_spec):
        """Test that the same spec gives the same clients and test set."""
        one = generate_population(two_cluster_spec, N=3, examples_per_client=10, test_examples=20)
        two = generate_population(two_cluster_spec, N=3, examples_per_client=10, test_examples=20)
        for c1, c2 in zip(one.clients, two.clients):
            assert np.array_equal(c1.features, c2.features)
            assert all(np.array_equal(c1.targets[a], c2.targets[a]) for a in c1.targets)
        assert np.array_equal(one.test_batches[0].features, two.test_batches[0].features)

    def test_seed_changes_population(self, two_cluster_spec):
        """Test that another seed gives other features."""
        other = SyntheticTaskSpec.from_record({**two_cluster_spec.to_record(), "seed": 4})
        one = generate_population(two_cluster_spec, N=2, examples_per_client=10, test_examples=10)
        two = generate_population(other, N=2, examples_per_client=10, test_examples=10)
        assert not np.array_equal(one.clients[0].features, two.clients[0].features)

    def test_shapes(self, small_pool):
        """Test client count, feature shape, batches and test set size."""
        assert len(small_pool) == 6
        assert small_pool.client_ids == list(range(6))
        client = small_pool.client(2)
        assert client.features.shape == (20, 4)
        assert client.n_batches == 4
        assert set(client.targets) == {"a", "b", "c", "d"}
        assert sum(b.size for b in small_pool.test_batches) == 50
        assert set(small_pool.test_sets) == {"a", "b", "c", "d"}

    def test_no_heterogeneity_shares_distribution(self):
        """Test that without heterogeneity every client draws centered features."""
        spec = clustered_spec([["a"]], input_dim=4, heterogeneity=0.0, seed=1)
        pool = generate_population(spec, N=4, examples_per_client=200, test_examples=10)
        for client in pool.clients:
            assert np.all(np.abs(client.features.mean(axis=0)) < 0.4)

    def test_heterogeneity_shifts_clients(self):
        """Test that large heterogeneity moves client means away from zero."""
        spec = clustered_spec([["a"]], input_dim=4, heterogeneity=3.0, seed=1)
        pool = generate_population(spec, N=4, examples_per_client=200, test_examples=10)
        means = [c.features.mean(axis=0) for c in pool.clients]
        assert max(np.abs(m).max() for m in means) > 1.0

    def test_same_cluster_targets_share_latent(self):
        """Test that noiseless same-cluster targets are exact functions of one latent map."""
        spec = clustered_spec([["a", "b"], ["c"]], input_dim=4, hidden_dim=3, noise_std=0.0, seed=2)
        pool = generate_population(spec, N=1, examples_per_client=60, test_examples=10)
        client = pool.clients[0]
        latent = pool.generator.latent(client.features, spec.cluster_assignment["a"])

        def residual(activity):
            y = client.targets[activity]
            coef, *_ = np.linalg.lstsq(latent, y, rcond=None)
            return float(np.sum((latent @ coef - y) ** 2) / np.sum(y ** 2))

        assert residual("a") < 1e-16
        assert residual("b") < 1e-16
        assert residual("c") > 1e-3

    def test_shared_features_keep_cluster_draws(self):
        """Test that adding shared features leaves the per-cluster maps and readouts unchanged."""
        plain = clustered_spec([["a", "b"], ["c"]], input_dim=4, hidden_dim=3, seed=5)
        shared = clustered_spec([["a", "b"], ["c"]], input_dim=4, hidden_dim=3, seed=5, shared_dim=2)
        one, two = TaskGenerator.from_spec(plain), TaskGenerator.from_spec(shared)
        assert one.shared_map is None
        assert two.shared_map.shape == (4, 2)
        for cluster, latent_map in one.latent_maps.items():
            assert np.array_equal(latent_map, two.latent_maps[cluster])
        for activity, readout in one.readouts.items():
            assert np.array_equal(readout, two.readouts[activity])

    def test_shared_features_span_clusters(self):
        """Test that targets of every cluster are exact functions of own plus shared latents."""
        spec = clustered_spec([["a"], ["c"]], input_dim=5, hidden_dim=2, shared_dim=2,
                              noise_std=0.0, seed=6)
        pool = generate_population(spec, N=1, examples_per_client=60, test_examples=10)
        features = pool.clients[0].features
        shared = np.tanh(features @ pool.generator.shared_map)
        for activity in ("a", "c"):
            latent = np.hstack([pool.generator.latent(features, spec.cluster_assignment[activity]), shared])
            y = pool.clients[0].targets[activity]
            coef, *_ = np.linalg.lstsq(latent, y, rcond=None)
            assert np.sum((latent @ coef - y) ** 2) / np.sum(y ** 2) < 1e-16

    def test_latent_scale(self):
        """Test that the latent maps scale linearly with latent_scale."""
        one = TaskGenerator.from_spec(clustered_spec([["a"]], input_dim=4, seed=7, latent_scale=1.0))
        two = TaskGenerator.from_spec(clustered_spec([["a"]], input_dim=4, seed=7, latent_scale=2.0))
        assert np.allclose(2.0 * one.latent_maps[0], two.latent_maps[0])

    def test_size_jitter_bounds(self, two_cluster_spec):
        """Test that jittered sizes vary within the allowed range."""
        pool = generate_population(two_cluster_spec, N=8, examples_per_client=100,
                                   test_examples=10, size_jitter=0.5)
        sizes = [c.n_examples for c in pool.clients]
        assert all(50 <= s <= 150 for s in sizes)
        assert len(set(sizes)) > 1

    @pytest.mark.parametrize("kwargs", [{"N": 0}, {"examples_per_client": 0}, {"size_jitter": 1.0}])
    def test_invalid(self, two_cluster_spec, kwargs):
        """Test that degenerate population settings are rejected."""
        with pytest.raises(ValueError):
            generate_population(two_cluster_spec, **kwargs)


class TestSampleClients:
    """Test cases for sample_clients."""

    @pytest.fixture
    def pool32(self):
        """Thirty-two single-example clients."""
        return generate_population(clustered_spec([["a"]], input_dim=2), N=32,
                                   examples_per_client=1, test_examples=1)

    def test_distinct(self, pool32):
        """Test that K distinct clients are drawn."""
        picked = sample_clients(pool32, 4, rng_stream(0, "sample"))
        assert len(set(picked)) == 4

    def test_all_clients(self, small_pool):
        """Test that K equal to the pool size selects everyone."""
        picked = sample_clients(small_pool, 6, rng_stream(1, "sample"))
        assert sorted(picked) == small_pool.client_ids

    def test_replay(self, pool32):
        """Test that equal streams select equal clients."""
        assert sample_clients(pool32, 1, rng_stream(3, "x")) == sample_clients(pool32, 1, rng_stream(3, "x"))

    @pytest.mark.parametrize("K", [0, 33])
    def test_invalid_k(self, pool32, K):
        """Test that K outside 1..N is rejected."""
        with pytest.raises(ValueError):
            sample_clients(pool32, K, rng_stream(0))

    def test_uniform_frequency(self, pool32):
        """Test that each client is picked about K/N of the time."""
        counts = np.zeros(32)
        rng = rng_stream(0, "frequency")
        for _ in range(10_000):
            counts[sample_clients(pool32, 4, rng)] += 1
        expected = 10_000 * 4 / 32
        assert np.all(np.abs(counts - expected) <= 0.15 * expected)


class TestAggregationWeights:
    """Test cases for aggregation_weights."""

    def test_proportional(self):
        """Test weights proportional to example counts."""
        assert aggregation_weights([1, 3]) == [0.25, 0.75]

    def test_sum_to_one(self):
        """Test that weights sum to one."""
        assert sum(aggregation_weights([120, 95, 130, 101])) == pytest.approx(1.0, abs=1e-15)

    def test_empty_clients(self):
        """Test that clients with no examples cannot be weighted."""
        with pytest.raises(ValueError):
            aggregation_weights([0, 0])


class TestLocalTrain:
    """Test cases for local_train."""

    def test_no_epochs(self):
        """Test that E=0 returns the model unchanged with an empty accumulator."""
        model = scalar_model(0.3)
        update = local_train(model, scalar_dataset(10, i=1.0, j=2.0), 0, 0.1, PLAIN,
                             probe=AffinityProbe(frequency=1))
        assert update.model.digest() == model.digest()
        assert update.accumulator.count == 0
        assert update.examples == 0
        assert update.probe_examples == 0

    def test_hand_step(self):
        """Test one example, theta = 0, target 1, lr = 0.25."""
        update = local_train(scalar_model(0.0, heads={"i": 1.0}), scalar_dataset(1, i=1.0), 1, 0.25, PLAIN)
        assert update.model.trunk[0].weight.values[0, 0] == 0.5
        assert update.model.heads["i"][0].weight.values[0, 0] == 1.0
        assert update.train_losses == {"i": 1.0}
        assert update.examples == 1

    def test_input_model_untouched(self):
        """Test that training works on a copy."""
        model = scalar_model(0.0)
        digest = model.digest()
        local_train(model, scalar_dataset(4, i=1.0, j=1.0), 2, 0.1, PLAIN)
        assert model.digest() == digest

    def test_probe_time_steps(self):
        """Test that f=5 on a 12-batch epoch takes two affinity samples."""
        dataset = scalar_dataset(120, batch_size=10, i=1.0, j=1.0)
        update = local_train(scalar_model(0.0), dataset, 1, 0.01, PLAIN, probe=AffinityProbe(frequency=5))
        assert update.accumulator.count == 2
        assert update.probe_examples == 20
        assert update.examples == 120

    def test_single_activity_skips_probe(self):
        """Test that one activity takes no affinity samples."""
        update = local_train(scalar_model(0.0, heads={"i": 1.0}), scalar_dataset(10, i=1.0), 1, 0.1,
                             PLAIN, probe=AffinityProbe(frequency=1))
        assert update.accumulator is None
        assert update.probe_examples == 0

    def test_missing_targets(self):
        """Test that the client must hold targets for every activity."""
        with pytest.raises(KeyError, match="no targets"):
            local_train(scalar_model(), scalar_dataset(2, i=1.0), 1, 0.1, PLAIN)

    def test_negative_epochs(self):
        """Test that E below zero is rejected."""
        with pytest.raises(ValueError):
            local_train(scalar_model(), scalar_dataset(2, i=1.0, j=1.0), -1, 0.1, PLAIN)

    def test_same_stream_same_result(self, small_pool, activities):
        """Test that equal shuffle streams give bit-identical models."""
        model = consolidate(activities, 4, (5,), seed=0)
        one = local_train(model, small_pool.client(0), 1, 0.1, HyperParams(), rng=rng_stream(0, "s"))
        two = local_train(model, small_pool.client(0), 1, 0.1, HyperParams(), rng=rng_stream(0, "s"))
        assert one.model.digest() == two.model.digest()


class TestFedAvg:
    """Test cases for fedavg."""

    def test_weighted_mean(self):
        """Test the weighted mean of two scalar models."""
        result = fedavg([scalar_model(1.0), scalar_model(3.0)], [0.25, 0.75])
        assert result.trunk[0].weight.values[0, 0] == 2.5
        assert result.heads["i"][0].weight.values[0, 0] == 1.0

    def test_single_model_identity(self):
        """Test that one model with weight one is returned unchanged."""
        model = scalar_model(0.7)
        assert fedavg([model], [1.0]).digest() == model.digest()

    def test_buffers_zeroed(self):
        """Test that gradients and momentum of the aggregate are zero."""
        model = scalar_model(0.0)
        update = local_train(model, scalar_dataset(3, i=1.0, j=1.0), 1, 0.1, HyperParams())
        result = fedavg([update.model], [1.0])
        assert all(not b.momentum_buf.any() and not b.grad.any() for b in result.blocks().values())

    def test_order_independent(self):
        """Test that summing in client-id order removes arrival-order effects."""
        models = [scalar_model(t) for t in (0.1, 0.2, 0.7)]
        weights = [0.2, 0.3, 0.5]
        forward = fedavg(models, weights, client_ids=[4, 9, 12])
        backward = fedavg(models[::-1], weights[::-1], client_ids=[12, 9, 4])
        assert forward.digest() == backward.digest()

    def test_duplicated_models_split_weights(self):
        """Test that listing every model twice with half its weight gives the same aggregate."""
        models = [tiny_model(seed) for seed in (0, 1, 2)]
        weights = [0.2, 0.3, 0.5]
        once = fedavg(models, weights)
        twice = fedavg(models + [m.clone() for m in models], [w / 2 for w in weights] * 2)
        for name, block in once.blocks().items():
            assert np.allclose(block.values, twice.blocks()[name].values, rtol=1e-12, atol=1e-15)

    def test_identical_models_bit_equal(self):
        """Test that aggregating copies of one model reproduces it exactly."""
        model = tiny_model(4)
        result = fedavg([model, model.clone(), model.clone()], [0.2, 0.3, 0.5])
        for name, block in model.blocks().items():
            assert np.array_equal(result.blocks()[name].values, block.values)

    def test_weights_must_sum_to_one(self):
        """Test that weights not summing to one are rejected."""
        with pytest.raises(ValueError, match="sum to"):
            fedavg([scalar_model(), scalar_model()], [0.5, 0.6])

    def test_incompatible(self):
        """Test that models with different heads cannot be averaged."""
        with pytest.raises(ShapeError):
            fedavg([scalar_model(), scalar_model(heads={"i": 1.0})], [0.5, 0.5])

    def test_empty(self):
        """Test that averaging nothing is an error."""
        with pytest.raises(ValueError):
            fedavg([], [])


class TestEvaluate:
    """Test cases for evaluate."""

    def test_perfect_fit(self):
        """Test zero loss on exactly fitted targets."""
        report = evaluate(scalar_model(1.0), {"i": [scalar_batch(i=1.0)], "j": [scalar_batch(j=1.0)]})
        assert report.per_activity == {"i": 0.0, "j": 0.0}
        assert report.total == 0.0
        assert report.examples == 2

    def test_models_split_activities(self):
        """Test that each activity is scored by the model serving it."""
        models = [scalar_model(1.0, heads={"i": 1.0}), scalar_model(0.0, heads={"j": 1.0})]
        report = evaluate(models, {"i": [scalar_batch(i=1.0)], "j": [scalar_batch(j=1.0)]})
        assert report.per_activity == {"i": 0.0, "j": 1.0}
        assert report.total == 1.0

    def test_activity_served_twice(self):
        """Test that two models may not serve one activity."""
        with pytest.raises(ValueError, match="more than one model"):
            evaluate([scalar_model(), scalar_model()], {"i": [scalar_batch(i=1.0)]})

    def test_activity_unserved(self):
        """Test that every activity must be served."""
        with pytest.raises(ValueError, match="No model serves"):
            evaluate(scalar_model(heads={"i": 1.0}), {"j": [scalar_batch(j=1.0)]})
