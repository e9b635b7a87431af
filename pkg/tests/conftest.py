"""Shared fixtures for the MuFL tests."""

import pytest

from mufl.federation import clustered_spec, generate_population
from mufl.orchestrator import activities_from_spec


@pytest.fixture
def two_cluster_spec():
    """Four activities in two ground-truth clusters."""
    return clustered_spec([["a", "b"], ["c", "d"]], input_dim=4, hidden_dim=4, noise_std=0.05, seed=3)


@pytest.fixture
def small_pool(two_cluster_spec):
    """Six clients of twenty examples each, in batches of five."""
    return generate_population(two_cluster_spec, N=6, examples_per_client=20,
                               batch_size=5, test_examples=50)


@pytest.fixture
def activities(two_cluster_spec):
    """Training activities matching the four-activity spec."""
    return activities_from_spec(two_cluster_spec)
