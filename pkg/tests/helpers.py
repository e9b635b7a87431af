"""Hand-checkable models and data for the tests."""

import numpy as np

from mufl.federation import Batch, ClientDataset
from mufl.nn_core import LINEAR, REGRESSION, DenseLayer, MultiTaskModel, ParamBlock


def scalar_model(theta: float = 0.0, heads=None) -> MultiTaskModel:
    """Linear 1-parameter trunk with 1-parameter heads: prediction = theta * head * x."""
    heads = heads or {"i": 1.0, "j": 1.0}
    return MultiTaskModel(
        trunk=[DenseLayer(ParamBlock([[theta]]), None, LINEAR)],
        heads={a: [DenseLayer(ParamBlock([[w]]), None, LINEAR)] for a, w in heads.items()},
        loss_kinds={a: REGRESSION for a in heads},
    )


def scalar_batch(**targets) -> Batch:
    """Single example with x = 1 and the given scalar targets."""
    return Batch(features=[[1.0]], targets={a: np.array([[t]]) for a, t in targets.items()})


def scalar_dataset(n_examples: int, batch_size: int = 1, client_id: int = 0, **targets) -> ClientDataset:
    """Client whose every feature is 1 and whose targets are constant."""
    return ClientDataset(
        client_id=client_id,
        features=np.ones((n_examples, 1)),
        targets={a: np.full((n_examples, 1), float(t)) for a, t in targets.items()},
        batch_size=batch_size,
    )
