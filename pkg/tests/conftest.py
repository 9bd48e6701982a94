import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from causal_hbm import data, graph, hbm, scm

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def random_dag(rng, n, p=0.5):
    """Random DAG over ``n`` nodes: edges only go forward in a random order."""
    order = rng.permutation(n)
    adj = np.zeros((n, n), dtype=bool)
    for a in range(n):
        for b in range(a + 1, n):
            if rng.random() < p:
                adj[order[a], order[b]] = True
    return graph.Dag(adj)


@pytest.fixture
def tiny_cfg():
    return scm.ToyModelConfig(n_train=8, n_val=3, n_test=3, m_support=6, m_query=6, n_groups=2, seed=3)


@pytest.fixture
def tiny_data(tiny_cfg):
    ds, _ = data.standardize(scm.generate_toy_dataset(tiny_cfg))
    return ds


@pytest.fixture
def fast_trainer():
    return hbm.TrainerConfig(epochs=2, warm_start_epochs=1, predictive_samples=4, baseline_epochs=2,
                             local_steps=3, patience=5)
