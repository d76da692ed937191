"""
Shared fixtures: a tiny world (2 tasks x 2 categories) that trains in seconds.
"""

import copy

import pytest

from unlearning.config import config_from_dict
from unlearning.engine import unlearn_sequence
from unlearning.world import generate_world

TINY_CONFIG = {
    "world": {
        "feature_dim": 16,
        "num_tasks": 2,
        "categories_per_task": 2,
        "concepts_per_category_per_modality": 3,
        "samples_per_category": 12,
        "eval_samples_per_category": 6,
        "benchmark_categories": 3,
        "benchmark_samples_per_category": 4,
        "retain_categories": 2,
        "retain_samples": 16,
        "general_intents": 2,
    },
    "training": {"stage1_steps": 40, "stage2_steps": 40, "batch_size": 8},
    "refusal": {"num_refusers": 4, "top_k": 2, "hidden_dim": 8},
}


def tiny_config_dict():
    return copy.deepcopy(TINY_CONFIG)


def make_tiny_config(**sections):
    document = tiny_config_dict()
    for section, values in sections.items():
        if isinstance(values, dict):
            document.setdefault(section, {}).update(values)
        else:
            document[section] = values
    return config_from_dict(document)


@pytest.fixture
def tiny_config():
    return make_tiny_config()


@pytest.fixture(scope="session")
def tiny_world():
    return generate_world(make_tiny_config().world)


@pytest.fixture(scope="session")
def tiny_run(tiny_world):
    """(world, config, SequenceResult) of a full tiny run; treat as read-only."""
    config = make_tiny_config()
    return tiny_world, config, unlearn_sequence(tiny_world, config)
