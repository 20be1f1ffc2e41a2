import hashlib
import json
import logging

import numpy as np
import pytest

from guidedflow.env import default_world, generate_expert
from guidedflow.flow import FlowTrainConfig, VectorFieldModel, train

# desk-scale training recipe shared by the sampler and acceptance tests
FLOW_RECIPE = {"count": 2000, "data_seed": 0, "hidden": [256, 256, 256], "epochs": 300,
               "lr": 1e-3, "batch_size": 256, "seed": 0}


@pytest.fixture(scope="session")
def world():
    return default_world()


@pytest.fixture(scope="session")
def expert_data(world):
    return generate_expert(world, FLOW_RECIPE["count"], seed=FLOW_RECIPE["data_seed"])


@pytest.fixture(scope="session")
def trained_flow(request, world, expert_data):
    """Flow trained once per recipe; the checkpoint is kept in pytest's cache directory."""
    key = hashlib.sha1(json.dumps({**FLOW_RECIPE, "world": world.to_dict()}, sort_keys=True)
                       .encode()).hexdigest()[:12]
    path = request.config.cache.mkdir("guidedflow") / f"flow_{key}.bin"
    if path.exists():
        return VectorFieldModel.load(path)
    logging.getLogger(__name__).info("training flow %s", key)
    model = VectorFieldModel(world.layout, hidden=tuple(FLOW_RECIPE["hidden"]), seed=FLOW_RECIPE["seed"])
    train(model, expert_data, FlowTrainConfig(epochs=FLOW_RECIPE["epochs"], lr=FLOW_RECIPE["lr"],
                                              batch_size=FLOW_RECIPE["batch_size"], seed=FLOW_RECIPE["seed"]))
    model.save(path)
    return model


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
