from typing import List, Optional

import numpy as np
import pytest

from model_store import ModelBundle, build_bundle, make_layer
from pruning.layer_graph import group_layers
from pruning.pattern_library import (PatternDictionary, Variant,
                                     calibrate_dictionary)
from pruning.pruning_engine import PruneResult, prune_model
from pruning.synthetic import chain_3x3, dense_weights, mixed_model

CALIBRATION_TRIALS = 2000


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def dict_2ep() -> PatternDictionary:
    return calibrate_dictionary(Variant.EP2, trials=CALIBRATION_TRIALS, seed=11)


@pytest.fixture(scope="session")
def dict_3ep() -> PatternDictionary:
    return calibrate_dictionary(Variant.EP3, trials=CALIBRATION_TRIALS, seed=11)


@pytest.fixture
def chain_bundle() -> ModelBundle:
    return chain_3x3(layers=3, seed=7)


@pytest.fixture
def mixed_bundle() -> ModelBundle:
    return mixed_model(layers=6, seed=3)


def single_layer(
    name: str = "conv1",
    out_channels: int = 4,
    in_channels: int = 2,
    kernel: int = 3,
    seed: int = 0,
    parents: Optional[List[str]] = None,
) -> ModelBundle:
    """One dense layer bundle"""
    layer = make_layer(name, out_channels, in_channels, kernel, parents)
    weights = dense_weights(np.random.default_rng(seed), layer.shape)
    return build_bundle([layer], {name: weights})


def prune(bundle: ModelBundle, dictionary: PatternDictionary, **kwargs) -> PruneResult:
    return prune_model(bundle, group_layers(bundle), dictionary, **kwargs)
