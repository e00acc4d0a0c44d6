"""Seeded toy models for reproducing compression figures without trained networks"""
import logging
from enum import Enum
from typing import Dict, List, Tuple

import numpy as np

from model_store import LayerDescriptor, ModelBundle, build_bundle, make_layer

from .reference_executor import FeatureMap

logger = logging.getLogger(__name__)

MAX_DAG_LAYERS = 50
INPUT_CHANNELS = 3
_CHANNEL_CHOICES = (2, 4, 8, 9, 16)


class SyntheticKind(str, Enum):
    CHAIN_3X3 = "chain3x3"
    MIXED = "mixed"
    DAG = "dag"


def dense_weights(rng: np.random.Generator, shape: Tuple[int, ...]) -> np.ndarray:
    """Random float32 weights with no zeros: magnitude in [0.05, 1], random sign"""
    magnitude = rng.uniform(0.05, 1.0, size=shape)
    sign = np.where(rng.random(size=shape) < 0.5, -1.0, 1.0)
    return (magnitude * sign).astype(np.float32)


def _assemble(layers: List[LayerDescriptor], rng: np.random.Generator) -> ModelBundle:
    tensors: Dict[str, np.ndarray] = {
        layer.name: dense_weights(rng, layer.shape) for layer in layers
    }
    return build_bundle(layers, tensors)


def chain_3x3(layers: int = 4, seed: int = 0, channels: int = 8) -> ModelBundle:
    """A linear chain of dense 3x3 convolutions"""
    if layers < 1:
        raise ValueError("A chain needs at least one layer")
    rng = np.random.default_rng(seed)
    descriptors = []
    in_channels = INPUT_CHANNELS
    for n in range(layers):
        parents = [descriptors[-1].name] if descriptors else []
        descriptors.append(make_layer(f"conv{n + 1}", channels, in_channels, 3, parents))
        in_channels = channels
    return _assemble(descriptors, rng)


def mixed_model(layers: int = 6, seed: int = 0) -> ModelBundle:
    """
    A chain alternating 3x3 and 1x1 convolutions.

    With four or more layers the middle one is a non-prunable 5x5 convolution,
    so grouping has to hop across it.
    """
    if layers < 1:
        raise ValueError("A model needs at least one layer")
    rng = np.random.default_rng(seed)
    descriptors: List[LayerDescriptor] = []
    in_channels = INPUT_CHANNELS
    for n in range(layers):
        if layers >= 4 and n == layers // 2:
            kernel = 5
        else:
            kernel = 3 if n % 2 == 0 else 1
        out_channels = int(rng.choice(_CHANNEL_CHOICES))
        parents = [descriptors[-1].name] if descriptors else []
        descriptors.append(make_layer(f"layer{n + 1}", out_channels, in_channels, kernel, parents))
        in_channels = out_channels
    return _assemble(descriptors, rng)


def random_dag(layers: int = 20, seed: int = 0) -> ModelBundle:
    """
    A random acyclic model of up to MAX_DAG_LAYERS layers.

    Every layer after the first draws one to three earlier parents, or
    occasionally none to start a new root. Input channels follow the first
    parent's output channels.
    """
    if not 1 <= layers <= MAX_DAG_LAYERS:
        raise ValueError(f"DAG size must be within 1..{MAX_DAG_LAYERS}, got {layers}")
    rng = np.random.default_rng(seed)
    descriptors: List[LayerDescriptor] = []
    for n in range(layers):
        if n == 0 or rng.random() < 0.1:
            parents: List[str] = []
            in_channels = INPUT_CHANNELS
        else:
            count = int(rng.integers(1, min(3, n) + 1))
            picks = rng.choice(n, size=count, replace=False)
            parents = [descriptors[int(p)].name for p in picks]
            in_channels = descriptors[int(picks[0])].out_channels
        kernel = int(rng.choice((3, 3, 1, 5)))
        out_channels = int(rng.choice(_CHANNEL_CHOICES))
        descriptors.append(make_layer(f"node{n}", out_channels, in_channels, kernel, parents))
    return _assemble(descriptors, rng)


def build_synthetic(kind: SyntheticKind, layers: int, seed: int) -> ModelBundle:
    builders = {
        SyntheticKind.CHAIN_3X3: chain_3x3,
        SyntheticKind.MIXED: mixed_model,
        SyntheticKind.DAG: random_dag,
    }
    bundle = builders[kind](layers=layers, seed=seed)
    logger.debug("Built %s model with %d layers (seed %d)", kind.value, len(bundle.layers), seed)
    return bundle


def random_feature_map(channels: int, height: int = 8, width: int = 8, seed: int = 0) -> FeatureMap:
    rng = np.random.default_rng(seed)
    return FeatureMap(values=rng.uniform(-1.0, 1.0, size=(channels, height, width)))
