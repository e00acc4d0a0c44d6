import json
import time

import numpy as np
import pytest

from model_store import ModelBundle, WeightTensor, build_bundle, make_layer
from pruning.layer_graph import (CycleDetected, LayerGroup, UnknownLayer,
                                 group_layers, group_members, groups_document,
                                 prunable_parents)
from pruning.synthetic import random_dag


def graph_bundle(*specs) -> ModelBundle:
    """specs are (name, kernel, parents)"""
    layers = [make_layer(name, 2, 2, kernel, list(parents)) for name, kernel, parents in specs]
    return build_bundle(layers, {layer.name: np.ones(layer.shape) for layer in layers})


def test_single_layer_is_its_own_parent():
    group_set = group_layers(graph_bundle(("A", 3, ())))
    assert group_set.groups == (LayerGroup(parent="A", children=()),)


def test_chain_collapses_into_root_group():
    bundle = graph_bundle(("A", 3, ()), ("B", 3, ("A",)), ("C", 3, ("B",)))
    group_set = group_layers(bundle)
    assert group_set.groups == (LayerGroup(parent="A", children=("B", "C")),)


def test_diamond_join_is_claimed_once():
    bundle = graph_bundle(
        ("A", 3, ()), ("B", 3, ("A",)), ("C", 1, ("A",)), ("D", 3, ("B", "C"))
    )
    group_set = group_layers(bundle)
    assert group_set.groups == (LayerGroup(parent="A", children=("B", "C", "D")),)


def test_join_of_two_roots_goes_to_first_root_reaching_it():
    bundle = graph_bundle(("A", 3, ()), ("B", 3, ()), ("C", 3, ("B", "A")))
    group_set = group_layers(bundle)
    assert group_set.groups == (
        LayerGroup(parent="A", children=("C",)),
        LayerGroup(parent="B", children=()),
    )


def test_depth_first_walk_claims_a_join_before_a_later_root():
    # A -> B -> D is walked before root C gets its turn
    bundle = graph_bundle(
        ("A", 3, ()), ("B", 3, ("A",)), ("C", 3, ()), ("D", 1, ("C", "B")), ("E", 3, ("C",))
    )
    group_set = group_layers(bundle)
    assert group_set.groups == (
        LayerGroup(parent="A", children=("B", "D")),
        LayerGroup(parent="C", children=("E",)),
    )


def test_non_prunable_layers_are_transparent():
    bundle = graph_bundle(("A", 3, ()), ("X", 5, ("A",)), ("B", 1, ("X",)))
    assert prunable_parents(bundle) == {"A": [], "B": ["A"]}
    group_set = group_layers(bundle)
    assert group_set.groups == (LayerGroup(parent="A", children=("B",)),)
    assert "X" not in group_set.layers


def test_joined_non_prunable_ladder_resolves_quickly():
    # each 5x5 layer joins the two before it, so the paths through them double per level
    specs = [("X0", 5, ()), ("X1", 5, ("X0",))]
    specs += [(f"X{n}", 5, (f"X{n - 1}", f"X{n - 2}")) for n in range(2, 42)]
    specs += [("root", 3, ()), ("sink", 3, ("X41", "root"))]
    bundle = graph_bundle(*specs)

    started = time.perf_counter()
    group_set = group_layers(bundle)
    assert time.perf_counter() - started < 1.0
    assert prunable_parents(bundle)["sink"] == ["root"]
    assert group_set.groups == (LayerGroup(parent="root", children=("sink",)),)


def test_group_members():
    bundle = graph_bundle(("A", 3, ()), ("B", 3, ("A",)), ("C", 3, ("B",)))
    group_set = group_layers(bundle)
    assert group_members(group_set, "B").parent == "A"
    assert group_members(group_set, "A") == group_members(group_set, "C")
    with pytest.raises(UnknownLayer):
        group_members(group_set, "Z")


def test_cycle_through_non_prunable_layer():
    a = make_layer("A", 2, 2, 3, ["X"])
    x = make_layer("X", 2, 2, 5, ["A"])
    weights = {layer.name: WeightTensor(layer.name, np.ones(layer.shape)) for layer in (a, x)}
    with pytest.raises(CycleDetected):
        group_layers(ModelBundle(layers=(a, x), weights=weights))


def test_group_with_parent_as_child_is_rejected():
    with pytest.raises(ValueError):
        LayerGroup(parent="A", children=("A",))


def test_groups_document():
    bundle = graph_bundle(("A", 3, ()), ("B", 3, ("A",)), ("C", 1, ()))
    document = json.loads(groups_document(group_layers(bundle)))
    assert document["format_version"] == 1
    assert document["layer_to_group"] == {"A": 0, "B": 0, "C": 1}
    assert document["groups"][1] == {"id": 1, "parent": "C", "children": []}


@pytest.mark.parametrize("seed", range(100))
def test_random_dag_grouping_properties(seed):
    bundle = random_dag(layers=int(np.random.default_rng(seed).integers(1, 51)), seed=seed)
    group_set = group_layers(bundle)
    parents = prunable_parents(bundle)

    members = group_set.layers
    assert len(members) == len(set(members))
    assert set(members) == {layer.name for layer in bundle.prunable_layers()}

    children = [child for group in group_set.groups for child in group.children]
    assert len(children) == len(set(children))
    roots = {group.parent for group in group_set.groups}
    assert roots == {name for name, found in parents.items() if not found}

    assert group_layers(bundle) == group_set
