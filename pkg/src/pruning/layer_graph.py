import logging
from typing import Dict, List, Tuple

import networkx as nx
from pydantic import BaseModel, ConfigDict, model_validator

from model_store import ModelBundle

logger = logging.getLogger(__name__)

DOCUMENT_VERSION = 1


class LayerGraphError(Exception):
    """Custom exception for layer grouping errors"""

    pass


class CycleDetected(LayerGraphError):
    pass


class UnknownLayer(LayerGraphError):
    pass


class LayerGroup(BaseModel):
    """A parent layer and the child layers that share its kernel masks"""

    model_config = ConfigDict(frozen=True)

    parent: str
    children: Tuple[str, ...] = ()

    @model_validator(mode="after")
    def _parent_not_child(self) -> "LayerGroup":
        if self.parent in self.children:
            raise ValueError(f"layer {self.parent} is both parent and child")
        return self

    @property
    def members(self) -> Tuple[str, ...]:
        return (self.parent,) + self.children


class LayerGroupSet(BaseModel):
    model_config = ConfigDict(frozen=True)

    groups: Tuple[LayerGroup, ...] = ()

    @model_validator(mode="after")
    def _check_partition(self) -> "LayerGroupSet":
        seen = set()
        for group in self.groups:
            for name in group.members:
                if name in seen:
                    raise ValueError(f"layer {name} appears in more than one group")
                seen.add(name)
        return self

    @property
    def layers(self) -> List[str]:
        return [name for group in self.groups for name in group.members]

    def group_index(self, layer: str) -> int:
        for index, group in enumerate(self.groups):
            if layer in group.members:
                return index
        raise UnknownLayer(f"Layer {layer} is not in any group")


def prunable_parents(bundle: ModelBundle) -> Dict[str, List[str]]:
    """
    Parent edges restricted to prunable layers.

    Non-prunable layers are transparent: an edge through one connects the
    nearest prunable ancestor. Order follows parent declaration order.
    """
    resolved: Dict[str, List[str]] = {}
    # nearest prunable ancestors of each non-prunable layer, filled on first walk
    hops: Dict[str, List[str]] = {}

    def nearest(name: str, trail: Tuple[str, ...]) -> List[str]:
        if name in trail:
            raise CycleDetected(f"Cycle through {' -> '.join(trail + (name,))}")
        layer = bundle.layer(name)
        if layer.is_prunable:
            return [name]
        if name in hops:
            return hops[name]
        found: List[str] = []
        for parent in layer.parents:
            for ancestor in nearest(parent, trail + (name,)):
                if ancestor not in found:
                    found.append(ancestor)
        hops[name] = found
        return found

    for layer in bundle.prunable_layers():
        parents: List[str] = []
        for parent in layer.parents:
            for ancestor in nearest(parent, (layer.name,)):
                if ancestor not in parents and ancestor != layer.name:
                    parents.append(ancestor)
        resolved[layer.name] = parents
    return resolved


def group_layers(bundle: ModelBundle) -> LayerGroupSet:
    """
    Partition the prunable layers into parent-child groups.

    A layer without a prunable parent is a root and heads its own group. Roots
    are walked depth first in manifest order, descending into children in
    manifest order; every layer joins the group of the root whose walk reaches
    it first, so a chain collapses into the group of its root and a join is
    claimed by exactly one group.
    """
    parents = prunable_parents(bundle)

    graph = nx.DiGraph()
    graph.add_nodes_from(parents)
    # successor lists keep insertion order, so children are added by position
    for child in sorted(parents, key=bundle.position):
        for parent in parents[child]:
            graph.add_edge(parent, child)
    if not nx.is_directed_acyclic_graph(graph):
        cycle = [edge[0] for edge in nx.find_cycle(graph)]
        raise CycleDetected(f"Cycle through {' -> '.join(cycle + [cycle[0]])}")

    roots = sorted((name for name, found in parents.items() if not found), key=bundle.position)
    root_of: Dict[str, str] = {}
    for root in roots:
        for name in nx.dfs_preorder_nodes(graph, root):
            root_of.setdefault(name, root)

    children: Dict[str, List[str]] = {root: [] for root in roots}
    for name, root in root_of.items():
        if name != root:
            children[root].append(name)

    groups = [
        LayerGroup(parent=root, children=tuple(sorted(children[root], key=bundle.position)))
        for root in roots
    ]
    logger.debug("Grouped %d prunable layers into %d groups", len(parents), len(groups))
    return LayerGroupSet(groups=tuple(groups))


def group_members(group_set: LayerGroupSet, layer: str) -> LayerGroup:
    """Return the unique group containing layer"""
    return group_set.groups[group_set.group_index(layer)]


class GroupEntry(BaseModel):
    id: int
    parent: str
    children: List[str]


class GroupDocument(BaseModel):
    format_version: int = DOCUMENT_VERSION
    groups: List[GroupEntry]
    layer_to_group: Dict[str, int]


def groups_document(group_set: LayerGroupSet) -> str:
    """Structured text export: groups plus a layer -> group id map"""
    document = GroupDocument(
        groups=[
            GroupEntry(id=index, parent=group.parent, children=list(group.children))
            for index, group in enumerate(group_set.groups)
        ],
        layer_to_group={
            name: index
            for index, group in enumerate(group_set.groups)
            for name in group.members
        },
    )
    return document.model_dump_json(indent=2) + "\n"

