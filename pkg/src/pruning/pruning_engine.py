"""
Kernel pattern pruning for 3x3 layers and 1x1 kernel pooling.

Pruning never changes a kept weight: each kernel is multiplied by the keep
grid of its pattern, so kept positions hold their original bits and every
other position becomes +0.0.
"""
import json
import logging
from collections import Counter, defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ValidationError

from model_store import Diagnostic, LayerDescriptor, ModelBundle, Severity, WeightTensor

from .layer_graph import LayerGroup, LayerGroupSet
from .pattern_library import (CELLS, DictionaryDocument, PatternDictionary,
                              PatternLibraryError, PatternMask, from_document,
                              keep_matrix, retained_energy, to_document)

logger = logging.getLogger(__name__)

DOCUMENT_VERSION = 1
KERNEL_3X3 = (3, 3)
KERNEL_1X1 = (1, 1)
# kernels scored per batch when searching for best fits
ENERGY_BLOCK = 4096


class PruningError(Exception):
    """Custom exception for pruning operations"""

    pass


class EmptyDictionary(PruningError):
    pass


class WrongKernelShape(PruningError):
    pass


class InconsistentInputs(PruningError):
    pass


class AssignmentFormatError(PruningError):
    pass


class MaskSharing(str, Enum):
    PER_KERNEL = "per_kernel"
    LAYER_SHARED = "layer_shared"


class Origin(str, Enum):
    BEST_FIT = "best_fit"
    INHERITED = "inherited"
    LEFTOVER_ZEROED = "leftover_zeroed"


class KernelMaskAssignment(NamedTuple):
    """Which pattern pruned kernel (out_index, in_index) of a layer.

    For 1x1 layers every weight is its own kernel and pattern_id names the
    pattern of the pooled 3x3 chunk the weight fell into; leftover weights
    carry pattern_id None.
    """

    layer: str
    out_index: int
    in_index: int
    pattern_id: Optional[int]
    origin: Origin


@dataclass(frozen=True, eq=False)
class PruneResult:
    bundle: ModelBundle
    assignments: Tuple[KernelMaskAssignment, ...]
    dictionary: PatternDictionary
    group_set: LayerGroupSet
    diagnostics: Tuple[Diagnostic, ...] = ()

    def layer_assignments(self, layer: str) -> List[KernelMaskAssignment]:
        return [a for a in self.assignments if a.layer == layer]


def _masks_by_id(dictionary: PatternDictionary) -> List[PatternMask]:
    if not dictionary.masks:
        raise EmptyDictionary("Pattern dictionary has no masks")
    return sorted(dictionary.masks, key=lambda mask: mask.id)


def _best_fit_ids(kernels: np.ndarray, masks: List[PatternMask]) -> Tuple[np.ndarray, np.ndarray]:
    """Best mask id and retained energy for each row of an (N, 9) array"""
    keep = keep_matrix(masks)
    ids = np.array([mask.id for mask in masks], dtype=np.int64)
    winners = np.empty(len(kernels), dtype=np.int64)
    energies = np.empty(len(kernels), dtype=np.float64)
    for start in range(0, len(kernels), ENERGY_BLOCK):
        energy = retained_energy(kernels[start : start + ENERGY_BLOCK], keep)
        # masks are in id order, so argmax breaks ties towards the lowest id
        best = np.argmax(energy, axis=1)
        winners[start : start + ENERGY_BLOCK] = ids[best]
        energies[start : start + ENERGY_BLOCK] = energy[np.arange(len(best)), best]
    return winners, energies


def _majority(ids: Sequence[int]) -> int:
    counts = Counter(int(i) for i in ids)
    return max(counts, key=lambda pattern_id: (counts[pattern_id], -pattern_id))


def _mask_rows(rows: np.ndarray, ids: Sequence[int], dictionary: PatternDictionary) -> np.ndarray:
    """Zero every (N, 9) row outside the keep cells of its pattern"""
    flat_keep = {mask.id: mask.flat for mask in dictionary.masks}
    keep = np.stack([flat_keep[int(i)] for i in ids]) if len(ids) else np.zeros((0, CELLS), bool)
    return np.where(keep, rows, np.zeros_like(rows))


def _check_kernel(weights: WeightTensor, expected: Tuple[int, int]) -> None:
    if weights.kernel_shape != expected:
        raise WrongKernelShape(
            f"Layer {weights.layer} has {weights.kernel_shape} kernels, expected {expected}"
        )


def best_fit(kernel: np.ndarray, dictionary: PatternDictionary) -> Tuple[int, float]:
    """Dictionary mask keeping the largest L2 norm of kernel, ties to lowest id"""
    masks = _masks_by_id(dictionary)
    kernel = np.asarray(kernel)
    if kernel.shape != KERNEL_3X3:
        raise WrongKernelShape(f"Expected a 3x3 kernel, got {kernel.shape}")
    ids, energies = _best_fit_ids(kernel.reshape(1, CELLS), masks)
    return int(ids[0]), float(np.sqrt(energies[0]))


def apply_mask(kernel: np.ndarray, mask: PatternMask) -> np.ndarray:
    """Keep the kernel at the mask's cells, exactly zero elsewhere"""
    kernel = np.asarray(kernel)
    return np.where(mask.keep, kernel, np.zeros_like(kernel))


def prune_3x3_layer(
    weights: WeightTensor,
    dictionary: PatternDictionary,
    sharing: MaskSharing = MaskSharing.PER_KERNEL,
) -> Tuple[WeightTensor, List[KernelMaskAssignment]]:
    """Replace every 3x3 kernel by its best-fit pattern"""
    _check_kernel(weights, KERNEL_3X3)
    masks = _masks_by_id(dictionary)
    out_channels, in_channels = weights.shape[:2]
    rows = weights.values.reshape(-1, CELLS)

    ids, _ = _best_fit_ids(rows, masks)
    if sharing is MaskSharing.LAYER_SHARED and len(ids):
        ids[:] = _majority(ids)

    pruned = _mask_rows(rows, ids, dictionary).reshape(weights.shape)
    assignments = [
        KernelMaskAssignment(weights.layer, i, j, int(ids[i * in_channels + j]), Origin.BEST_FIT)
        for i in range(out_channels)
        for j in range(in_channels)
    ]
    return WeightTensor(layer=weights.layer, values=pruned), assignments


def _inherit_3x3(
    weights: WeightTensor, patterns: Sequence[int], dictionary: PatternDictionary
) -> Tuple[WeightTensor, List[KernelMaskAssignment]]:
    _check_kernel(weights, KERNEL_3X3)
    out_channels, in_channels = weights.shape[:2]
    count = out_channels * in_channels
    ids = [patterns[t % len(patterns)] for t in range(count)]
    pruned = _mask_rows(weights.values.reshape(-1, CELLS), ids, dictionary)
    assignments = [
        KernelMaskAssignment(
            weights.layer, t // in_channels, t % in_channels, int(ids[t]), Origin.INHERITED
        )
        for t in range(count)
    ]
    return WeightTensor(layer=weights.layer, values=pruned.reshape(weights.shape)), assignments


def pattern_sequence(
    layer: LayerDescriptor, assignments: Sequence[KernelMaskAssignment]
) -> List[int]:
    """
    The patterns a layer selected, in flat order.

    One entry per kernel for 3x3 layers and one per full 9-weight chunk for
    pooled 1x1 layers.
    """
    ordered = sorted(assignments, key=lambda a: (a.out_index, a.in_index))
    if layer.kernel_shape == KERNEL_3X3:
        return [int(a.pattern_id) for a in ordered if a.pattern_id is not None]
    return [
        int(a.pattern_id)
        for a in ordered[::CELLS]
        if a.origin is not Origin.LEFTOVER_ZEROED and a.pattern_id is not None
    ]


def propagate_to_children(
    group: LayerGroup,
    parent_assignments: Sequence[KernelMaskAssignment],
    bundle: ModelBundle,
    dictionary: PatternDictionary,
) -> Dict[str, Tuple[WeightTensor, List[KernelMaskAssignment]]]:
    """
    Hand the parent's 3x3 patterns down to its 3x3 children.

    Child kernel t (row-major over out, in) takes the parent pattern at
    t mod P, P being the number of parent kernels. Children with other kernel
    sizes are left for the caller.
    """
    parent = bundle.layer(group.parent)
    patterns = pattern_sequence(parent, parent_assignments)
    if parent.kernel_shape != KERNEL_3X3 or not patterns:
        return {}
    propagated = {}
    for child in group.children:
        if bundle.layer(child).kernel_shape != KERNEL_3X3:
            continue
        propagated[child] = _inherit_3x3(bundle.weight(child), patterns, dictionary)
    return propagated


def pool_1x1_layer(
    weights: WeightTensor,
    dictionary: PatternDictionary,
    inherited: Optional[Sequence[int]] = None,
    sharing: MaskSharing = MaskSharing.PER_KERNEL,
) -> Tuple[WeightTensor, List[KernelMaskAssignment]]:
    """
    Prune 1x1 weights by regrouping them into temporary 3x3 matrices.

    Weights are flattened in (out, in) order and cut into consecutive chunks of
    nine. Each full chunk is pattern pruned like a 3x3 kernel, using the
    inherited pattern for that chunk when one is given for every chunk. A
    trailing chunk of fewer than nine weights is zeroed.
    """
    _check_kernel(weights, KERNEL_1X1)
    masks = _masks_by_id(dictionary)
    out_channels, in_channels = weights.shape[:2]
    flat = weights.values.reshape(-1)
    total = flat.size
    full = total // CELLS
    if full == 0:
        logger.warning(
            "Layer %s has only %d 1x1 weights; all of them are zeroed", weights.layer, total
        )

    chunks = flat[: full * CELLS].reshape(full, CELLS)
    if inherited is not None and len(inherited) == full:
        ids = np.asarray(inherited, dtype=np.int64)
        origin = Origin.INHERITED
    else:
        ids, _ = _best_fit_ids(chunks, masks)
        if sharing is MaskSharing.LAYER_SHARED and full:
            ids[:] = _majority(ids)
        origin = Origin.BEST_FIT

    pruned = np.zeros_like(flat)
    pruned[: full * CELLS] = _mask_rows(chunks, ids, dictionary).reshape(-1)

    assignments = []
    for f in range(total):
        chunk = f // CELLS
        if chunk < full:
            assignment = KernelMaskAssignment(
                weights.layer, f // in_channels, f % in_channels, int(ids[chunk]), origin
            )
        else:
            assignment = KernelMaskAssignment(
                weights.layer, f // in_channels, f % in_channels, None, Origin.LEFTOVER_ZEROED
            )
        assignments.append(assignment)

    return WeightTensor(layer=weights.layer, values=pruned.reshape(weights.shape)), assignments


LayerOutcome = Dict[str, Tuple[WeightTensor, List[KernelMaskAssignment]]]


def _short_layer(layer: LayerDescriptor) -> bool:
    return layer.kernel_shape == KERNEL_1X1 and layer.weight_count < CELLS


def _prune_group(
    group: LayerGroup,
    bundle: ModelBundle,
    dictionary: PatternDictionary,
    sharing: MaskSharing,
    exempt_short_layers: bool,
) -> Tuple[LayerOutcome, List[Diagnostic]]:
    outcome: LayerOutcome = {}
    diagnostics: List[Diagnostic] = []

    def pool(name: str, inherited: Optional[Sequence[int]]) -> None:
        layer = bundle.layer(name)
        if _short_layer(layer):
            if exempt_short_layers:
                logger.warning(
                    "Layer %s has %d 1x1 weights (< %d); left unpruned",
                    name,
                    layer.weight_count,
                    CELLS,
                )
                diagnostics.append(
                    Diagnostic(
                        layer=name,
                        kind="ShortLayerExempt",
                        severity=Severity.WARNING,
                        detail=f"{layer.weight_count} weights cannot fill a 3x3 chunk",
                    )
                )
                return
            diagnostics.append(
                Diagnostic(
                    layer=name,
                    kind="ShortLayerZeroed",
                    severity=Severity.WARNING,
                    detail=f"all {layer.weight_count} weights zeroed as leftovers",
                )
            )
        outcome[name] = pool_1x1_layer(bundle.weight(name), dictionary, inherited, sharing)

    parent = bundle.layer(group.parent)
    if parent.kernel_shape == KERNEL_3X3:
        outcome[parent.name] = prune_3x3_layer(bundle.weight(parent.name), dictionary, sharing)
    else:
        pool(parent.name, None)

    parent_assignments = outcome[parent.name][1] if parent.name in outcome else []
    parent_patterns = pattern_sequence(parent, parent_assignments)
    outcome.update(propagate_to_children(group, parent_assignments, bundle, dictionary))

    for name in group.children:
        if name in outcome:
            continue
        child = bundle.layer(name)
        if child.kernel_shape == KERNEL_3X3:
            outcome[name] = prune_3x3_layer(bundle.weight(name), dictionary, sharing)
        else:
            pool(name, parent_patterns)

    return outcome, diagnostics


def _check_inputs(bundle: ModelBundle, group_set: LayerGroupSet) -> None:
    grouped = group_set.layers
    unknown = [name for name in grouped if not bundle.has_layer(name)]
    if unknown:
        raise InconsistentInputs(f"Groups name layers missing from the model: {unknown}")
    not_prunable = [name for name in grouped if not bundle.layer(name).is_prunable]
    if not_prunable:
        raise InconsistentInputs(f"Groups contain non-prunable layers: {not_prunable}")
    ungrouped = [layer.name for layer in bundle.prunable_layers() if layer.name not in grouped]
    if ungrouped:
        raise InconsistentInputs(f"Prunable layers missing from the groups: {ungrouped}")


def prune_model(
    bundle: ModelBundle,
    group_set: LayerGroupSet,
    dictionary: PatternDictionary,
    sharing: MaskSharing = MaskSharing.PER_KERNEL,
    exempt_short_layers: bool = True,
    threads: int = 1,
) -> PruneResult:
    """
    Prune every group: the parent first, then its children.

    Groups are independent and may run on a thread pool; results are merged
    in manifest order so the thread count never changes the output.
    """
    _check_inputs(bundle, group_set)
    _masks_by_id(dictionary)

    def run(group: LayerGroup) -> Tuple[LayerOutcome, List[Diagnostic]]:
        return _prune_group(group, bundle, dictionary, sharing, exempt_short_layers)

    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        results = list(pool.map(run, group_set.groups))

    outcome: LayerOutcome = {}
    diagnostics: List[Diagnostic] = []
    for layers, group_diagnostics in results:
        outcome.update(layers)
        diagnostics.extend(group_diagnostics)

    ordered = sorted(outcome, key=bundle.position)
    pruned = bundle.replace_weights({name: outcome[name][0] for name in ordered})
    assignments = tuple(a for name in ordered for a in outcome[name][1])
    diagnostics.sort(key=lambda d: bundle.position(d.layer))
    logger.info(
        "Pruned %d layers in %d groups with %s",
        len(ordered),
        len(group_set.groups),
        dictionary.variant.value,
    )
    return PruneResult(
        bundle=pruned,
        assignments=assignments,
        dictionary=dictionary,
        group_set=group_set,
        diagnostics=tuple(diagnostics),
    )


def assignments_by_layer(
    assignments: Sequence[KernelMaskAssignment],
) -> Dict[str, List[KernelMaskAssignment]]:
    grouped: Dict[str, List[KernelMaskAssignment]] = defaultdict(list)
    for assignment in assignments:
        grouped[assignment.layer].append(assignment)
    return dict(grouped)


class AssignmentEntry(BaseModel):
    layer: str
    i: int
    j: int
    pattern_id: Optional[int]
    origin: Origin


class AssignmentDocument(BaseModel):
    format_version: int = DOCUMENT_VERSION
    dictionary: DictionaryDocument
    assignments: List[AssignmentEntry]


def export_assignments(result: PruneResult) -> str:
    """Assignments plus the dictionary they refer to, as structured text"""
    document = AssignmentDocument(
        dictionary=to_document(result.dictionary),
        assignments=[
            AssignmentEntry(
                layer=a.layer, i=a.out_index, j=a.in_index, pattern_id=a.pattern_id, origin=a.origin
            )
            for a in result.assignments
        ],
    )
    return document.model_dump_json(indent=2) + "\n"


def parse_assignments(
    text: str, source: str = "<text>"
) -> Tuple[PatternDictionary, List[KernelMaskAssignment]]:
    try:
        document = AssignmentDocument.model_validate(json.loads(text))
    except (json.JSONDecodeError, ValidationError) as e:
        raise AssignmentFormatError(f"Assignments {source} are invalid: {str(e)}") from e
    if document.format_version != DOCUMENT_VERSION:
        raise AssignmentFormatError(
            f"{source} has unsupported format version {document.format_version}"
        )
    try:
        dictionary = from_document(document.dictionary, source)
    except PatternLibraryError as e:
        raise AssignmentFormatError(str(e)) from e
    assignments = [
        KernelMaskAssignment(e.layer, e.i, e.j, e.pattern_id, e.origin)
        for e in document.assignments
    ]
    return dictionary, assignments


def save_assignments(result: PruneResult, path: Union[str, Path]) -> None:
    try:
        Path(path).write_text(export_assignments(result), encoding="utf-8")
    except OSError as e:
        raise PruningError(f"Failed to write assignments {path}: {str(e)}") from e


def load_assignments(
    path: Union[str, Path]
) -> Tuple[PatternDictionary, List[KernelMaskAssignment]]:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise AssignmentFormatError(f"Failed to read assignments {path}: {str(e)}") from e
    return parse_assignments(text, source=str(path))
