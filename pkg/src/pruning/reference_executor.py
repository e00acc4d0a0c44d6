"""
Reference 2-D convolution used to check pruned models.

Both paths accumulate in float32 in the same order: input channel outer,
kernel position row-major inner, one vectorized add over the output map per
(channel, position). The sparse path walks kernels grouped by pattern id and
only visits kept positions with nonzero weights. Skipping a term that would
add zero leaves the float32 sum unchanged, so the two paths agree bit for bit.
"""
import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel

from model_store import ModelBundle, WeightTensor

from .pattern_library import CELLS, PatternDictionary
from .pruning_engine import (KERNEL_1X1, KERNEL_3X3, KernelMaskAssignment,
                             PruneResult, assignments_by_layer)

logger = logging.getLogger(__name__)

FEATURE_MAP_MAGIC = b"RTFM"
_FM_HEADER = struct.Struct("<4sIII")
# group key for leftover-zeroed kernels
_NO_PATTERN = -1


class ExecutorError(Exception):
    """Custom exception for reference execution errors"""

    pass


class ShapeMismatch(ExecutorError):
    pass


class MissingAssignment(ExecutorError):
    pass


class FeatureMapFormatError(ExecutorError):
    pass


@dataclass(frozen=True, eq=False)
class FeatureMap:
    """(channels, height, width) float32 activations"""

    values: np.ndarray

    def __post_init__(self) -> None:
        values = np.array(self.values, dtype=np.float32, copy=True)
        if values.ndim != 3 or min(values.shape) < 1:
            raise ShapeMismatch(f"Feature map must be non-empty (C, H, W), got {values.shape}")
        if not np.isfinite(values).all():
            raise ExecutorError("Feature map contains non-finite values")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @property
    def channels(self) -> int:
        return self.values.shape[0]

    @property
    def spatial(self) -> Tuple[int, int]:
        return (self.values.shape[1], self.values.shape[2])


class LayerTrace(BaseModel):
    layer: str
    macs_performed: int
    macs_skipped: int


class ExecutionTrace(BaseModel):
    macs_performed: int = 0
    macs_skipped: int = 0
    per_layer: List[LayerTrace] = []

    @property
    def macs_dense(self) -> int:
        return self.macs_performed + self.macs_skipped

    def merged(self, other: "ExecutionTrace") -> "ExecutionTrace":
        return ExecutionTrace(
            macs_performed=self.macs_performed + other.macs_performed,
            macs_skipped=self.macs_skipped + other.macs_skipped,
            per_layer=self.per_layer + other.per_layer,
        )


def _padded(feature_map: FeatureMap, weights: WeightTensor) -> np.ndarray:
    if feature_map.channels != weights.shape[1]:
        raise ShapeMismatch(
            f"Layer {weights.layer} expects {weights.shape[1]} input channels, "
            f"got {feature_map.channels}"
        )
    kh, kw = weights.kernel_shape
    # even kernels put the extra row and column on the bottom and right
    pad = ((0, 0), ((kh - 1) // 2, kh // 2), ((kw - 1) // 2, kw // 2))
    return np.pad(feature_map.values, pad)


def conv2d_dense(feature_map: FeatureMap, weights: WeightTensor) -> FeatureMap:
    """Stride-1 same-padded cross-correlation"""
    padded = _padded(feature_map, weights)
    out_channels, in_channels, kh, kw = weights.shape
    height, width = feature_map.spatial
    w = weights.values
    acc = np.zeros((out_channels, height, width), dtype=np.float32)
    for c in range(in_channels):
        for ky in range(kh):
            for kx in range(kw):
                window = padded[c, ky : ky + height, kx : kx + width]
                acc += w[:, c, ky, kx][:, None, None] * window
    return FeatureMap(values=acc)


def pattern_keep_table(dictionary: PatternDictionary) -> Dict[int, np.ndarray]:
    return dictionary.keep_table()


def kernel_keep(
    weights: WeightTensor,
    assignments: Sequence[KernelMaskAssignment],
    patterns: Mapping[int, np.ndarray],
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Keep flags and pattern ids per kernel of a layer.

    Returns:
        keep: (out, in, kh, kw) bool
        pattern_ids: (out, in) int, _NO_PATTERN for leftover kernels
    """
    out_channels, in_channels, kh, kw = weights.shape
    keep = np.zeros(weights.shape, dtype=bool)
    pattern_ids = np.full((out_channels, in_channels), _NO_PATTERN, dtype=np.int64)
    covered = np.zeros((out_channels, in_channels), dtype=bool)

    for a in assignments:
        if not (0 <= a.out_index < out_channels and 0 <= a.in_index < in_channels):
            raise ShapeMismatch(
                f"Assignment ({a.out_index}, {a.in_index}) is outside layer {weights.layer}"
            )
        covered[a.out_index, a.in_index] = True
        if a.pattern_id is None:
            continue
        if a.pattern_id not in patterns:
            raise MissingAssignment(f"Layer {weights.layer} uses unknown pattern {a.pattern_id}")
        grid = np.asarray(patterns[a.pattern_id], dtype=bool)
        pattern_ids[a.out_index, a.in_index] = a.pattern_id
        if (kh, kw) == KERNEL_3X3:
            keep[a.out_index, a.in_index] = grid
        elif (kh, kw) == KERNEL_1X1:
            f = a.out_index * in_channels + a.in_index
            keep[a.out_index, a.in_index, 0, 0] = grid.reshape(-1)[f % CELLS]
        else:
            raise ShapeMismatch(f"Layer {weights.layer} has no pattern form for {kh}x{kw}")

    if not covered.all():
        missing = np.argwhere(~covered)[0]
        raise MissingAssignment(
            f"Layer {weights.layer} kernel ({missing[0]}, {missing[1]}) has no assignment"
        )
    return keep, pattern_ids


def conv2d_pattern_sparse(
    feature_map: FeatureMap,
    weights: WeightTensor,
    assignments: Sequence[KernelMaskAssignment],
    patterns: Mapping[int, np.ndarray],
) -> Tuple[FeatureMap, ExecutionTrace]:
    """
    Pattern-grouped convolution that only visits kept nonzero kernel positions.

    For each input channel the output channels are grouped by the pattern of
    their kernel, and each group is accumulated over the pattern's kept
    positions in row-major order.
    """
    keep, pattern_ids = kernel_keep(weights, assignments, patterns)
    padded = _padded(feature_map, weights)
    out_channels, in_channels, kh, kw = weights.shape
    height, width = feature_map.spatial
    w = weights.values
    # a kept position holding a zero weight adds nothing and counts as skipped
    active = keep & (w != 0)
    acc = np.zeros((out_channels, height, width), dtype=np.float32)

    for c in range(in_channels):
        for pattern_id in np.unique(pattern_ids[:, c]):
            if pattern_id == _NO_PATTERN:
                continue
            outs = np.flatnonzero(pattern_ids[:, c] == pattern_id)
            for ky in range(kh):
                for kx in range(kw):
                    kept = outs[active[outs, c, ky, kx]]
                    if not len(kept):
                        continue
                    window = padded[c, ky : ky + height, kx : kx + width]
                    acc[kept] += w[kept, c, ky, kx][:, None, None] * window

    spatial = height * width
    performed = int(np.count_nonzero(active)) * spatial
    skipped = int(keep.size) * spatial - performed
    trace = ExecutionTrace(
        macs_performed=performed,
        macs_skipped=skipped,
        per_layer=[LayerTrace(layer=weights.layer, macs_performed=performed, macs_skipped=skipped)],
    )
    return FeatureMap(values=acc), trace


class LayerVerdict(BaseModel):
    layer: str
    pattern_path: bool
    executors_match: bool
    max_executor_diff: float
    mask_violations: int
    deviation_from_original: float
    synthetic_input: bool = False
    macs_performed: int
    macs_skipped: int


class VerificationReport(BaseModel):
    equivalent: bool
    tolerance: float
    layers: List[LayerVerdict]
    trace: ExecutionTrace
    max_deviation_from_original: float

    @property
    def failures(self) -> List[LayerVerdict]:
        return [v for v in self.layers if not v.executors_match or v.mask_violations]


def _layer_input(
    bundle: ModelBundle,
    name: str,
    feature_map: FeatureMap,
    outputs: Mapping[str, FeatureMap],
    position: int,
) -> Tuple[FeatureMap, bool]:
    """Feed a layer from its first parent's output, the given input, or a seeded stand-in"""
    layer = bundle.layer(name)
    for parent in layer.parents[:1]:
        upstream = outputs.get(parent)
        if upstream is not None and upstream.channels == layer.in_channels:
            return upstream, False
    if feature_map.channels == layer.in_channels:
        return feature_map, False
    rng = np.random.default_rng(position)
    height, width = feature_map.spatial
    values = rng.uniform(-1.0, 1.0, size=(layer.in_channels, height, width))
    return FeatureMap(values=values), True


def run_chain(bundle: ModelBundle, feature_map: FeatureMap) -> Dict[str, FeatureMap]:
    """Dense forward pass of every layer in manifest order"""
    first = bundle.layers[0]
    if feature_map.channels != first.in_channels:
        raise ShapeMismatch(
            f"Input has {feature_map.channels} channels, {first.name} expects {first.in_channels}"
        )
    outputs: Dict[str, FeatureMap] = {}
    for position, layer in enumerate(bundle.layers):
        source, _ = _layer_input(bundle, layer.name, feature_map, outputs, position)
        outputs[layer.name] = conv2d_dense(source, bundle.weight(layer.name))
    return outputs


def _max_abs_diff(a: FeatureMap, b: FeatureMap) -> float:
    return float(np.max(np.abs(a.values.astype(np.float64) - b.values.astype(np.float64))))


def verify_equivalence(
    original: ModelBundle,
    result: PruneResult,
    feature_map: FeatureMap,
    tolerance: float = 0.0,
    patterns: Optional[Mapping[int, np.ndarray]] = None,
) -> VerificationReport:
    """
    Run dense and pattern-grouped executors on the pruned weights layer by layer.

    With tolerance 0 the executors must match bit for bit. The deviation of
    pruned from original outputs on the same layer input is informational.
    """
    pruned = result.bundle
    if [layer.name for layer in original.layers] != [layer.name for layer in pruned.layers]:
        raise ShapeMismatch("Original and pruned bundles declare different layers")
    first = pruned.layers[0]
    if feature_map.channels != first.in_channels:
        raise ShapeMismatch(
            f"Input has {feature_map.channels} channels, {first.name} expects {first.in_channels}"
        )

    table = patterns if patterns is not None else pattern_keep_table(result.dictionary)
    by_layer = assignments_by_layer(result.assignments)
    outputs: Dict[str, FeatureMap] = {}
    verdicts: List[LayerVerdict] = []
    trace = ExecutionTrace()

    for position, layer in enumerate(pruned.layers):
        source, synthetic = _layer_input(pruned, layer.name, feature_map, outputs, position)
        weights = pruned.weight(layer.name)
        dense = conv2d_dense(source, weights)
        deviation = _max_abs_diff(dense, conv2d_dense(source, original.weight(layer.name)))

        assignments = by_layer.get(layer.name)
        if assignments:
            sparse, layer_trace = conv2d_pattern_sparse(source, weights, assignments, table)
            keep, _ = kernel_keep(weights, assignments, table)
            violations = int(np.count_nonzero((weights.values != 0) & ~keep))
            if tolerance == 0.0:
                match = bool(
                    np.array_equal(sparse.values.view(np.uint32), dense.values.view(np.uint32))
                )
            else:
                match = bool(np.allclose(sparse.values, dense.values, rtol=0.0, atol=tolerance))
            diff = _max_abs_diff(sparse, dense)
        else:
            dense_macs = weights.values.size * source.spatial[0] * source.spatial[1]
            layer_trace = ExecutionTrace(
                macs_performed=dense_macs,
                per_layer=[LayerTrace(layer=layer.name, macs_performed=dense_macs, macs_skipped=0)],
            )
            violations, match, diff = 0, True, 0.0

        if violations:
            logger.warning("Layer %s has %d weights outside its patterns", layer.name, violations)
        outputs[layer.name] = dense
        trace = trace.merged(layer_trace)
        verdicts.append(
            LayerVerdict(
                layer=layer.name,
                pattern_path=bool(assignments),
                executors_match=match,
                max_executor_diff=diff,
                mask_violations=violations,
                deviation_from_original=deviation,
                synthetic_input=synthetic,
                macs_performed=layer_trace.macs_performed,
                macs_skipped=layer_trace.macs_skipped,
            )
        )

    return VerificationReport(
        equivalent=all(v.executors_match and not v.mask_violations for v in verdicts),
        tolerance=tolerance,
        layers=verdicts,
        trace=trace,
        max_deviation_from_original=max((v.deviation_from_original for v in verdicts), default=0.0),
    )


def save_feature_map(feature_map: FeatureMap, path: Union[str, Path]) -> None:
    channels, height, width = feature_map.values.shape
    header = _FM_HEADER.pack(FEATURE_MAP_MAGIC, channels, height, width)
    try:
        Path(path).write_bytes(header + feature_map.values.astype("<f4").tobytes())
    except OSError as e:
        raise ExecutorError(f"Failed to write feature map {path}: {str(e)}") from e


def load_feature_map(path: Union[str, Path]) -> FeatureMap:
    """Read a raw little-endian f32 feature map with its shape header"""
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as e:
        raise FeatureMapFormatError(f"Failed to read feature map {path}: {str(e)}") from e
    if len(data) < _FM_HEADER.size:
        raise FeatureMapFormatError(f"{path} is too short for a feature map header")
    magic, channels, height, width = _FM_HEADER.unpack_from(data, 0)
    if magic != FEATURE_MAP_MAGIC:
        raise FeatureMapFormatError(f"{path} has bad magic {magic!r}")
    count = channels * height * width
    if len(data) - _FM_HEADER.size != count * 4:
        raise FeatureMapFormatError(
            f"{path} holds {len(data) - _FM_HEADER.size} bytes, header needs {count * 4}"
        )
    values = np.frombuffer(data, dtype="<f4", count=count, offset=_FM_HEADER.size)
    return FeatureMap(values=values.reshape(channels, height, width))
