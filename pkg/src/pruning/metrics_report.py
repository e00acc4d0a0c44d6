import logging
from collections import Counter
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel

from model_store import Diagnostic, LayerDescriptor, ModelBundle, Severity, WeightTensor

from .pattern_library import CELLS
from .pruning_engine import KERNEL_1X1, Origin, PruneResult

logger = logging.getLogger(__name__)

DOCUMENT_VERSION = 1
DEFAULT_INPUT_SPATIAL = (16, 16)


class MetricsError(Exception):
    """Custom exception for report computation errors"""

    pass


class ShapeMismatch(MetricsError):
    pass


class LayerStats(BaseModel):
    layer: str
    kernel: str
    prunable: bool
    total_weights: int
    nonzero_weights: int
    # 1x1 layers count pooled 9-weight chunks as kernels
    kernels_total: int
    kernels_fully_zero: int
    leftover_weights: int = 0
    mac_dense: int
    mac_sparse: int

    @property
    def sparsity(self) -> float:
        return 1.0 - self.nonzero_weights / self.total_weights if self.total_weights else 0.0


class PruneReport(BaseModel):
    per_layer: List[LayerStats]
    non_prunable: List[LayerStats] = []
    model_total_weights: int
    model_nonzero: int
    reduction_ratio: float
    sparsity: float
    mac_dense: int
    mac_sparse: int
    layer_count: int
    include_non_prunable: bool = False
    diagnostics: List[Diagnostic] = []


class KernelCensus(BaseModel):
    kernels: Dict[str, int]
    weights: Dict[str, int]
    kernel_share: Dict[str, float]
    weight_share: Dict[str, float]


class PatternUsage(BaseModel):
    pattern_id: Optional[int]
    origin: Origin
    kernels: int


def _kernel_label(kernel_shape: Tuple[int, int]) -> str:
    return f"{kernel_shape[0]}x{kernel_shape[1]}"


def _kernel_units(values: np.ndarray) -> Tuple[np.ndarray, int]:
    """Rows that count as kernels, plus the number of trailing leftover weights"""
    out_channels, in_channels, kh, kw = values.shape
    if (kh, kw) == KERNEL_1X1:
        flat = values.reshape(-1)
        full = flat.size // CELLS
        return flat[: full * CELLS].reshape(full, CELLS), flat.size - full * CELLS
    return values.reshape(out_channels * in_channels, kh * kw), 0


def layer_stats(
    original: WeightTensor,
    pruned: WeightTensor,
    input_spatial: Tuple[int, int] = DEFAULT_INPUT_SPATIAL,
) -> LayerStats:
    """
    Weight and MAC counts of one layer.

    Convolutions are taken as stride 1 with same padding, so the output map
    has the input's spatial size and every weight costs out_h * out_w MACs.
    """
    if original.shape != pruned.shape:
        raise ShapeMismatch(
            f"Layer {pruned.layer}: original {original.shape} vs pruned {pruned.shape}"
        )
    out_h, out_w = input_spatial
    values = pruned.values
    total = int(values.size)
    nonzero = int(np.count_nonzero(values))

    units, leftover = _kernel_units(values)
    fully_zero = int(np.count_nonzero(~units.any(axis=1))) if len(units) else 0
    kernels_total = len(units) + (1 if leftover else 0)

    return LayerStats(
        layer=pruned.layer,
        kernel=_kernel_label(pruned.kernel_shape),
        prunable=pruned.kernel_shape in ((1, 1), (3, 3)),
        total_weights=total,
        nonzero_weights=nonzero,
        kernels_total=kernels_total,
        kernels_fully_zero=fully_zero,
        leftover_weights=leftover,
        mac_dense=total * out_h * out_w,
        mac_sparse=nonzero * out_h * out_w,
    )


def _aggregate(
    stats: List[Tuple[LayerDescriptor, LayerStats]],
    include_non_prunable: bool,
    diagnostics: Sequence[Diagnostic] = (),
) -> PruneReport:
    prunable = [s for layer, s in stats if layer.is_prunable]
    others = [s for layer, s in stats if not layer.is_prunable]
    counted = prunable + others if include_non_prunable else prunable

    total = sum(s.total_weights for s in counted)
    nonzero = sum(s.nonzero_weights for s in counted)
    notes = list(diagnostics)
    if not counted:
        notes.append(
            Diagnostic(
                layer="*",
                kind="NoPrunableLayers",
                severity=Severity.WARNING,
                detail="nothing to measure; reduction ratio defaults to 1",
            )
        )
        ratio = 1.0
    elif nonzero == 0:
        notes.append(
            Diagnostic(
                layer="*",
                kind="AllWeightsZero",
                severity=Severity.WARNING,
                detail="no nonzero weights remain; ratio reported as total weight count",
            )
        )
        ratio = float(total)
    else:
        ratio = total / nonzero

    return PruneReport(
        per_layer=prunable,
        non_prunable=others,
        model_total_weights=total,
        model_nonzero=nonzero,
        reduction_ratio=ratio,
        sparsity=1.0 - nonzero / total if total else 0.0,
        mac_dense=sum(s.mac_dense for s in counted),
        mac_sparse=sum(s.mac_sparse for s in counted),
        layer_count=len(counted),
        include_non_prunable=include_non_prunable,
        diagnostics=notes,
    )


def model_report(
    result: PruneResult,
    input_spatial: Tuple[int, int] = DEFAULT_INPUT_SPATIAL,
    original: Optional[ModelBundle] = None,
    include_non_prunable: bool = False,
) -> PruneReport:
    """Aggregate layer stats of a pruning run; the ratio counts prunable layers by default"""
    pruned = result.bundle
    source = original or pruned
    stats = [
        (layer, layer_stats(source.weight(layer.name), pruned.weight(layer.name), input_spatial))
        for layer in pruned.layers
    ]
    return _aggregate(stats, include_non_prunable, result.diagnostics)


def bundle_report(
    bundle: ModelBundle,
    input_spatial: Tuple[int, int] = DEFAULT_INPUT_SPATIAL,
    include_non_prunable: bool = False,
) -> PruneReport:
    """Stats of any bundle on its own, pruned or not"""
    stats = [
        (layer, layer_stats(bundle.weight(layer.name), bundle.weight(layer.name), input_spatial))
        for layer in bundle.layers
    ]
    return _aggregate(stats, include_non_prunable)


def kernel_census(bundle: ModelBundle) -> KernelCensus:
    """How kernels and weights split across 1x1, 3x3 and other kernel sizes"""
    kernels: Counter = Counter()
    weights: Counter = Counter()
    for layer in bundle.layers:
        label = _kernel_label(layer.kernel_shape)
        if label not in ("1x1", "3x3"):
            label = "other"
        kernels[label] += layer.out_channels * layer.in_channels
        weights[label] += layer.weight_count

    labels = ["1x1", "3x3", "other"]
    total_kernels = sum(kernels.values()) or 1
    total_weights = sum(weights.values()) or 1
    return KernelCensus(
        kernels={label: kernels[label] for label in labels},
        weights={label: weights[label] for label in labels},
        kernel_share={label: kernels[label] / total_kernels for label in labels},
        weight_share={label: weights[label] / total_weights for label in labels},
    )


def pattern_histogram(result: PruneResult) -> List[PatternUsage]:
    """Kernel count per (pattern, origin), the grouping used at inference"""
    counts = Counter((a.pattern_id, a.origin) for a in result.assignments)
    ordered = sorted(
        counts.items(),
        key=lambda item: (item[0][0] is None, item[0][0] or 0, item[0][1].value),
    )
    return [
        PatternUsage(pattern_id=pattern_id, origin=origin, kernels=count)
        for (pattern_id, origin), count in ordered
    ]


def format_report_table(report: PruneReport, title: str = "Pruning Report") -> str:
    """Aligned human-readable table"""
    header = (
        f"{'layer':<20} {'kernel':>6} {'weights':>10} {'nonzero':>10} "
        f"{'sparsity':>9} {'zero krn':>8} {'MAC dense':>12} {'MAC sparse':>12}"
    )
    lines = ["=" * len(header), title, "=" * len(header), header, "-" * len(header)]
    for stats in report.per_layer + report.non_prunable:
        marker = "" if stats.prunable else " *"
        lines.append(
            f"{stats.layer[:20]:<20} {stats.kernel:>6} {stats.total_weights:>10} "
            f"{stats.nonzero_weights:>10} {stats.sparsity:>9.2%} {stats.kernels_fully_zero:>8} "
            f"{stats.mac_dense:>12} {stats.mac_sparse:>12}{marker}"
        )
    lines.append("-" * len(header))
    lines.append(f"Layers counted:   {report.layer_count}")
    lines.append(f"Total weights:    {report.model_total_weights:,}")
    lines.append(f"Nonzero weights:  {report.model_nonzero:,}")
    lines.append(f"Sparsity:         {report.sparsity:.2%}")
    lines.append(f"Reduction ratio:  {report.reduction_ratio:.3f}x")
    if report.mac_dense:
        lines.append(
            f"MACs:             {report.mac_sparse:,} / {report.mac_dense:,} "
            f"({report.mac_dense / max(report.mac_sparse, 1):.3f}x fewer)"
        )
    if report.non_prunable:
        included = "included" if report.include_non_prunable else "excluded"
        lines.append(f"* non-prunable layers, {included} from totals")
    for diagnostic in report.diagnostics:
        lines.append(f"! {diagnostic.severity.value}: {diagnostic}")
    lines.append("=" * len(header))
    return "\n".join(lines)


class ReportDocument(BaseModel):
    format_version: int = DOCUMENT_VERSION
    config: Dict[str, Any] = {}
    report: PruneReport
    census: KernelCensus
    histogram: List[PatternUsage] = []
    # load-time findings about the model itself
    diagnostics: List[Diagnostic] = []


def report_document(
    report: PruneReport,
    census: KernelCensus,
    histogram: Sequence[PatternUsage] = (),
    diagnostics: Sequence[Diagnostic] = (),
    config: Optional[Dict[str, Any]] = None,
) -> str:
    document = ReportDocument(
        config=config or {},
        report=report,
        census=census,
        histogram=list(histogram),
        diagnostics=list(diagnostics),
    )
    return document.model_dump_json(indent=2) + "\n"


def format_census(census: KernelCensus) -> str:
    lines = ["Kernel census:"]
    for label, count in census.kernels.items():
        lines.append(
            f"  {label:<6} {count:>10} kernels ({census.kernel_share[label]:.1%}), "
            f"{census.weights[label]:>10} weights ({census.weight_share[label]:.1%})"
        )
    return "\n".join(lines)
