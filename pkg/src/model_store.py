import json
import logging
import struct
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Tuple, Union

import networkx as nx
import numpy as np
from pydantic import BaseModel, ConfigDict, PositiveInt, ValidationError

logger = logging.getLogger(__name__)

MAGIC = b"RTOS"
FORMAT_VERSION = 1
MANIFEST_VERSION = 1
PRUNABLE_KERNELS = ((1, 1), (3, 3))

# magic, format version byte, manifest length
_HEADER = struct.Struct("<4sBQ")
_FLOAT = np.dtype("<f4")


class ModelStoreError(Exception):
    """Custom exception for model bundle errors"""

    pass


class MissingFile(ModelStoreError):
    pass


class ManifestParseError(ModelStoreError):
    pass


class ShapeMismatch(ModelStoreError):
    pass


class DanglingParent(ModelStoreError):
    pass


class CycleDetected(ModelStoreError):
    pass


class NonFiniteWeight(ModelStoreError):
    pass


class DuplicateLayer(ModelStoreError):
    pass


class IoError(ModelStoreError):
    pass


class Severity(str, Enum):
    ERROR = "error"
    WARNING = "warning"


class Diagnostic(BaseModel):
    """A single validation finding attached to a layer"""

    model_config = ConfigDict(frozen=True)

    layer: str
    kind: str
    severity: Severity = Severity.ERROR
    detail: str = ""

    def __str__(self) -> str:
        text = f"{self.kind}@{self.layer}"
        return f"{text}: {self.detail}" if self.detail else text


# Diagnostic kinds that load_model turns into exceptions
_ERROR_KINDS = {
    "DuplicateLayer": DuplicateLayer,
    "DanglingParent": DanglingParent,
    "CycleDetected": CycleDetected,
    "ShapeMismatch": ShapeMismatch,
    "MissingWeight": ShapeMismatch,
    "NonFiniteWeight": NonFiniteWeight,
}


class LayerKind(str, Enum):
    CONV2D = "conv2d"


class LayerDescriptor(BaseModel):
    """Shape and graph position of one convolution layer"""

    model_config = ConfigDict(frozen=True)

    name: str
    kind: LayerKind = LayerKind.CONV2D
    out_channels: PositiveInt
    in_channels: PositiveInt
    kernel_h: PositiveInt
    kernel_w: PositiveInt
    parents: Tuple[str, ...] = ()
    # biases, batch-norm parameters and the like ride along untouched
    metadata: Dict[str, Any] = {}

    @property
    def shape(self) -> Tuple[int, int, int, int]:
        return (self.out_channels, self.in_channels, self.kernel_h, self.kernel_w)

    @property
    def kernel_shape(self) -> Tuple[int, int]:
        return (self.kernel_h, self.kernel_w)

    @property
    def weight_count(self) -> int:
        return self.out_channels * self.in_channels * self.kernel_h * self.kernel_w

    @property
    def is_prunable(self) -> bool:
        return self.kernel_shape in PRUNABLE_KERNELS


class ManifestEntry(LayerDescriptor):
    offset: int
    nbytes: int


class ManifestDocument(BaseModel):
    manifest_version: int
    layers: List[ManifestEntry]


@dataclass(frozen=True, eq=False)
class WeightTensor:
    """Read-only (out, in, kh, kw) float32 weights of one layer"""

    layer: str
    values: np.ndarray

    def __post_init__(self) -> None:
        values = np.array(self.values, dtype=np.float32, copy=True)
        if values.ndim != 4:
            raise ShapeMismatch(
                f"Weights of {self.layer} must be 4-D, got shape {values.shape}"
            )
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @property
    def shape(self) -> Tuple[int, int, int, int]:
        return tuple(self.values.shape)  # type: ignore[return-value]

    @property
    def kernel_shape(self) -> Tuple[int, int]:
        return (self.values.shape[2], self.values.shape[3])

    def to_bytes(self) -> bytes:
        return self.values.astype(_FLOAT, copy=False).tobytes(order="C")


@dataclass(frozen=True, eq=False)
class ModelBundle:
    """An immutable model: ordered layer descriptors plus one tensor per layer"""

    layers: Tuple[LayerDescriptor, ...]
    weights: Mapping[str, WeightTensor]
    manifest_version: int = MANIFEST_VERSION
    _index: Dict[str, int] = field(
        default_factory=dict, init=False, compare=False, repr=False
    )

    def __post_init__(self) -> None:
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "weights", dict(self.weights))
        index: Dict[str, int] = {}
        for position, layer in enumerate(self.layers):
            index.setdefault(layer.name, position)
        object.__setattr__(self, "_index", index)

    @property
    def layer_names(self) -> List[str]:
        return [layer.name for layer in self.layers]

    def has_layer(self, name: str) -> bool:
        return name in self._index

    def layer(self, name: str) -> LayerDescriptor:
        return self.layers[self._index[name]]

    def position(self, name: str) -> int:
        return self._index[name]

    def weight(self, name: str) -> WeightTensor:
        return self.weights[name]

    def prunable_layers(self) -> List[LayerDescriptor]:
        return [layer for layer in self.layers if layer.is_prunable]

    def replace_weights(self, updates: Mapping[str, WeightTensor]) -> "ModelBundle":
        """Return a new bundle with some tensors swapped out"""
        weights = dict(self.weights)
        weights.update(updates)
        return ModelBundle(
            layers=self.layers, weights=weights, manifest_version=self.manifest_version
        )


def edge_graph(bundle: ModelBundle) -> nx.DiGraph:
    """Directed parent -> child graph over declared layers"""
    graph = nx.DiGraph()
    graph.add_nodes_from(bundle.layer_names)
    for layer in bundle.layers:
        for parent in layer.parents:
            if bundle.has_layer(parent):
                graph.add_edge(parent, layer.name)
    return graph


def validate_model(bundle: ModelBundle) -> List[Diagnostic]:
    """Check every bundle invariant, returning one diagnostic per violation"""
    diagnostics: List[Diagnostic] = []
    seen = set()

    for layer in bundle.layers:
        if layer.name in seen:
            diagnostics.append(
                Diagnostic(layer=layer.name, kind="DuplicateLayer")
            )
        seen.add(layer.name)

        for parent in layer.parents:
            if not bundle.has_layer(parent):
                diagnostics.append(
                    Diagnostic(
                        layer=layer.name,
                        kind="DanglingParent",
                        detail=f"parent {parent!r} is not declared",
                    )
                )

        if not layer.is_prunable:
            diagnostics.append(
                Diagnostic(
                    layer=layer.name,
                    kind="NonPrunableKernelSize",
                    severity=Severity.WARNING,
                    detail=f"{layer.kernel_h}x{layer.kernel_w} kernels are not pruned",
                )
            )

        tensor = bundle.weights.get(layer.name)
        if tensor is None:
            diagnostics.append(Diagnostic(layer=layer.name, kind="MissingWeight"))
            continue
        if tensor.shape != layer.shape:
            diagnostics.append(
                Diagnostic(
                    layer=layer.name,
                    kind="ShapeMismatch",
                    detail=f"declared {layer.shape}, tensor {tensor.shape}",
                )
            )
        bad = int(np.count_nonzero(~np.isfinite(tensor.values)))
        if bad:
            diagnostics.append(
                Diagnostic(
                    layer=layer.name,
                    kind="NonFiniteWeight",
                    detail=f"{bad} non-finite values",
                )
            )

    graph = edge_graph(bundle)
    if not nx.is_directed_acyclic_graph(graph):
        cycle = nx.find_cycle(graph)
        names = [edge[0] for edge in cycle]
        diagnostics.append(
            Diagnostic(
                layer=names[0],
                kind="CycleDetected",
                detail=" -> ".join(names + [names[0]]),
            )
        )

    return diagnostics


def _raise_for(diagnostics: List[Diagnostic]) -> None:
    for diagnostic in diagnostics:
        if diagnostic.severity is Severity.ERROR:
            error_class = _ERROR_KINDS.get(diagnostic.kind, ModelStoreError)
            raise error_class(str(diagnostic))
    for diagnostic in diagnostics:
        logger.warning("Bundle warning: %s", diagnostic)


def parse_model(data: bytes, source: str = "<bytes>") -> ModelBundle:
    """Decode and validate a bundle held in memory"""
    if len(data) < _HEADER.size:
        raise ManifestParseError(f"{source} is too short to be a model bundle")

    magic, version, manifest_length = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise ManifestParseError(f"{source} has bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise ManifestParseError(f"{source} has unsupported format version {version}")

    manifest_end = _HEADER.size + manifest_length
    if manifest_end > len(data):
        raise ManifestParseError(f"{source} manifest runs past end of file")

    try:
        raw_manifest = json.loads(data[_HEADER.size : manifest_end].decode("utf-8"))
        manifest = ManifestDocument.model_validate(raw_manifest)
    except (UnicodeDecodeError, json.JSONDecodeError, ValidationError) as e:
        raise ManifestParseError(f"Manifest of {source} is invalid: {str(e)}") from e

    payload = memoryview(data)[manifest_end:]
    layers: List[LayerDescriptor] = []
    weights: Dict[str, WeightTensor] = {}

    for entry in manifest.layers:
        descriptor = LayerDescriptor.model_validate(
            entry.model_dump(exclude={"offset", "nbytes"})
        )
        expected = descriptor.weight_count * _FLOAT.itemsize
        if entry.nbytes != expected:
            raise ShapeMismatch(
                f"Layer {entry.name} declares {entry.nbytes} bytes, shape needs {expected}"
            )
        if entry.offset < 0 or entry.offset + entry.nbytes > len(payload):
            raise ShapeMismatch(
                f"Layer {entry.name} tensor at offset {entry.offset} exceeds payload"
            )
        values = np.frombuffer(
            payload,
            dtype=_FLOAT,
            count=descriptor.weight_count,
            offset=entry.offset,
        ).reshape(descriptor.shape)
        layers.append(descriptor)
        weights[descriptor.name] = WeightTensor(layer=descriptor.name, values=values)

    bundle = ModelBundle(
        layers=tuple(layers), weights=weights, manifest_version=manifest.manifest_version
    )
    _raise_for(validate_model(bundle))
    return bundle


def load_model(path: Union[str, Path]) -> ModelBundle:
    """Load a model bundle from disk with full validation"""
    path = Path(path)
    if not path.is_file():
        raise MissingFile(f"Model bundle not found: {path}")
    try:
        data = path.read_bytes()
    except OSError as e:
        raise MissingFile(f"Failed to read {path}: {str(e)}") from e
    return parse_model(data, source=str(path))


def serialize_model(bundle: ModelBundle) -> bytes:
    """Encode a bundle to the on-disk container format"""
    entries = []
    chunks = []
    offset = 0
    for layer in bundle.layers:
        payload = bundle.weight(layer.name).to_bytes()
        entries.append(
            ManifestEntry(**layer.model_dump(), offset=offset, nbytes=len(payload))
        )
        chunks.append(payload)
        offset += len(payload)

    manifest = ManifestDocument(
        manifest_version=bundle.manifest_version, layers=entries
    )
    manifest_bytes = manifest.model_dump_json().encode("utf-8")
    header = _HEADER.pack(MAGIC, FORMAT_VERSION, len(manifest_bytes))
    return header + manifest_bytes + b"".join(chunks)


def save_model(bundle: ModelBundle, path: Union[str, Path]) -> None:
    """Write a bundle to disk; load_model reproduces it exactly"""
    path = Path(path)
    data = serialize_model(bundle)
    try:
        path.write_bytes(data)
    except OSError as e:
        raise IoError(f"Failed to write model bundle {path}: {str(e)}") from e


def build_bundle(
    layers: List[LayerDescriptor], tensors: Mapping[str, Any]
) -> ModelBundle:
    """Assemble and validate a bundle from descriptors and raw arrays"""
    weights = {
        layer.name: WeightTensor(layer=layer.name, values=np.asarray(tensors[layer.name]))
        for layer in layers
        if layer.name in tensors
    }
    bundle = ModelBundle(layers=tuple(layers), weights=weights)
    _raise_for(validate_model(bundle))
    return bundle


def make_layer(
    name: str,
    out_channels: int,
    in_channels: int,
    kernel: int = 3,
    parents: Optional[List[str]] = None,
) -> LayerDescriptor:
    """Shorthand for a square-kernel conv descriptor"""
    return LayerDescriptor(
        name=name,
        out_channels=out_channels,
        in_channels=in_channels,
        kernel_h=kernel,
        kernel_w=kernel,
        parents=tuple(parents or ()),
    )
