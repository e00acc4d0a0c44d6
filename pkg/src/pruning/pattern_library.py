"""
3x3 keep-mask generation, adjacency filtering and dictionary calibration.

A mask is stored as a 9-bit integer over the row-major cells of the 3x3 grid,
cell (r, c) at bit 3 * r + c. Candidate ids are the position of the mask in the
ascending-bitmask enumeration of its entry count, so an id never changes once
a mask survives filtering or calibration.
"""
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from enum import Enum
from math import comb
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import (BaseModel, ConfigDict, Field, ValidationError,
                      field_validator, model_validator)
from scipy import ndimage

logger = logging.getLogger(__name__)

GRID = 3
CELLS = GRID * GRID
MIN_ENTRIES = 1
MAX_ENTRIES = CELLS - 1
DOCUMENT_VERSION = 1

DEFAULT_TRIALS = 10000
DEFAULT_SEED = 20230101
# Trials are drawn in fixed blocks with one spawned stream per block, so the
# result never depends on how many threads share the work.
CALIBRATION_BLOCK = 1024

EIGHT_NEIGHBORHOOD = np.ones((3, 3), dtype=bool)


class PatternLibraryError(Exception):
    """Custom exception for pattern generation and calibration errors"""

    pass


class InvalidEntryCount(PatternLibraryError):
    pass


class DictSizeTooLarge(PatternLibraryError):
    pass


class DictionaryFormatError(PatternLibraryError):
    pass


class Variant(str, Enum):
    EP2 = "2EP"
    EP3 = "3EP"
    EP4 = "4EP"
    EP5 = "5EP"

    @property
    def entry_count(self) -> int:
        return int(self.value[0])

    @classmethod
    def parse(cls, text: str) -> "Variant":
        """Accept '2EP', '2ep' or a bare entry count"""
        normalized = str(text).strip().upper()
        if normalized.isdigit():
            normalized = f"{normalized}EP"
        try:
            return cls(normalized)
        except ValueError:
            choices = ", ".join(v.value for v in cls)
            raise ValueError(f"Unknown variant {text!r} (choose from {choices})")


DEFAULT_DICT_SIZES: Dict[Variant, int] = {
    Variant.EP2: 8,
    Variant.EP3: 13,
    Variant.EP4: 13,
    Variant.EP5: 13,
}
SHIPPED_VARIANTS = (Variant.EP2, Variant.EP3)


class Adjacency(str, Enum):
    CONNECTED_COMPONENT = "connected_component"
    ANY_ADJACENT_PAIR = "any_adjacent_pair"


def popcount(bits: int) -> int:
    return bin(bits).count("1")


def candidate_index(bits: int) -> int:
    """Position of bits in the ascending enumeration of its popcount"""
    k = popcount(bits)
    return sum(1 for b in range(bits) if popcount(b) == k)


class PatternMask(BaseModel):
    """A 3x3 keep-mask; kept cells retain their weights"""

    model_config = ConfigDict(frozen=True)

    id: int = Field(ge=0)
    bits: int = Field(ge=0, lt=1 << CELLS)

    @field_validator("bits")
    @classmethod
    def _check_entry_count(cls, bits: int) -> int:
        if not MIN_ENTRIES <= popcount(bits) <= MAX_ENTRIES:
            raise ValueError(
                f"mask must keep {MIN_ENTRIES}..{MAX_ENTRIES} cells, got {popcount(bits)}"
            )
        return bits

    @property
    def entry_count(self) -> int:
        return popcount(self.bits)

    @property
    def flat(self) -> np.ndarray:
        return np.array([(self.bits >> cell) & 1 for cell in range(CELLS)], dtype=bool)

    @property
    def keep(self) -> np.ndarray:
        return self.flat.reshape(GRID, GRID)

    @property
    def cells(self) -> List[Tuple[int, int]]:
        return [divmod(cell, GRID) for cell in range(CELLS) if (self.bits >> cell) & 1]

    def render(self) -> str:
        rows = []
        for r in range(GRID):
            rows.append(
                " ".join("#" if (self.bits >> (GRID * r + c)) & 1 else "." for c in range(GRID))
            )
        return "\n".join(rows)


def grid_bits(keep: np.ndarray) -> int:
    """Row-major 9-bit encoding of any 3x3 keep grid, empty and full included"""
    flat = np.asarray(keep, dtype=bool).reshape(CELLS)
    return int(np.dot(flat, 1 << np.arange(CELLS)))


def pattern_as_bits(mask: Union[PatternMask, np.ndarray]) -> int:
    """Row-major 9-bit encoding of a mask or a raw 3x3 grid"""
    if isinstance(mask, PatternMask):
        return mask.bits
    return grid_bits(mask)


def mask_from_bits(bits: int) -> PatternMask:
    return PatternMask(id=candidate_index(bits), bits=bits)


def mask_from_grid(keep: np.ndarray) -> PatternMask:
    return mask_from_bits(grid_bits(keep))


def generate_candidates(k: int) -> List[PatternMask]:
    """Every mask with k kept cells, in ascending bitmask order"""
    if not MIN_ENTRIES <= k <= MAX_ENTRIES:
        raise InvalidEntryCount(
            f"Entry count must be between {MIN_ENTRIES} and {MAX_ENTRIES}, got {k}"
        )
    candidates = [
        PatternMask(id=index, bits=bits)
        for index, bits in enumerate(b for b in range(1 << CELLS) if popcount(b) == k)
    ]
    assert len(candidates) == comb(CELLS, k)
    return candidates


def is_connected(mask: PatternMask) -> bool:
    """True when the kept cells form one 8-connected component"""
    _, components = ndimage.label(mask.keep, structure=EIGHT_NEIGHBORHOOD)
    return components == 1


def has_adjacent_pair(mask: PatternMask) -> bool:
    cells = mask.cells
    if len(cells) == 1:
        return True
    return any(
        max(abs(r1 - r2), abs(c1 - c2)) == 1
        for i, (r1, c1) in enumerate(cells)
        for (r2, c2) in cells[i + 1 :]
    )


def filter_adjacent(
    candidates: Sequence[PatternMask],
    adjacency: Adjacency = Adjacency.CONNECTED_COMPONENT,
) -> List[PatternMask]:
    """Drop masks whose kept cells are not adjacent; order is preserved"""
    if len({mask.entry_count for mask in candidates}) > 1:
        raise InvalidEntryCount("Candidates passed to the filter mix entry counts")
    check = is_connected if adjacency is Adjacency.CONNECTED_COMPONENT else has_adjacent_pair
    return [mask for mask in candidates if check(mask)]


def filtered_candidates(
    variant: Variant, adjacency: Adjacency = Adjacency.CONNECTED_COMPONENT
) -> List[PatternMask]:
    return filter_adjacent(generate_candidates(variant.entry_count), adjacency)


def keep_matrix(masks: Sequence[PatternMask]) -> np.ndarray:
    """(masks, 9) float64 matrix of 0/1 keep flags"""
    return np.stack([mask.flat for mask in masks]).astype(np.float64)


def retained_energy(kernels: np.ndarray, keep: np.ndarray) -> np.ndarray:
    """
    Squared L2 norm of every kernel under every mask.

    Args:
        kernels: (N, 9) values as stored
        keep: (M, 9) output of keep_matrix

    Returns:
        (N, M) float64 energies
    """
    squared = np.square(np.asarray(kernels, dtype=np.float64))
    return (squared[:, None, :] * keep[None, :, :]).sum(axis=-1)


class CalibrationRecord(BaseModel):
    model_config = ConfigDict(frozen=True)

    trials: int = Field(ge=0)
    seed: int = Field(ge=0)
    block_size: int = CALIBRATION_BLOCK
    # candidate id -> number of random kernels for which it was the best fit
    wins: Dict[int, int] = {}


class PatternDictionary(BaseModel):
    """A calibrated, ordered set of masks for one variant"""

    model_config = ConfigDict(frozen=True)

    variant: Variant
    adjacency: Adjacency = Adjacency.CONNECTED_COMPONENT
    masks: Tuple[PatternMask, ...]
    calibration: CalibrationRecord

    @model_validator(mode="after")
    def _check_masks(self) -> "PatternDictionary":
        k = self.variant.entry_count
        ids = [mask.id for mask in self.masks]
        if len(set(ids)) != len(ids) or len({m.bits for m in self.masks}) != len(ids):
            raise ValueError("dictionary masks must be unique")
        candidates = {mask.id: mask for mask in filtered_candidates(self.variant, self.adjacency)}
        for mask in self.masks:
            if mask.entry_count != k:
                raise ValueError(
                    f"mask {mask.id} keeps {mask.entry_count} cells, {self.variant.value} needs {k}"
                )
            if candidates.get(mask.id) != mask:
                raise ValueError(f"mask {mask.id} is not a filtered {self.variant.value} candidate")
        return self

    @property
    def ids(self) -> List[int]:
        return [mask.id for mask in self.masks]

    def by_id(self, pattern_id: int) -> PatternMask:
        for mask in self.masks:
            if mask.id == pattern_id:
                return mask
        raise KeyError(pattern_id)

    def keep_table(self) -> Dict[int, np.ndarray]:
        """pattern id -> 3x3 boolean keep grid"""
        return {mask.id: mask.keep for mask in self.masks}


def _count_block(seed: np.random.SeedSequence, size: int, keep: np.ndarray) -> np.ndarray:
    rng = np.random.default_rng(seed)
    kernels = rng.uniform(-1.0, 1.0, size=(size, CELLS))
    # argmax takes the first maximum, i.e. the lowest candidate id
    winners = np.argmax(retained_energy(kernels, keep), axis=1)
    return np.bincount(winners, minlength=keep.shape[0])


def calibrate_dictionary(
    variant: Variant,
    trials: int = DEFAULT_TRIALS,
    seed: int = DEFAULT_SEED,
    dict_size: int = 0,
    adjacency: Adjacency = Adjacency.CONNECTED_COMPONENT,
    threads: int = 1,
) -> PatternDictionary:
    """
    Rank filtered candidates by how often they best fit random kernels.

    Kernels are drawn uniformly from [-1, 1]; a candidate wins a kernel when it
    keeps the most L2 energy of it. The dict_size masks with the most wins are
    returned, ordered by wins descending then id ascending.
    """
    dict_size = dict_size or DEFAULT_DICT_SIZES[variant]
    candidates = filtered_candidates(variant, adjacency)
    if dict_size > len(candidates):
        raise DictSizeTooLarge(
            f"{variant.value} has {len(candidates)} filtered candidates, "
            f"cannot select {dict_size}"
        )
    if trials < 0 or seed < 0:
        raise PatternLibraryError("Trials and seed must be non-negative")

    wins = np.zeros(len(candidates), dtype=np.int64)
    if trials == 0:
        logger.warning(
            "Calibrating %s with zero trials; dictionary falls back to the first %d candidates",
            variant.value,
            dict_size,
        )
    else:
        keep = keep_matrix(candidates)
        blocks = (trials + CALIBRATION_BLOCK - 1) // CALIBRATION_BLOCK
        streams = np.random.SeedSequence(seed).spawn(blocks)
        sizes = [min(CALIBRATION_BLOCK, trials - b * CALIBRATION_BLOCK) for b in range(blocks)]
        with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
            for counts in pool.map(_count_block, streams, sizes, [keep] * blocks):
                wins += counts

    ranking = sorted(range(len(candidates)), key=lambda n: (-int(wins[n]), candidates[n].id))
    chosen = tuple(candidates[n] for n in ranking[:dict_size])
    logger.debug("Calibrated %s: %s", variant.value, [m.id for m in chosen])

    return PatternDictionary(
        variant=variant,
        adjacency=adjacency,
        masks=chosen,
        calibration=CalibrationRecord(
            trials=trials,
            seed=seed,
            wins={mask.id: int(count) for mask, count in zip(candidates, wins)},
        ),
    )


class DictionaryDocument(BaseModel):
    format_version: int = DOCUMENT_VERSION
    variant: Variant
    entry_count: int
    adjacency: Adjacency
    calibration: CalibrationRecord
    masks: List[PatternMask]
    # settings of the run that produced it; ignored on load
    config: Dict[str, Any] = {}


def to_document(
    dictionary: PatternDictionary, config: Optional[Dict[str, Any]] = None
) -> DictionaryDocument:
    return DictionaryDocument(
        variant=dictionary.variant,
        entry_count=dictionary.variant.entry_count,
        adjacency=dictionary.adjacency,
        calibration=dictionary.calibration,
        masks=list(dictionary.masks),
        config=config or {},
    )


def from_document(document: DictionaryDocument, source: str = "<text>") -> PatternDictionary:
    if document.format_version != DOCUMENT_VERSION:
        raise DictionaryFormatError(
            f"{source} has unsupported format version {document.format_version}"
        )
    if document.entry_count != document.variant.entry_count:
        raise DictionaryFormatError(
            f"{source} declares entry count {document.entry_count} for {document.variant.value}"
        )
    try:
        return PatternDictionary(
            variant=document.variant,
            adjacency=document.adjacency,
            masks=tuple(document.masks),
            calibration=document.calibration,
        )
    except ValidationError as e:
        raise DictionaryFormatError(f"Dictionary {source} is invalid: {str(e)}") from e


def dictionary_document(
    dictionary: PatternDictionary, config: Optional[Dict[str, Any]] = None
) -> str:
    return to_document(dictionary, config).model_dump_json(indent=2) + "\n"


def parse_dictionary(text: str, source: str = "<text>") -> PatternDictionary:
    try:
        document = DictionaryDocument.model_validate(json.loads(text))
    except (json.JSONDecodeError, ValidationError) as e:
        raise DictionaryFormatError(f"Dictionary {source} is invalid: {str(e)}") from e
    return from_document(document, source)


def save_dictionary(
    dictionary: PatternDictionary,
    path: Union[str, Path],
    config: Optional[Dict[str, Any]] = None,
) -> None:
    try:
        Path(path).write_text(dictionary_document(dictionary, config), encoding="utf-8")
    except OSError as e:
        raise PatternLibraryError(f"Failed to write dictionary {path}: {str(e)}") from e


def load_dictionary(path: Union[str, Path]) -> PatternDictionary:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise DictionaryFormatError(f"Failed to read dictionary {path}: {str(e)}") from e
    return parse_dictionary(text, source=str(path))


class MergedPattern(BaseModel):
    index: int
    variant: Variant
    source_id: int
    bits: int


def merge_dictionaries(dictionaries: Iterable[PatternDictionary]) -> List[MergedPattern]:
    """Concatenate several dictionaries into one numbered pattern set"""
    merged: List[MergedPattern] = []
    for dictionary in dictionaries:
        for mask in dictionary.masks:
            merged.append(
                MergedPattern(
                    index=len(merged),
                    variant=dictionary.variant,
                    source_id=mask.id,
                    bits=mask.bits,
                )
            )
    return merged
