from itertools import combinations
from math import comb

import numpy as np
import pytest

from pruning.pattern_library import (DEFAULT_DICT_SIZES, SHIPPED_VARIANTS,
                                     Adjacency, DictionaryFormatError,
                                     DictSizeTooLarge, InvalidEntryCount,
                                     PatternDictionary, PatternMask, Variant,
                                     calibrate_dictionary, candidate_index,
                                     dictionary_document, filter_adjacent,
                                     filtered_candidates, generate_candidates,
                                     load_dictionary, mask_from_grid,
                                     merge_dictionaries, parse_dictionary,
                                     pattern_as_bits, save_dictionary)


def cells_touch(a, b) -> bool:
    return max(abs(a[0] - b[0]), abs(a[1] - b[1])) == 1


@pytest.mark.parametrize("k", range(1, 9))
def test_candidate_counts(k):
    candidates = generate_candidates(k)
    assert len(candidates) == comb(9, k)
    assert [mask.id for mask in candidates] == list(range(len(candidates)))
    assert all(mask.entry_count == k for mask in candidates)


def test_variant_candidate_counts():
    assert len(generate_candidates(Variant.EP2.entry_count)) == 36
    assert len(generate_candidates(Variant.EP3.entry_count)) == 84


@pytest.mark.parametrize("k", [0, 9])
def test_entry_count_out_of_range(k):
    with pytest.raises(InvalidEntryCount):
        generate_candidates(k)


def test_2ep_survivors_match_pair_enumeration():
    cells = [(r, c) for r in range(3) for c in range(3)]
    touching = [pair for pair in combinations(cells, 2) if cells_touch(*pair)]
    assert len(touching) == 20

    survivors = filtered_candidates(Variant.EP2)
    assert len(survivors) == 20
    assert sorted(tuple(mask.cells) for mask in survivors) == sorted(touching)


def test_any_adjacent_pair_is_looser_for_3ep():
    connected = filtered_candidates(Variant.EP3, Adjacency.CONNECTED_COMPONENT)
    loose = filtered_candidates(Variant.EP3, Adjacency.ANY_ADJACENT_PAIR)
    assert {m.id for m in connected} < {m.id for m in loose}
    split = mask_from_grid(np.array([[1, 1, 0], [0, 0, 0], [0, 0, 1]], dtype=bool))
    assert split.id in {m.id for m in loose}
    assert split.id not in {m.id for m in connected}


def test_two_entry_modes_agree():
    assert filtered_candidates(Variant.EP2, Adjacency.ANY_ADJACENT_PAIR) == filtered_candidates(
        Variant.EP2, Adjacency.CONNECTED_COMPONENT
    )


def test_filter_rejects_mixed_entry_counts():
    with pytest.raises(InvalidEntryCount):
        filter_adjacent(generate_candidates(2)[:1] + generate_candidates(3)[:1])


def test_ids_are_stable_positions():
    for mask in generate_candidates(3)[::7]:
        assert candidate_index(mask.bits) == mask.id


def test_mask_grid_layout():
    mask = mask_from_grid(np.array([[0, 1, 0], [0, 1, 0], [0, 0, 0]], dtype=bool))
    assert mask.bits == (1 << 1) | (1 << 4)
    assert mask.cells == [(0, 1), (1, 1)]
    assert mask.render().splitlines() == [". # .", ". # .", ". . ."]


def test_bit_encoding_of_raw_grids():
    assert pattern_as_bits(np.zeros((3, 3), dtype=bool)) == 0
    assert pattern_as_bits(np.ones((3, 3), dtype=bool)) == 511
    single = np.zeros((3, 3), dtype=bool)
    single[0, 1] = True
    assert pattern_as_bits(single) == 2
    mask = mask_from_grid(np.array([[1, 0, 0], [0, 1, 0], [0, 0, 1]], dtype=bool))
    assert pattern_as_bits(mask) == mask.bits == 1 + 16 + 256


def test_mask_must_keep_at_least_one_cell():
    with pytest.raises(ValueError):
        PatternMask(id=0, bits=0)


@pytest.mark.parametrize("variant", list(Variant))
def test_calibrated_dictionary_shape(variant):
    dictionary = calibrate_dictionary(variant, trials=500, seed=3)
    assert len(dictionary.masks) == DEFAULT_DICT_SIZES[variant]
    assert all(mask.entry_count == variant.entry_count for mask in dictionary.masks)
    assert sum(dictionary.calibration.wins.values()) == 500


def test_calibration_is_ranked_by_wins_then_id(dict_3ep):
    wins = dict_3ep.calibration.wins
    keys = [(-wins[mask.id], mask.id) for mask in dict_3ep.masks]
    assert keys == sorted(keys)
    chosen = {mask.id for mask in dict_3ep.masks}
    weakest = min(wins[mask.id] for mask in dict_3ep.masks)
    assert all(wins[i] <= weakest for i in wins if i not in chosen)


def test_calibration_ignores_thread_count():
    single = calibrate_dictionary(Variant.EP2, trials=3000, seed=5, threads=1)
    pooled = calibrate_dictionary(Variant.EP2, trials=3000, seed=5, threads=4)
    assert single == pooled
    assert dictionary_document(single) == dictionary_document(pooled)


def test_zero_trials_falls_back_to_lowest_ids(caplog):
    dictionary = calibrate_dictionary(Variant.EP3, trials=0)
    survivors = filtered_candidates(Variant.EP3)
    assert dictionary.ids == [mask.id for mask in survivors[:13]]
    assert "zero trials" in caplog.text


def test_dict_size_too_large():
    with pytest.raises(DictSizeTooLarge):
        calibrate_dictionary(Variant.EP2, trials=10, dict_size=21)


def test_dictionary_rejects_unfiltered_mask(dict_3ep):
    split = mask_from_grid(np.array([[1, 1, 0], [0, 0, 0], [0, 0, 1]], dtype=bool))
    with pytest.raises(ValueError):
        PatternDictionary(
            variant=Variant.EP3, masks=(split,), calibration=dict_3ep.calibration
        )


def test_dictionary_document_round_trip(tmp_path, dict_2ep):
    path = tmp_path / "dict.json"
    save_dictionary(dict_2ep, path, {"seed": 11})
    loaded = load_dictionary(path)
    assert loaded == dict_2ep
    assert '"config"' in path.read_text()


def test_dictionary_document_version_is_checked(dict_2ep):
    text = dictionary_document(dict_2ep).replace('"format_version": 1', '"format_version": 9')
    with pytest.raises(DictionaryFormatError):
        parse_dictionary(text)


def test_garbage_dictionary():
    with pytest.raises(DictionaryFormatError):
        parse_dictionary("not json")


def test_shipped_set_has_21_patterns(dict_2ep, dict_3ep):
    assert SHIPPED_VARIANTS == (Variant.EP2, Variant.EP3)
    merged = merge_dictionaries([dict_2ep, dict_3ep])
    assert len(merged) == 21
    assert [p.index for p in merged] == list(range(21))
    assert [p.variant for p in merged] == [Variant.EP2] * 8 + [Variant.EP3] * 13


@pytest.mark.parametrize("text, expected", [("2ep", Variant.EP2), ("3EP", Variant.EP3), ("5", Variant.EP5)])
def test_variant_parse(text, expected):
    assert Variant.parse(text) is expected


def test_variant_parse_rejects_unknown():
    with pytest.raises(ValueError):
        Variant.parse("7EP")
