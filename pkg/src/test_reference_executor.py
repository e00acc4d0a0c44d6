import dataclasses

import numpy as np
import pytest

from conftest import prune, single_layer
from model_store import WeightTensor, build_bundle, make_layer
from pruning.pattern_library import Variant, calibrate_dictionary
from pruning.pruning_engine import KernelMaskAssignment, Origin
from pruning.reference_executor import (ExecutorError, FeatureMap,
                                        FeatureMapFormatError,
                                        MissingAssignment, ShapeMismatch,
                                        conv2d_dense, conv2d_pattern_sparse,
                                        load_feature_map, run_chain,
                                        save_feature_map, verify_equivalence)
from pruning.synthetic import dense_weights, random_feature_map

ALL_KEEP = {0: np.ones((3, 3), dtype=bool)}


def bits_of(values: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(values, dtype=np.float32).view(np.uint32)


def test_1x1_identity():
    fm = random_feature_map(1, 5, 4, seed=1)
    out = conv2d_dense(fm, WeightTensor("pw", np.ones((1, 1, 1, 1))))
    assert np.array_equal(out.values, fm.values)


def test_zero_kernel_gives_zero_output():
    fm = random_feature_map(2, 6, 6, seed=2)
    out = conv2d_dense(fm, WeightTensor("conv", np.zeros((3, 2, 3, 3))))
    assert out.values.shape == (3, 6, 6)
    assert not out.values.any()


def test_delta_kernel_is_identity():
    fm = random_feature_map(1, 7, 5, seed=3)
    kernel = np.zeros((1, 1, 3, 3))
    kernel[0, 0, 1, 1] = 1.0
    assert np.array_equal(conv2d_dense(fm, WeightTensor("conv", kernel)).values, fm.values)


def test_hand_computed_convolution():
    fm = FeatureMap(np.array([[[1.0, 2.0], [3.0, 4.0]]]))
    kernel = np.zeros((1, 1, 3, 3))
    kernel[0, 0, 1, 1] = 1.0
    kernel[0, 0, 1, 2] = 2.0
    kernel[0, 0, 2, 1] = 10.0
    out = conv2d_dense(fm, WeightTensor("conv", kernel))
    assert out.values.tolist() == [[[35.0, 42.0], [11.0, 4.0]]]


def test_even_kernel_keeps_spatial_size():
    fm = FeatureMap(np.array([[[1.0, 2.0], [3.0, 4.0]]]))
    out = conv2d_dense(fm, WeightTensor("conv", np.ones((1, 1, 2, 2))))
    assert out.values.tolist() == [[[10.0, 6.0], [7.0, 4.0]]]


def test_channel_mismatch():
    with pytest.raises(ShapeMismatch):
        conv2d_dense(random_feature_map(2), WeightTensor("conv", np.ones((1, 3, 3, 3))))


def test_all_keep_pattern_skips_nothing():
    weights = single_layer(out_channels=3, in_channels=2).weight("conv1")
    fm = random_feature_map(2, 8, 8, seed=4)
    assignments = [
        KernelMaskAssignment("conv1", i, j, 0, Origin.BEST_FIT) for i in range(3) for j in range(2)
    ]
    out, trace = conv2d_pattern_sparse(fm, weights, assignments, ALL_KEEP)
    assert trace.macs_skipped == 0
    assert trace.macs_performed == 3 * 2 * 9 * 64
    assert np.array_equal(bits_of(out.values), bits_of(conv2d_dense(fm, weights).values))


def test_2ep_skips_seven_ninths(dict_2ep):
    bundle = single_layer(out_channels=4, in_channels=3)
    result = prune(bundle, dict_2ep)
    fm = random_feature_map(3, 8, 8, seed=5)
    _, trace = conv2d_pattern_sparse(
        fm, result.bundle.weight("conv1"), result.assignments, dict_2ep.keep_table()
    )
    assert trace.macs_skipped * 9 == trace.macs_dense * 7
    assert trace.per_layer[0].layer == "conv1"


def test_zero_weights_at_kept_positions_count_as_skipped(dict_2ep):
    layer = make_layer("conv1", 2, 1)
    weights = dense_weights(np.random.default_rng(12), layer.shape)
    weights[0, 0] = 0.0
    result = prune(build_bundle([layer], {"conv1": weights}), dict_2ep)
    pruned = result.bundle.weight("conv1")
    fm = random_feature_map(1, 6, 6, seed=12)

    sparse, trace = conv2d_pattern_sparse(fm, pruned, result.assignments, dict_2ep.keep_table())
    zeros = pruned.values.size - np.count_nonzero(pruned.values)
    assert zeros == 16
    assert trace.macs_skipped * pruned.values.size == trace.macs_dense * zeros
    assert trace.macs_performed == 2 * 36
    assert np.array_equal(bits_of(sparse.values), bits_of(conv2d_dense(fm, pruned).values))


def test_missing_assignment(dict_2ep):
    result = prune(single_layer(), dict_2ep)
    with pytest.raises(MissingAssignment):
        conv2d_pattern_sparse(
            random_feature_map(2),
            result.bundle.weight("conv1"),
            result.assignments[1:],
            dict_2ep.keep_table(),
        )


@pytest.mark.parametrize("seed", range(100))
def test_executors_agree_bit_for_bit(seed):
    rng = np.random.default_rng(seed)
    variant = [Variant.EP2, Variant.EP3, Variant.EP4, Variant.EP5][seed % 4]
    dictionary = calibrate_dictionary(variant, trials=200, seed=seed)
    kernel = 3 if seed % 3 else 1
    out_channels, in_channels = int(rng.integers(1, 7)), int(rng.integers(1, 7))
    if kernel == 1 and out_channels * in_channels < 9:
        out_channels = 9
    layer = make_layer("layer", out_channels, in_channels, kernel)
    bundle = build_bundle([layer], {"layer": dense_weights(rng, layer.shape)})
    result = prune(bundle, dictionary)
    weights = result.bundle.weight("layer")
    fm = random_feature_map(in_channels, 8, 8, seed=seed)

    sparse, trace = conv2d_pattern_sparse(fm, weights, result.assignments, dictionary.keep_table())
    dense = conv2d_dense(fm, weights)
    assert np.array_equal(bits_of(sparse.values), bits_of(dense.values))

    assert trace.macs_performed + trace.macs_skipped == weights.values.size * 64
    zeros = weights.values.size - np.count_nonzero(weights.values)
    assert trace.macs_skipped * weights.values.size == trace.macs_dense * zeros


def test_verify_pruned_model(chain_bundle, dict_3ep):
    result = prune(chain_bundle, dict_3ep)
    report = verify_equivalence(chain_bundle, result, random_feature_map(3, 8, 8, seed=6))
    assert report.equivalent
    assert [v.layer for v in report.layers] == chain_bundle.layer_names
    assert all(v.executors_match and v.max_executor_diff == 0.0 for v in report.layers)
    assert report.max_deviation_from_original > 0.0
    assert report.trace.macs_performed + report.trace.macs_skipped == report.trace.macs_dense


def test_verify_passes_through_an_even_kernel_layer(dict_2ep):
    rng = np.random.default_rng(13)
    layers = [make_layer("conv1", 4, 3), make_layer("even", 4, 4, 2, ["conv1"])]
    bundle = build_bundle(layers, {layer.name: dense_weights(rng, layer.shape) for layer in layers})
    result = prune(bundle, dict_2ep)
    report = verify_equivalence(bundle, result, random_feature_map(3, 5, 5, seed=13))
    assert report.equivalent
    assert [v.pattern_path for v in report.layers] == [True, False]


def test_verify_relaxed_mode(mixed_bundle, dict_2ep):
    result = prune(mixed_bundle, dict_2ep)
    fm = random_feature_map(mixed_bundle.layers[0].in_channels, 6, 6, seed=7)
    assert verify_equivalence(mixed_bundle, result, fm, tolerance=1e-6).equivalent


def corrupt(result, layer, index, value):
    values = result.bundle.weight(layer).values.copy()
    values[index] = value
    bundle = result.bundle.replace_weights({layer: WeightTensor(layer, values)})
    return dataclasses.replace(result, bundle=bundle)


def test_verify_flags_weights_outside_the_mask(chain_bundle, dict_2ep):
    result = prune(chain_bundle, dict_2ep)
    assignment = result.layer_assignments("conv2")[0]
    keep = dict_2ep.by_id(assignment.pattern_id).keep
    r, c = map(int, np.argwhere(~keep)[0])
    broken = corrupt(result, "conv2", (assignment.out_index, assignment.in_index, r, c), 0.5)

    report = verify_equivalence(chain_bundle, broken, random_feature_map(3, 8, 8, seed=8))
    assert not report.equivalent
    assert [v.layer for v in report.failures] == ["conv2"]
    assert report.failures[0].mask_violations == 1


def test_verify_accepts_changes_at_kept_positions(chain_bundle, dict_2ep):
    result = prune(chain_bundle, dict_2ep)
    assignment = result.layer_assignments("conv1")[0]
    r, c = dict_2ep.by_id(assignment.pattern_id).cells[0]
    changed = corrupt(result, "conv1", (assignment.out_index, assignment.in_index, r, c), 0.75)
    report = verify_equivalence(chain_bundle, changed, random_feature_map(3, 8, 8, seed=9))
    assert report.equivalent


def test_verify_rejects_wrong_input_channels(chain_bundle, dict_2ep):
    result = prune(chain_bundle, dict_2ep)
    with pytest.raises(ShapeMismatch):
        verify_equivalence(chain_bundle, result, random_feature_map(5))


def test_run_chain(chain_bundle):
    outputs = run_chain(chain_bundle, random_feature_map(3, 4, 4, seed=10))
    assert list(outputs) == chain_bundle.layer_names
    assert outputs["conv3"].values.shape == (8, 4, 4)
    with pytest.raises(ShapeMismatch):
        run_chain(chain_bundle, random_feature_map(4))


def test_feature_map_file_round_trip(tmp_path):
    fm = random_feature_map(3, 5, 7, seed=11)
    path = tmp_path / "input.rtfm"
    save_feature_map(fm, path)
    assert path.read_bytes()[:4] == b"RTFM"
    assert np.array_equal(bits_of(load_feature_map(path).values), bits_of(fm.values))


def test_feature_map_file_errors(tmp_path):
    path = tmp_path / "input.rtfm"
    save_feature_map(random_feature_map(1, 2, 2), path)
    data = path.read_bytes()

    path.write_bytes(b"XXXX" + data[4:])
    with pytest.raises(FeatureMapFormatError):
        load_feature_map(path)
    path.write_bytes(data[:-4])
    with pytest.raises(FeatureMapFormatError):
        load_feature_map(path)
    with pytest.raises(FeatureMapFormatError):
        load_feature_map(tmp_path / "absent.rtfm")


def test_feature_map_invariants():
    with pytest.raises(ExecutorError):
        FeatureMap(np.full((1, 2, 2), np.nan))
    with pytest.raises(ShapeMismatch):
        FeatureMap(np.ones((2, 2)))
