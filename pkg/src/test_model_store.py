import numpy as np
import pytest

from conftest import single_layer
from model_store import (CycleDetected, DanglingParent, IoError,
                         ManifestParseError, MissingFile, ModelBundle,
                         NonFiniteWeight, Severity, ShapeMismatch,
                         WeightTensor, build_bundle, load_model, make_layer,
                         parse_model, save_model, serialize_model,
                         validate_model)


def unchecked_bundle(layers, tensors) -> ModelBundle:
    """Bundle assembled without validation, for feeding broken models to the loader"""
    weights = {name: WeightTensor(layer=name, values=values) for name, values in tensors.items()}
    return ModelBundle(layers=tuple(layers), weights=weights)


def test_single_layer_round_trip(tmp_path):
    bundle = single_layer(out_channels=16, in_channels=3)
    path = tmp_path / "model.rtoss"
    save_model(bundle, path)

    loaded = load_model(path)
    assert len(loaded.layers) == 1
    assert loaded.layers == bundle.layers
    assert loaded.weight("conv1").values.size == 432
    assert loaded.weight("conv1").to_bytes() == bundle.weight("conv1").to_bytes()


def test_round_trip_is_byte_identical(tmp_path, mixed_bundle):
    first = tmp_path / "a.rtoss"
    second = tmp_path / "b.rtoss"
    save_model(mixed_bundle, first)
    save_model(load_model(first), second)
    assert first.read_bytes() == second.read_bytes()


def test_metadata_rides_along(tmp_path):
    layer = make_layer("conv1", 2, 1).model_copy(update={"metadata": {"bias": [0.5, -0.25]}})
    bundle = build_bundle([layer], {"conv1": np.ones((2, 1, 3, 3), dtype=np.float32)})
    save_model(bundle, tmp_path / "m.rtoss")
    assert load_model(tmp_path / "m.rtoss").layer("conv1").metadata == {"bias": [0.5, -0.25]}


def test_zeros_serialize_as_positive_zero(tmp_path):
    values = np.zeros((1, 1, 3, 3), dtype=np.float32)
    values[0, 0, 1, 1] = 2.0
    bundle = build_bundle([make_layer("conv1", 1, 1)], {"conv1": values})
    data = serialize_model(bundle)
    payload = data[-36:]
    words = [payload[i : i + 4] for i in range(0, 36, 4)]
    assert words[4] == np.float32(2.0).tobytes()
    assert all(word == b"\x00\x00\x00\x00" for n, word in enumerate(words) if n != 4)


def test_missing_file(tmp_path):
    with pytest.raises(MissingFile):
        load_model(tmp_path / "absent.rtoss")


def test_dangling_parent():
    layer = make_layer("conv2", 4, 4, parents=["conv1"])
    bundle = unchecked_bundle([layer], {"conv2": np.ones(layer.shape)})
    with pytest.raises(DanglingParent):
        parse_model(serialize_model(bundle))


def test_cycle():
    a = make_layer("conv1", 4, 4, parents=["conv2"])
    b = make_layer("conv2", 4, 4, parents=["conv1"])
    bundle = unchecked_bundle([a, b], {"conv1": np.ones(a.shape), "conv2": np.ones(b.shape)})
    with pytest.raises(CycleDetected):
        parse_model(serialize_model(bundle))


def test_truncated_payload():
    data = serialize_model(single_layer())
    with pytest.raises(ShapeMismatch):
        parse_model(data[:-4])


def test_bad_magic():
    data = serialize_model(single_layer())
    with pytest.raises(ManifestParseError):
        parse_model(b"NOPE" + data[4:])


def test_non_finite_weight_is_rejected():
    layer = make_layer("conv1", 1, 1)
    values = np.ones(layer.shape, dtype=np.float32)
    values[0, 0, 0, 0] = np.nan
    with pytest.raises(NonFiniteWeight):
        build_bundle([layer], {"conv1": values})


def test_save_to_unwritable_path(tmp_path):
    with pytest.raises(IoError):
        save_model(single_layer(), tmp_path / "no_such_dir" / "model.rtoss")


def test_validate_valid_bundle(chain_bundle):
    assert validate_model(chain_bundle) == []


def test_validate_reports_nan():
    layer = make_layer("conv1", 1, 1)
    values = np.ones(layer.shape, dtype=np.float32)
    values[0, 0, 2, 2] = np.inf
    diagnostics = validate_model(unchecked_bundle([layer], {"conv1": values}))
    assert [(d.kind, d.layer) for d in diagnostics] == [("NonFiniteWeight", "conv1")]


def test_validate_flags_5x5_as_warning():
    bundle = single_layer(kernel=5)
    diagnostics = validate_model(bundle)
    assert [(d.kind, d.severity) for d in diagnostics] == [
        ("NonPrunableKernelSize", Severity.WARNING)
    ]
    assert not bundle.layer("conv1").is_prunable


@pytest.mark.parametrize(
    "layers, tensors, kind",
    [
        (
            [make_layer("a", 1, 1), make_layer("a", 1, 1)],
            {"a": np.ones((1, 1, 3, 3))},
            "DuplicateLayer",
        ),
        ([make_layer("a", 1, 1, parents=["x"])], {"a": np.ones((1, 1, 3, 3))}, "DanglingParent"),
        ([make_layer("a", 2, 1)], {"a": np.ones((1, 1, 3, 3))}, "ShapeMismatch"),
        ([make_layer("a", 1, 1)], {}, "MissingWeight"),
    ],
)
def test_validate_detects_each_violation(layers, tensors, kind):
    diagnostics = validate_model(unchecked_bundle(layers, tensors))
    assert kind in [d.kind for d in diagnostics]
    assert all(d.severity is Severity.ERROR for d in diagnostics)
