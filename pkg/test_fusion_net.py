#!/usr/bin/env python3
"""
Test sub-network construction, pipeline shapes, gradients and checkpoints
"""
import os
import sys

import numpy as np
import pytest
from pydantic import ValidationError

sys.path.append(os.path.dirname(os.path.abspath(__file__)))
from fusion_net import (
    CheckpointFormatError,
    FusionPipeline,
    IncompatibleCheckpointError,
    LinkTopology,
    PipelineMode,
    PipelineSpec,
    SubNetworkSpec,
    build_subnetwork,
    forward_pipeline2,
    forward_pipeline3,
    load_params,
    save_params,
)
from image_core import ContractViolation, Image
from tensor_engine import Tensor


def _batch(rng, height, width, dtype=np.float32):
    return rng.random((1, 3, height, width)).astype(dtype)


def _random_image(rng, width, height):
    return Image.from_array(rng.random((height, width, 3)))


def test_baseline_shape_contract():
    """800x480 six-channel input through the depth-3 baseline"""
    pipeline = FusionPipeline.initialize(PipelineSpec.basic2(), seed=0)
    network = pipeline.networks["merge"]
    assert network.in_channels == 6
    x = Tensor(np.random.default_rng(0).random((1, 6, 480, 800), dtype=np.float32))
    out, tape = network.forward(pipeline.params["merge"], x)
    assert tape.maps[3].shape == (1, 16, 60, 100)
    assert out.shape == (1, 3, 480, 800)


def test_bottom_map_size():
    spec = SubNetworkSpec(depth=3, filters=4)
    network = build_subnetwork(spec, 6, 3)
    assert network.level_dims(64, 64)[-1] == (8, 8)
    params = network.initialize(np.random.default_rng(1))
    x = Tensor(np.random.default_rng(2).random((1, 6, 64, 64), dtype=np.float32))
    _, tape = network.forward(params, x)
    assert tape.maps[3].shape == (1, 4, 8, 8)


def test_input_too_small():
    network = build_subnetwork(SubNetworkSpec(depth=3, filters=4), 6, 3)
    with pytest.raises(ContractViolation):
        network.level_dims(7, 64)


def test_stage_input_channels():
    p2 = FusionPipeline.initialize(PipelineSpec.pipeline2())
    assert p2.networks["cm_over"].in_channels == 6
    assert p2.networks["merge"].in_channels == 12
    assert p2.networks["deghost"].in_channels == 6
    p3 = FusionPipeline.initialize(PipelineSpec.pipeline3())
    assert p3.networks["merge"].in_channels == 18
    assert p3.input_names == ("ref", "under", "over", "ghost")


def test_dense_channel_accounting():
    network = build_subnetwork(SubNetworkSpec(depth=2, filters=5), 6, 3)
    channels = network.block_input_channels()
    # every block sees the input plus all earlier block outputs
    assert channels == {
        "enc1": 6,
        "enc2": 6 + 5,
        "dec1": 6 + 5 + 5,
        "dec2": 6 + 5 + 5 + 5,
        "out": 6 + 5 + 5 + 5 + 5,
    }
    assert "enc2.link0" in network.param_shapes
    assert "dec2.link2" in network.param_shapes
    assert network.param_shapes["dec2.link2"].transposed


def test_simple_channel_accounting():
    network = build_subnetwork(
        SubNetworkSpec(depth=3, filters=16, link_topology=LinkTopology.SIMPLE), 6, 3
    )
    assert network.block_input_channels() == {
        "enc1": 6, "enc2": 16, "enc3": 16,
        "dec1": 16, "dec2": 32, "dec3": 32,
        "out": 22,
    }
    assert not any(".link" in name for name in network.param_shapes)


def test_color_map_count_validation():
    sub = SubNetworkSpec(depth=3, filters=16)
    for count in (1, 3):
        with pytest.raises(ValidationError):
            PipelineSpec(
                mode=PipelineMode.PIPELINE3,
                color_map=[sub] * count,
                merge=sub,
                deghost=sub,
            )
    with pytest.raises(ValidationError):
        PipelineSpec(mode=PipelineMode.BASIC2, merge=sub, deghost=sub)
    with pytest.raises(ValidationError):
        SubNetworkSpec(depth=3, extra_convs=[1, 1])


def test_extra_conv_schedule():
    spec = PipelineSpec.pipeline3()
    sub = spec.merge
    assert sub.extra_convs == [2, 2, 4]
    assert sub.refinement_extras == [2, 2, 0]
    network = build_subnetwork(sub, 18, 3)
    assert {f"enc3.extra{i}" for i in range(4)} <= set(network.param_shapes)
    assert {"dec1.extra1", "dec2.extra1"} <= set(network.param_shapes)
    assert not any(name.startswith("dec3.extra") for name in network.param_shapes)


def test_pipeline3_shape_contract():
    rng = np.random.default_rng(3)
    spec = PipelineSpec.pipeline3()
    pipeline = FusionPipeline.initialize(spec, seed=1)
    images = [_random_image(rng, 128, 96) for _ in range(4)]
    out = forward_pipeline3(*images, spec, pipeline.params)
    assert len(out.cm_estimates) == 2
    for img in out.cm_estimates + [out.merged_estimate, out.final]:
        assert img.dims == (128, 96)
        assert img.channels == 3
    assert set(out.timings) == {"cm_under", "cm_over", "merge", "deghost"}


def test_pipeline2_dimension_mismatch():
    rng = np.random.default_rng(4)
    spec = PipelineSpec.pipeline2()
    pipeline = FusionPipeline.initialize(spec)
    with pytest.raises(ContractViolation):
        forward_pipeline2(
            _random_image(rng, 64, 64),
            _random_image(rng, 64, 64),
            _random_image(rng, 64, 32),
            spec,
            pipeline.params,
        )
    with pytest.raises(ContractViolation):
        forward_pipeline3(
            *[_random_image(rng, 64, 64) for _ in range(4)], spec, pipeline.params
        )


def test_forward_is_deterministic():
    rng = np.random.default_rng(5)
    pipeline = FusionPipeline.initialize(PipelineSpec.basic2(), seed=3)
    inputs = {"ref": _batch(rng, 32, 48), "nonref": _batch(rng, 32, 48)}
    first, _ = pipeline.forward(inputs)
    second, _ = pipeline.forward(inputs)
    assert np.array_equal(first["final"].values, second["final"].values)
    again = FusionPipeline.initialize(PipelineSpec.basic2(), seed=3)
    third, _ = again.forward(inputs)
    assert np.array_equal(first["final"].values, third["final"].values)


def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(6)
    spec = PipelineSpec.pipeline2()
    pipeline = FusionPipeline.initialize(spec, seed=2)
    path = tmp_path / "model.lefn"
    save_params(pipeline, path)
    assert path.read_bytes()[:4] == b"LEFN"

    loaded = load_params(path, expected_spec=spec)
    images = {name: _random_image(rng, 64, 32) for name in ("ref", "nonref", "ghost")}
    before = pipeline.infer(images)
    after = loaded.infer(images)
    assert np.array_equal(before.final.data, after.final.data)
    assert np.array_equal(before.cm_estimates[0].data, after.cm_estimates[0].data)

    again = tmp_path / "again.lefn"
    save_params(loaded, again)
    assert again.read_bytes() == path.read_bytes()


def test_checkpoint_format_errors(tmp_path):
    pipeline = FusionPipeline.initialize(PipelineSpec.basic2())
    path = tmp_path / "model.lefn"
    save_params(pipeline, path)
    raw = path.read_bytes()

    bad_magic = tmp_path / "bad.lefn"
    bad_magic.write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(CheckpointFormatError):
        load_params(bad_magic)

    truncated = tmp_path / "short.lefn"
    truncated.write_bytes(raw[:-10])
    with pytest.raises(CheckpointFormatError):
        load_params(truncated)

    trailing = tmp_path / "long.lefn"
    trailing.write_bytes(raw + b"\0")
    with pytest.raises(CheckpointFormatError):
        load_params(trailing)


def test_checkpoint_spec_mismatch(tmp_path):
    path = tmp_path / "model.lefn"
    save_params(FusionPipeline.initialize(PipelineSpec.pipeline2()), path)
    expected = PipelineSpec.pipeline2()
    expected.merge.filters = 8
    with pytest.raises(IncompatibleCheckpointError) as info:
        load_params(path, expected_spec=expected)
    assert info.value.field_name == "merge.filters"
    with pytest.raises(IncompatibleCheckpointError) as info:
        load_params(path, expected_spec=PipelineSpec.basic2())
    expected = ("color_map", "deghost", "merge.link_topology", "mode")
    assert info.value.field_name in expected


def _tiny_spec(mode):
    sub = SubNetworkSpec(depth=2, filters=2)
    if mode == PipelineMode.BASIC2:
        return PipelineSpec(mode=mode, merge=sub)
    return PipelineSpec(
        mode=mode, color_map=[SubNetworkSpec(depth=1, filters=2)], merge=sub,
        deghost=SubNetworkSpec(depth=1, filters=2),
    )


@pytest.mark.parametrize("height,width", [(8, 12), (9, 13)])
@pytest.mark.parametrize("mode", [PipelineMode.BASIC2, PipelineMode.PIPELINE2])
def test_pipeline_gradients(mode, height, width):
    """Directional derivative per parameter tensor against the analytic gradient"""
    rng = np.random.default_rng(7)
    pipeline = FusionPipeline.initialize(_tiny_spec(mode), seed=4, dtype=np.float64)
    flat = pipeline.flat_params()
    for name, values in flat.items():
        if name.endswith(".bias"):
            values[:] = rng.normal(scale=0.1, size=values.shape)
    inputs = {
        name: _batch(rng, height, width, np.float64) for name in pipeline.input_names
    }
    values, _ = pipeline.forward(inputs)
    out_weights = {
        key: rng.normal(size=values[key].shape) for key in ("merged", "final")
    }
    if mode == PipelineMode.PIPELINE2:
        out_weights["cm_over"] = rng.normal(size=values["cm_over"].shape)

    def loss():
        out, _ = pipeline.forward(inputs)
        return sum(
            float((out[key].values * weight).sum())
            for key, weight in out_weights.items()
        )

    _, tape = pipeline.forward(inputs)
    grads = pipeline.backward(tape, out_weights)
    assert set(grads) == set(flat)

    eps = 1e-6
    for name, values in flat.items():
        direction = rng.normal(size=values.shape)
        values += eps * direction
        plus = loss()
        values -= 2 * eps * direction
        minus = loss()
        values += eps * direction
        numeric = (plus - minus) / (2 * eps)
        analytic = float((grads[name] * direction).sum())
        scale = max(abs(numeric) + abs(analytic), 1e-12)
        assert abs(numeric - analytic) / scale < 1e-4, name


@pytest.mark.parametrize("height,width", [(8, 8), (11, 13)])
def test_dense_depth3_gradients(height, width):
    """Long links: stride-8 strided conv down, bilinear fit two levels up"""
    network = build_subnetwork(SubNetworkSpec(depth=3, filters=2), 3, 3)
    down = network.param_shapes["dec1.link0"]
    assert (down.kernel, down.stride) == ((16, 16), 8)
    assert "dec3.link3" not in network.param_shapes
    assert network.param_shapes["dec3.link4"].transposed

    rng = np.random.default_rng(height + width)
    params = network.initialize(rng, dtype=np.float64)
    for p in params.values():
        p.bias[:] = rng.normal(scale=0.1, size=p.bias.shape)
    x = Tensor(rng.random((1, 3, height, width)))
    out, tape = network.forward(params, x)
    out_weights = rng.normal(size=out.shape)
    grad_x, grads = network.backward(params, tape, out_weights)

    def loss():
        return float((network.forward(params, x)[0].values * out_weights).sum())

    eps = 1e-6
    arrays = [("input", x.values, grad_x)]
    for name, p in params.items():
        arrays.append((f"{name}.weights", p.weights, grads[name][0]))
        arrays.append((f"{name}.bias", p.bias, grads[name][1]))
    for name, values, grad in arrays:
        direction = rng.normal(size=values.shape)
        values += eps * direction
        plus = loss()
        values -= 2 * eps * direction
        minus = loss()
        values += eps * direction
        numeric = (plus - minus) / (2 * eps)
        analytic = float((grad * direction).sum())
        scale = max(abs(numeric) + abs(analytic), 1e-12)
        assert abs(numeric - analytic) / scale < 1e-4, name


def test_with_flat_params_and_astype():
    pipeline = FusionPipeline.initialize(PipelineSpec.basic2(), seed=5)
    flat = {name: np.zeros_like(v) for name, v in pipeline.flat_params().items()}
    zeroed = pipeline.with_flat_params(flat)
    out, _ = zeroed.forward({"ref": np.ones((1, 3, 16, 16), np.float32),
                             "nonref": np.ones((1, 3, 16, 16), np.float32)})
    assert np.array_equal(out["final"].values, np.zeros((1, 3, 16, 16), np.float32))
    assert pipeline.astype(np.float64).dtype == np.float64


def main():
    """Run this module's tests"""
    return pytest.main([__file__, "-q"])


if __name__ == "__main__":
    sys.exit(main())
