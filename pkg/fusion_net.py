"""
Encoder-decoder sub-networks and the multi-stage fusion pipelines built from
them, plus the binary checkpoint format.

A sub-network is a chain of level blocks: `depth` stride-2 convolution levels
(contractive part), `depth` stride-2 deconvolution levels (refinement part)
and a final stride-1 convolution. With simple links each deconvolution level
also sees the size-matching contractive map; with dense links every block
sees the original input and every earlier block output, brought to its input
resolution by a learned strided convolution (down), a learned deconvolution
(up by 2) or bilinear resizing (up by more).
"""
import json
import struct
import time
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, Field, model_validator

from image_core import ContractViolation, Image
from tensor_engine import (
    LEAKY_SLOPE,
    ConvParams,
    Tensor,
    bilinear_resize_backward,
    bilinear_resize_tensor,
    concat,
    concat_backward,
    conv2d_backward,
    conv2d_forward,
    conv_output_size,
    deconv2d_backward,
    deconv2d_forward,
    leaky_relu_backward,
    leaky_relu_forward,
)

IMAGE_CHANNELS = 3
MAGIC = b"LEFN"
FORMAT_VERSION = 1


class CheckpointFormatError(ValueError):
    """Checkpoint file is not a readable LEFN file"""


class IncompatibleCheckpointError(ValueError):
    """Checkpoint architecture differs from the one requested"""

    def __init__(self, field_name: str, message: str):
        super().__init__(f"incompatible checkpoint: {field_name}: {message}")
        self.field_name = field_name


class LinkTopology(str, Enum):
    SIMPLE = "simple"
    DENSE = "dense"


class PipelineMode(str, Enum):
    BASIC2 = "basic2"
    PIPELINE2 = "pipeline2"
    PIPELINE3 = "pipeline3"


class SubNetworkSpec(BaseModel):
    depth: int = Field(3, ge=1)
    filters: int = Field(16, ge=1)
    kernel: Tuple[int, int] = (4, 4)
    stride: int = Field(2, ge=2)
    extra_convs: List[int] = Field(default_factory=list)
    link_topology: LinkTopology = LinkTopology.DENSE

    @model_validator(mode="after")
    def _check_extra_convs(self):
        if not self.extra_convs:
            self.extra_convs = [0] * self.depth
        if len(self.extra_convs) != self.depth:
            raise ValueError(
                f"extra_convs has {len(self.extra_convs)} entries,"
                f" depth is {self.depth}"
            )
        if any(n < 0 for n in self.extra_convs):
            raise ValueError("extra_convs counts must be >= 0")
        return self

    @property
    def refinement_extras(self) -> List[int]:
        """Extra convs after each deconv level; none at full resolution"""
        return list(reversed(self.extra_convs[: self.depth - 1])) + [0]

    @property
    def min_input_size(self) -> int:
        return self.stride**self.depth


class PipelineSpec(BaseModel):
    """Three-stage pipeline; basic2 uses `merge` as its single network"""

    mode: PipelineMode
    color_map: List[SubNetworkSpec] = Field(default_factory=list)
    merge: SubNetworkSpec
    deghost: Optional[SubNetworkSpec] = None
    leaky_slope: float = Field(LEAKY_SLOPE, ge=0)

    @model_validator(mode="after")
    def _check_stages(self):
        expected_cm = {
            PipelineMode.BASIC2: 0,
            PipelineMode.PIPELINE2: 1,
            PipelineMode.PIPELINE3: 2,
        }
        wanted = expected_cm[self.mode]
        if len(self.color_map) != wanted:
            raise ValueError(
                f"{self.mode.value} needs {wanted} color mapping sub-networks, "
                f"got {len(self.color_map)}"
            )
        if self.mode == PipelineMode.BASIC2:
            if self.deghost is not None:
                raise ValueError("basic2 has no de-ghosting sub-network")
        elif self.deghost is None:
            raise ValueError(f"{self.mode.value} needs a de-ghosting sub-network")
        return self

    @classmethod
    def basic2(cls) -> "PipelineSpec":
        return cls(
            mode=PipelineMode.BASIC2,
            merge=SubNetworkSpec(
                depth=3, filters=16, link_topology=LinkTopology.SIMPLE
            ),
        )

    @classmethod
    def pipeline2(cls) -> "PipelineSpec":
        return cls(
            mode=PipelineMode.PIPELINE2,
            color_map=[SubNetworkSpec(depth=5, filters=32)],
            merge=SubNetworkSpec(depth=3, filters=16),
            deghost=SubNetworkSpec(depth=3, filters=16),
        )

    @classmethod
    def pipeline3(cls) -> "PipelineSpec":
        sub = SubNetworkSpec(depth=3, filters=16, extra_convs=[2, 2, 4])
        return cls(
            mode=PipelineMode.PIPELINE3,
            color_map=[sub, sub.model_copy(deep=True)],
            merge=sub.model_copy(deep=True),
            deghost=sub.model_copy(deep=True),
        )

    @classmethod
    def for_mode(cls, mode: Union[str, PipelineMode]) -> "PipelineSpec":
        return getattr(cls, PipelineMode(mode).value)()

    def stages(self) -> List["Stage"]:
        return _STAGE_GRAPHS[self.mode](self)


@dataclass(frozen=True)
class Stage:
    name: str
    spec: SubNetworkSpec
    inputs: Tuple[str, ...]
    output: str


def _basic2_stages(spec: PipelineSpec) -> List[Stage]:
    return [Stage("merge", spec.merge, ("ref", "nonref"), "final")]


def _pipeline2_stages(spec: PipelineSpec) -> List[Stage]:
    return [
        Stage("cm_over", spec.color_map[0], ("ref", "nonref"), "cm_over"),
        Stage("merge", spec.merge, ("ref", "cm_over", "nonref", "ghost"), "merged"),
        Stage("deghost", spec.deghost, ("merged", "ghost"), "final"),
    ]


def _pipeline3_stages(spec: PipelineSpec) -> List[Stage]:
    return [
        Stage("cm_under", spec.color_map[0], ("ref", "under"), "cm_under"),
        Stage("cm_over", spec.color_map[1], ("ref", "over"), "cm_over"),
        Stage(
            "merge",
            spec.merge,
            ("ref", "cm_under", "cm_over", "under", "over", "ghost"),
            "merged",
        ),
        Stage("deghost", spec.deghost, ("merged", "ghost"), "final"),
    ]


_STAGE_GRAPHS = {
    PipelineMode.BASIC2: _basic2_stages,
    PipelineMode.PIPELINE2: _pipeline2_stages,
    PipelineMode.PIPELINE3: _pipeline3_stages,
}


# Sub-network construction

@dataclass(frozen=True)
class _Op:
    kind: str  # conv | deconv | act | fit
    name: Optional[str] = None


@dataclass(frozen=True)
class _ParamShape:
    in_channels: int
    out_channels: int
    kernel: Tuple[int, int]
    stride: int
    padding: Tuple[int, int]
    transposed: bool


@dataclass
class _Block:
    name: str
    res_in: int
    res_out: int
    channels_out: int
    # (source map index, link ops)
    sources: List[Tuple[int, List[_Op]]] = field(default_factory=list)
    ops: List[_Op] = field(default_factory=list)


@dataclass
class Tape:
    """Activations recorded by a forward pass, consumed by backward"""

    maps: List[Tensor]
    level_dims: List[Tuple[int, int]]
    link_inputs: List[List[List[Tensor]]]
    link_channels: List[List[int]]
    op_inputs: List[List[Tensor]]


class SubNetwork:
    """Parameter-free description of one encoder-decoder; weights live outside"""

    def __init__(self, spec: SubNetworkSpec, in_channels: int, out_channels: int,
                 slope: float = LEAKY_SLOPE):
        self.spec = spec
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.slope = slope
        self.param_shapes: Dict[str, _ParamShape] = {}
        self.blocks: List[_Block] = []
        self._build()
        self._check_channel_accounting()

    # map 0 is the network input, block b writes map b + 1
    def _build(self) -> None:
        spec = self.spec
        depth, filters = spec.depth, spec.filters
        kernel = tuple(spec.kernel)
        pad = ((kernel[0] - spec.stride) // 2, (kernel[1] - spec.stride) // 2)

        blocks = []
        for k in range(1, depth + 1):
            blocks.append(_Block(f"enc{k}", k - 1, k, filters))
        for j in range(1, depth + 1):
            blocks.append(_Block(f"dec{j}", depth - j + 1, depth - j, filters))
        blocks.append(_Block("out", 0, 0, self.out_channels))

        map_res = [0]
        map_channels = [self.in_channels]
        for b, block in enumerate(blocks):
            block.sources = self._sources_for(b, block, blocks, map_res, map_channels)
            in_channels = sum(map_channels[src] for src, _ in block.sources)
            block.ops = self._ops_for(b, block, in_channels, kernel, pad)
            map_res.append(block.res_out)
            map_channels.append(block.channels_out)
        self.blocks = blocks
        self._map_res = map_res
        self._map_channels = map_channels

    def _sources_for(self, b, block, blocks, map_res, map_channels):
        depth = self.spec.depth
        if self.spec.link_topology == LinkTopology.SIMPLE:
            if block.name.startswith("enc"):
                indices = [b]
            elif block.name == "dec1":
                indices = [b]
            elif block.name.startswith("dec"):
                # previous refinement output plus the contractive map at this resolution
                indices = [b, depth - (b - depth)]
            else:
                indices = [b, 0]
        else:
            indices = list(range(b + 1))

        sources = []
        for src in indices:
            sources.append(
                (src, self._link_ops(block, src, map_res[src], map_channels[src]))
            )
        return sources

    def _link_ops(
        self, block: _Block, src: int, src_res: int, channels: int
    ) -> List[_Op]:
        gap = block.res_in - src_res
        if gap == 0:
            return []
        name = f"{block.name}.link{src}"
        stride = self.spec.stride
        if gap > 0:
            factor = stride**gap
            self.param_shapes[name] = _ParamShape(
                channels, channels, (2 * factor, 2 * factor), factor,
                (factor // 2, factor // 2), False,
            )
            return [_Op("conv", name), _Op("fit")]
        if gap == -1:
            kernel = tuple(self.spec.kernel)
            pad = ((kernel[0] - stride) // 2, (kernel[1] - stride) // 2)
            self.param_shapes[name] = _ParamShape(
                channels, channels, kernel, stride, pad, True
            )
            return [_Op("deconv", name), _Op("fit")]
        return [_Op("fit")]

    def _ops_for(self, b, block, in_channels, kernel, pad) -> List[_Op]:
        spec = self.spec
        filters = spec.filters
        ops: List[_Op] = []
        if block.name == "out":
            name = "out.conv"
            self.param_shapes[name] = _ParamShape(
                in_channels, self.out_channels, (3, 3), 1, (1, 1), False
            )
            return [_Op("conv", name)]

        if block.name.startswith("enc"):
            name = f"{block.name}.conv"
            self.param_shapes[name] = _ParamShape(
                in_channels, filters, kernel, spec.stride, pad, False
            )
            ops += [_Op("conv", name), _Op("act")]
            extras = spec.extra_convs[block.res_out - 1]
        else:
            name = f"{block.name}.deconv"
            self.param_shapes[name] = _ParamShape(
                in_channels, filters, kernel, spec.stride, pad, True
            )
            ops += [_Op("deconv", name), _Op("act"), _Op("fit")]
            extras = spec.refinement_extras[b - spec.depth]

        for i in range(extras):
            name = f"{block.name}.extra{i}"
            self.param_shapes[name] = _ParamShape(
                filters, filters, (3, 3), 1, (1, 1), False
            )
            ops += [_Op("conv", name), _Op("act")]
        return ops

    def _check_channel_accounting(self) -> None:
        """Each block's first layer must take exactly the concatenated sources"""
        for block in self.blocks:
            expected = sum(self._map_channels[src] for src, _ in block.sources)
            first = self.param_shapes[block.ops[0].name]
            if first.in_channels != expected:
                raise ContractViolation(
                    f"{block.name}: first layer takes {first.in_channels} channels, "
                    f"sources provide {expected}"
                )
            for src, link in block.sources:
                for op in link:
                    if not op.name:
                        continue
                    shape = self.param_shapes[op.name]
                    if shape.in_channels != self._map_channels[src]:
                        raise ContractViolation(f"{op.name}: link channel mismatch")

    def block_input_channels(self) -> Dict[str, int]:
        return {
            block.name: sum(self._map_channels[src] for src, _ in block.sources)
            for block in self.blocks
        }

    def initialize(
        self, rng: np.random.Generator, dtype=np.float32
    ) -> Dict[str, ConvParams]:
        return {
            name: ConvParams.initialize(
                shape.in_channels, shape.out_channels, shape.kernel, shape.stride,
                shape.padding, rng, transposed=shape.transposed, dtype=dtype,
            )
            for name, shape in self.param_shapes.items()
        }

    def check_params(self, params: Dict[str, ConvParams], prefix: str = "") -> None:
        missing = set(self.param_shapes) - set(params)
        extra = set(params) - set(self.param_shapes)
        if missing or extra:
            raise IncompatibleCheckpointError(
                f"{prefix}params",
                f"missing {sorted(missing)}, unexpected {sorted(extra)}",
            )
        for name, shape in self.param_shapes.items():
            p = params[name]
            expected = (shape.out_channels, shape.in_channels) + tuple(shape.kernel)
            if p.weights.shape != expected:
                raise IncompatibleCheckpointError(
                    f"{prefix}{name}", f"shape {p.weights.shape}, expected {expected}"
                )

    def level_dims(self, height: int, width: int) -> List[Tuple[int, int]]:
        """Spatial size at every resolution level, level 0 being the input"""
        if min(height, width) < self.spec.min_input_size:
            raise ContractViolation(
                f"input {width}x{height} smaller than {self.spec.min_input_size} "
                f"required by depth {self.spec.depth}"
            )
        kh, kw = self.spec.kernel
        ph, pw = (kh - self.spec.stride) // 2, (kw - self.spec.stride) // 2
        dims = [(height, width)]
        for _ in range(self.spec.depth):
            h, w = dims[-1]
            dims.append(
                (conv_output_size(h, kh, self.spec.stride, ph),
                 conv_output_size(w, kw, self.spec.stride, pw))
            )
        return dims

    # forward / backward

    def _op_forward(self, params, op: _Op, h: Tensor, target) -> Tensor:
        if op.kind == "conv":
            return conv2d_forward(h, params[op.name])
        if op.kind == "deconv":
            return deconv2d_forward(h, params[op.name])
        if op.kind == "act":
            return leaky_relu_forward(h, self.slope)
        return bilinear_resize_tensor(h, target)

    def _op_backward(
        self, params, op: _Op, inp: Tensor, g: np.ndarray, grads
    ) -> np.ndarray:
        if op.kind in ("conv", "deconv"):
            backward = conv2d_backward if op.kind == "conv" else deconv2d_backward
            gx, gw, gb = backward(inp, params[op.name], g)
            if op.name in grads:
                grads[op.name] = (grads[op.name][0] + gw, grads[op.name][1] + gb)
            else:
                grads[op.name] = (gw, gb)
            return gx
        if op.kind == "act":
            return leaky_relu_backward(inp, g, self.slope)
        return bilinear_resize_backward(g, inp.shape[2:])

    def _run_ops(self, params, ops, h: Tensor, target) -> Tuple[Tensor, List[Tensor]]:
        inputs = []
        for op in ops:
            inputs.append(h)
            h = self._op_forward(params, op, h, target)
        return h, inputs

    def forward(self, params: Dict[str, ConvParams], x: Tensor) -> Tuple[Tensor, Tape]:
        if x.shape[1] != self.in_channels:
            raise ContractViolation(
                f"sub-network expects {self.in_channels} channels, got {x.shape[1]}"
            )
        dims = self.level_dims(*x.shape[2:])
        tape = Tape(
            maps=[x], level_dims=dims, link_inputs=[], link_channels=[], op_inputs=[]
        )
        for block in self.blocks:
            parts, link_inputs = [], []
            for src, link in block.sources:
                part, inputs = self._run_ops(
                    params, link, tape.maps[src], dims[block.res_in]
                )
                parts.append(part)
                link_inputs.append(inputs)
            h, op_inputs = self._run_ops(
                params, block.ops, concat(parts), dims[block.res_out]
            )
            tape.maps.append(h)
            tape.link_inputs.append(link_inputs)
            tape.link_channels.append([p.shape[1] for p in parts])
            tape.op_inputs.append(op_inputs)
        return tape.maps[-1], tape

    def backward(
        self, params: Dict[str, ConvParams], tape: Tape, grad_out: np.ndarray
    ) -> Tuple[np.ndarray, Dict[str, Tuple[np.ndarray, np.ndarray]]]:
        """Gradient w.r.t. the input and (weight, bias) gradients per layer"""
        grads: Dict[str, Tuple[np.ndarray, np.ndarray]] = {}
        map_grads: List[Optional[np.ndarray]] = [None] * len(tape.maps)
        map_grads[-1] = grad_out
        for b in reversed(range(len(self.blocks))):
            g = map_grads[b + 1]
            if g is None:
                continue
            block = self.blocks[b]
            for op, inp in zip(reversed(block.ops), reversed(tape.op_inputs[b])):
                g = self._op_backward(params, op, inp, g, grads)
            parts = concat_backward(g, tape.link_channels[b])
            links = zip(block.sources, tape.link_inputs[b], parts)
            for (src, link), inputs, part in links:
                for op, inp in zip(reversed(link), reversed(inputs)):
                    part = self._op_backward(params, op, inp, part, grads)
                if map_grads[src] is not None:
                    part = map_grads[src] + part
                map_grads[src] = part
        grad_x = map_grads[0]
        if grad_x is None:
            grad_x = np.zeros_like(tape.maps[0].values)
        return grad_x, grads


def build_subnetwork(spec: SubNetworkSpec, in_channels: int, out_channels: int,
                     slope: float = LEAKY_SLOPE) -> SubNetwork:
    return SubNetwork(spec, in_channels, out_channels, slope)


# Pipelines

@dataclass
class PipelineOutput:
    cm_estimates: List[Image]
    merged_estimate: Image
    final: Image
    timings: Dict[str, float] = field(default_factory=dict)


@dataclass
class PipelineTape:
    values: Dict[str, Tensor]
    stage_tapes: Dict[str, Tape]


Params = Dict[str, Dict[str, ConvParams]]


class FusionPipeline:
    """A PipelineSpec bound to its parameters"""

    def __init__(self, spec: PipelineSpec, params: Params):
        self.spec = spec
        self.stages = spec.stages()
        self.networks: Dict[str, SubNetwork] = {
            stage.name: build_subnetwork(
                stage.spec, IMAGE_CHANNELS * len(stage.inputs), IMAGE_CHANNELS,
                spec.leaky_slope,
            )
            for stage in self.stages
        }
        if set(params) != set(self.networks):
            raise IncompatibleCheckpointError(
                "stages", f"have {sorted(params)}, expected {sorted(self.networks)}"
            )
        for name, network in self.networks.items():
            network.check_params(params[name], prefix=f"{name}/")
        self.params = params

    @classmethod
    def initialize(
        cls, spec: PipelineSpec, seed: int = 0, dtype=np.float32
    ) -> "FusionPipeline":
        rng = np.random.default_rng(seed)
        params = {}
        for stage in spec.stages():
            network = build_subnetwork(
                stage.spec,
                IMAGE_CHANNELS * len(stage.inputs),
                IMAGE_CHANNELS,
                spec.leaky_slope,
            )
            params[stage.name] = network.initialize(rng, dtype)
        return cls(spec, params)

    @property
    def dtype(self):
        first = next(iter(next(iter(self.params.values())).values()))
        return first.weights.dtype

    @property
    def input_names(self) -> Tuple[str, ...]:
        produced = {stage.output for stage in self.stages}
        names = []
        for stage in self.stages:
            names += [k for k in stage.inputs if k not in produced and k not in names]
        return tuple(names)

    @property
    def min_input_size(self) -> int:
        return max(network.spec.min_input_size for network in self.networks.values())

    def astype(self, dtype) -> "FusionPipeline":
        params = {
            stage: {
                name: ConvParams(
                    p.in_channels, p.out_channels, p.kernel, p.stride, p.padding,
                    p.weights.astype(dtype), p.bias.astype(dtype),
                )
                for name, p in layers.items()
            }
            for stage, layers in self.params.items()
        }
        return FusionPipeline(self.spec, params)

    def flat_params(self) -> Dict[str, np.ndarray]:
        flat = {}
        for stage in sorted(self.params):
            for name in sorted(self.params[stage]):
                p = self.params[stage][name]
                flat[f"{stage}/{name}.weight"] = p.weights
                flat[f"{stage}/{name}.bias"] = p.bias
        return flat

    def with_flat_params(self, flat: Dict[str, np.ndarray]) -> "FusionPipeline":
        params = {}
        for stage, layers in self.params.items():
            params[stage] = {
                name: ConvParams(
                    p.in_channels, p.out_channels, p.kernel, p.stride, p.padding,
                    flat[f"{stage}/{name}.weight"], flat[f"{stage}/{name}.bias"],
                )
                for name, p in layers.items()
            }
        return FusionPipeline(self.spec, params)

    def forward(
        self, inputs: Dict[str, np.ndarray], timings: Optional[Dict[str, float]] = None
    ) -> Tuple[Dict[str, Tensor], PipelineTape]:
        """Run every stage on N x 3 x H x W batches keyed by input name"""
        missing = [name for name in self.input_names if name not in inputs]
        if missing:
            raise ContractViolation(f"missing pipeline inputs: {missing}")
        shapes = {inputs[name].shape for name in self.input_names}
        if len(shapes) != 1:
            raise ContractViolation(
                f"pipeline inputs differ in shape: {sorted(shapes)}"
            )

        values = {
            name: Tensor(inputs[name].astype(self.dtype, copy=False))
            for name in self.input_names
        }
        stage_tapes = {}
        for stage in self.stages:
            started = time.perf_counter()
            x = concat([values[k] for k in stage.inputs])
            out, tape = self.networks[stage.name].forward(self.params[stage.name], x)
            values[stage.output] = out
            stage_tapes[stage.name] = tape
            if timings is not None:
                timings[stage.name] = time.perf_counter() - started
        if "merged" not in values:
            values["merged"] = values["final"]
        return values, PipelineTape(values, stage_tapes)

    def backward(
        self, tape: PipelineTape, output_grads: Dict[str, np.ndarray]
    ) -> Dict[str, np.ndarray]:
        """Parameter gradients keyed like `flat_params`, from output gradients"""
        value_grads = dict(output_grads)
        if self.spec.mode == PipelineMode.BASIC2 and "merged" in value_grads:
            merged = value_grads.pop("merged")
            if "final" in value_grads:
                merged = value_grads["final"] + merged
            value_grads["final"] = merged

        flat_grads: Dict[str, np.ndarray] = {}
        for stage in reversed(self.stages):
            g = value_grads.get(stage.output)
            params = self.params[stage.name]
            if g is None:
                for name, p in params.items():
                    flat_grads[f"{stage.name}/{name}.weight"] = np.zeros_like(p.weights)
                    flat_grads[f"{stage.name}/{name}.bias"] = np.zeros_like(p.bias)
                continue
            network = self.networks[stage.name]
            grad_x, grads = network.backward(params, tape.stage_tapes[stage.name], g)
            for name, p in params.items():
                zeros = (np.zeros_like(p.weights), np.zeros_like(p.bias))
                gw, gb = grads.get(name, zeros)
                flat_grads[f"{stage.name}/{name}.weight"] = gw
                flat_grads[f"{stage.name}/{name}.bias"] = gb
            parts = concat_backward(grad_x, [IMAGE_CHANNELS] * len(stage.inputs))
            for key, part in zip(stage.inputs, parts):
                if key in value_grads:
                    part = value_grads[key] + part
                value_grads[key] = part
        return flat_grads

    def infer(self, images: Dict[str, Image]) -> PipelineOutput:
        """Single-sample inference on Images"""
        batch = {name: _image_to_batch(img, self.dtype) for name, img in images.items()}
        timings: Dict[str, float] = {}
        values, _ = self.forward(batch, timings)
        cm_keys = [s.output for s in self.stages if s.name.startswith("cm_")]
        return PipelineOutput(
            cm_estimates=[_batch_to_image(values[k].values) for k in cm_keys],
            merged_estimate=_batch_to_image(values["merged"].values),
            final=_batch_to_image(values["final"].values),
            timings=timings,
        )


def _image_to_batch(img: Image, dtype) -> np.ndarray:
    return np.ascontiguousarray(img.data.transpose(2, 0, 1)[None], dtype=dtype)


def _batch_to_image(values: np.ndarray, index: int = 0) -> Image:
    data = values[index].transpose(1, 2, 0)
    return Image(np.ascontiguousarray(data, dtype=np.float32))


def _check_dims(images: Sequence[Image]) -> None:
    dims = {img.dims for img in images}
    if len(dims) != 1:
        raise ContractViolation(f"pipeline inputs differ in size: {sorted(dims)}")


def forward_pipeline2(
    ref: Image, nonref: Image, ghost: Image, spec: PipelineSpec, params: Params
) -> PipelineOutput:
    if spec.mode not in (PipelineMode.PIPELINE2, PipelineMode.BASIC2):
        raise ContractViolation(
            f"forward_pipeline2 needs a 2-LDR spec, got {spec.mode.value}"
        )
    _check_dims([ref, nonref, ghost])
    pipeline = FusionPipeline(spec, params)
    images = {"ref": ref, "nonref": nonref}
    if spec.mode == PipelineMode.PIPELINE2:
        images["ghost"] = ghost
    return pipeline.infer(images)


def forward_pipeline3(
    ref: Image,
    under: Image,
    over: Image,
    ghost: Image,
    spec: PipelineSpec,
    params: Params,
) -> PipelineOutput:
    if spec.mode != PipelineMode.PIPELINE3:
        raise ContractViolation(
            f"forward_pipeline3 needs a pipeline3 spec, got {spec.mode.value}"
        )
    _check_dims([ref, under, over, ghost])
    pipeline = FusionPipeline(spec, params)
    return pipeline.infer({"ref": ref, "under": under, "over": over, "ghost": ghost})


# Checkpoints: "LEFN", u32 version, u32 + UTF-8 JSON spec, u32 tensor count,
# then per tensor u32 + UTF-8 name, u32 ndim, u32 dims, float32 values.
# Everything little-endian.

def save_params(pipeline: FusionPipeline, path: Union[str, Path]) -> None:
    spec_json = pipeline.spec.model_dump_json().encode("utf-8")
    flat = pipeline.flat_params()
    chunks = [MAGIC, struct.pack("<I", FORMAT_VERSION)]
    chunks.append(struct.pack("<I", len(spec_json)) + spec_json)
    chunks.append(struct.pack("<I", len(flat)))
    for name, values in flat.items():
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(encoded)) + encoded)
        chunks.append(struct.pack(f"<I{values.ndim}I", values.ndim, *values.shape))
        chunks.append(np.ascontiguousarray(values, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(chunks))


class _Reader:
    def __init__(self, raw: bytes, path):
        self.raw, self.pos, self.path = raw, 0, path

    def take(self, count: int) -> bytes:
        if self.pos + count > len(self.raw):
            raise CheckpointFormatError(f"{self.path}: truncated checkpoint")
        chunk = self.raw[self.pos : self.pos + count]
        self.pos += count
        return chunk

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def _first_difference(a, b, path: str = "") -> Optional[str]:
    if isinstance(a, dict) and isinstance(b, dict):
        for key in sorted(set(a) | set(b)):
            where = f"{path}.{key}" if path else str(key)
            if key not in a or key not in b:
                return where
            found = _first_difference(a[key], b[key], where)
            if found:
                return found
        return None
    if isinstance(a, list) and isinstance(b, list):
        if len(a) != len(b):
            return path
        for i, (x, y) in enumerate(zip(a, b)):
            found = _first_difference(x, y, f"{path}[{i}]")
            if found:
                return found
        return None
    return None if a == b else path


def load_params(
    path: Union[str, Path], expected_spec: Optional[PipelineSpec] = None
) -> FusionPipeline:
    path = Path(path)
    reader = _Reader(path.read_bytes(), path)
    if reader.take(4) != MAGIC:
        raise CheckpointFormatError(f"{path}: not a checkpoint (bad magic)")
    version = reader.u32()
    if version != FORMAT_VERSION:
        raise CheckpointFormatError(f"{path}: unsupported checkpoint version {version}")
    try:
        header = reader.take(reader.u32()).decode("utf-8")
        spec = PipelineSpec.model_validate(json.loads(header))
    except (UnicodeDecodeError, json.JSONDecodeError, ValueError) as e:
        raise CheckpointFormatError(f"{path}: unreadable spec header: {e}") from e

    if expected_spec is not None:
        differing = _first_difference(
            expected_spec.model_dump(mode="json"), spec.model_dump(mode="json")
        )
        if differing:
            raise IncompatibleCheckpointError(
                differing, "differs from the requested spec"
            )

    flat = {}
    for _ in range(reader.u32()):
        name = reader.take(reader.u32()).decode("utf-8")
        ndim = reader.u32()
        shape = struct.unpack(f"<{ndim}I", reader.take(4 * ndim))
        count = int(np.prod(shape)) if shape else 1
        values = np.frombuffer(reader.take(4 * count), dtype="<f4").reshape(shape)
        flat[name] = values.astype(np.float32)
    if reader.pos != len(reader.raw):
        raise CheckpointFormatError(f"{path}: trailing bytes after tensors")

    template = FusionPipeline.initialize(spec, seed=0)
    expected = template.flat_params()
    if set(flat) != set(expected):
        missing = sorted(set(expected) - set(flat))
        unexpected = sorted(set(flat) - set(expected))
        raise IncompatibleCheckpointError(
            "tensors", f"missing {missing[:3]}, unexpected {unexpected[:3]}"
        )
    for name, values in expected.items():
        if flat[name].shape != values.shape:
            raise IncompatibleCheckpointError(
                name, f"shape {flat[name].shape}, expected {values.shape}"
            )
    return template.with_flat_params(flat)
