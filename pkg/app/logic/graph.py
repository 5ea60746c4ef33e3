"""
Chain CNN representation.

A ModelGraph is an ordered list of resolved LayerSpecs plus a weight table
keyed "<layer id>.weight" / "<layer id>.bias". Graphs are treated as
immutable: every transformation returns a new graph sharing untouched arrays.
"""

import logging
from collections import defaultdict
from typing import Iterable, Optional, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict

from app.logic.numerics import ShapeError, conv_output_extent, layer_backward, layer_forward
from app.models.graph import FlopsReport, LayerBlueprint, LayerSpec
from app.models.tensors import LayerParams
from app.schemas import ArchPreset, LayerKind

logger = logging.getLogger(__name__)

_ID_PREFIX = {
    LayerKind.CONV: "conv",
    LayerKind.RELU: "relu",
    LayerKind.MAXPOOL: "pool",
    LayerKind.AVGPOOL: "avgpool",
    LayerKind.FLATTEN: "flatten",
    LayerKind.LINEAR: "fc",
}

TINYVGG6_WIDTHS: list[int | str] = [16, 32, "M", 64, 64, "M", 128, 128, "M"]
VGG16_WIDTHS: list[int | str] = [
    64, 64, "M", 128, 128, "M", 256, 256, 256, "M", 512, 512, 512, "M", 512, 512, 512, "M",
]


# ============== EXCEPTIONS ==============

class GraphError(ValueError):
    """Raised when a graph cannot be built or transformed consistently."""
    pass


class UnknownPresetError(GraphError):
    pass


# ============== GRAPH ==============

class ForwardPass(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    logits: np.ndarray
    captured: dict[str, np.ndarray] = {}
    # inputs[i] is the tensor fed to layers[i]; empty unless requested
    inputs: list[np.ndarray] = []


class ModelGraph(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    arch: str
    input_shape: tuple[int, int, int]
    layers: list[LayerSpec]
    weights: dict[str, np.ndarray]

    def index(self, layer_id: str) -> int:
        for i, spec in enumerate(self.layers):
            if spec.id == layer_id:
                return i
        raise GraphError(f"no layer named {layer_id!r} in {self.arch}")

    def layer(self, layer_id: str) -> LayerSpec:
        return self.layers[self.index(layer_id)]

    @property
    def conv_ids(self) -> list[str]:
        return [spec.id for spec in self.layers if spec.kind == LayerKind.CONV]

    @property
    def prunable_ids(self) -> list[str]:
        """Layers whose output filters the search may remove: every convolution."""
        return self.conv_ids

    @property
    def parameterized_ids(self) -> list[str]:
        return [spec.id for spec in self.layers if spec.parameterized]

    def successor(self, layer_id: str) -> Optional[LayerSpec]:
        """Next parameterized layer after `layer_id`, if any."""
        for spec in self.layers[self.index(layer_id) + 1:]:
            if spec.parameterized:
                return spec
        return None

    def activation_id(self, conv_id: str) -> str:
        """Id of the nonlinearity applied to a conv's output (the conv itself if none follows)."""
        i = self.index(conv_id)
        if i + 1 < len(self.layers) and self.layers[i + 1].kind == LayerKind.RELU:
            return self.layers[i + 1].id
        return conv_id

    def input_channel_width(self, layer_id: str) -> int:
        """Number of weight columns one input channel of a parameterized layer occupies."""
        spec = self.layer(layer_id)
        if spec.kind == LayerKind.CONV:
            return spec.kernel[0] * spec.kernel[1]
        for prev in reversed(self.layers[:self.index(layer_id)]):
            if prev.kind == LayerKind.FLATTEN:
                return prev.in_hw[0] * prev.in_hw[1]
            if prev.parameterized:
                break
        return 1

    def params(self, spec: LayerSpec) -> LayerParams:
        return LayerParams(
            weight=self.weights.get(f"{spec.id}.weight"),
            bias=self.weights.get(f"{spec.id}.bias"),
            stride=spec.stride,
            pad=spec.pad,
            pool=spec.kernel[0],
        )

    def forward(
        self,
        x: np.ndarray,
        capture: Iterable[str] = (),
        keep_inputs: bool = False,
    ) -> ForwardPass:
        wanted = set(capture)
        captured: dict[str, np.ndarray] = {}
        inputs: list[np.ndarray] = []
        for spec in self.layers:
            if keep_inputs:
                inputs.append(x)
            x = layer_forward(spec.kind, x, self.params(spec))
            if spec.id in wanted:
                captured[spec.id] = x
        return ForwardPass(logits=x, captured=captured, inputs=inputs)

    def predict(self, x: np.ndarray, batch_size: int = 256) -> np.ndarray:
        """Logits for a batch, evaluated in fixed-size chunks."""
        chunks = [self.forward(x[i:i + batch_size]).logits for i in range(0, len(x), batch_size)]
        return np.concatenate(chunks, axis=0)

    def backward(self, forward_pass: ForwardPass, dlogits: np.ndarray) -> dict[str, np.ndarray]:
        """Parameter gradients for every weight entry, given dLoss/dlogits."""
        if len(forward_pass.inputs) != len(self.layers):
            raise GraphError("backward needs a forward pass run with keep_inputs=True")
        grads: dict[str, np.ndarray] = {}
        dout = dlogits
        for spec, cached in zip(reversed(self.layers), reversed(forward_pass.inputs)):
            dout, layer_grads = layer_backward(spec.kind, cached, dout, self.params(spec))
            for name, grad in layer_grads.items():
                grads[f"{spec.id}.{name}"] = grad
        return grads

    def parameter_count(self) -> int:
        return int(sum(w.size for w in self.weights.values()))

    def copy_with(
        self,
        layers: Optional[list[LayerSpec]] = None,
        weights: Optional[dict[str, np.ndarray]] = None,
    ) -> "ModelGraph":
        return ModelGraph(
            arch=self.arch,
            input_shape=self.input_shape,
            layers=list(self.layers if layers is None else layers),
            weights=dict(self.weights if weights is None else weights),
        )

    def with_layer_weights(self, layer_id: str, weight: np.ndarray, bias: np.ndarray) -> "ModelGraph":
        weights = dict(self.weights)
        weights[f"{layer_id}.weight"] = weight.astype(np.float32)
        weights[f"{layer_id}.bias"] = bias.astype(np.float32)
        graph = self.copy_with(weights=weights)
        validate_graph(graph)
        return graph

    def is_identical(self, other: "ModelGraph") -> bool:
        """Exact equality of architecture, specs and every weight bit."""
        if (self.arch, self.input_shape, self.layers) != (other.arch, other.input_shape, other.layers):
            return False
        if self.weights.keys() != other.weights.keys():
            return False
        return all(
            self.weights[k].dtype == other.weights[k].dtype and np.array_equal(self.weights[k], other.weights[k])
            for k in self.weights
        )


# ============== BUILDING ==============

def preset_blueprint(widths: Sequence[int | str], num_classes: int = 10) -> list[LayerBlueprint]:
    """VGG-style blueprint: each width becomes conv3×3+ReLU, "M" a 2×2 max-pool."""
    blueprint: list[LayerBlueprint] = []
    for width in widths:
        if width == "M":
            blueprint.append(LayerBlueprint(kind=LayerKind.MAXPOOL, kernel=2, stride=2, pad=0))
        else:
            blueprint.append(LayerBlueprint(kind=LayerKind.CONV, width=int(width)))
            blueprint.append(LayerBlueprint(kind=LayerKind.RELU))
    blueprint.append(LayerBlueprint(kind=LayerKind.FLATTEN))
    blueprint.append(LayerBlueprint(kind=LayerKind.LINEAR, width=num_classes))
    return blueprint


def resolve_layers(blueprint: Sequence[LayerBlueprint], input_shape: tuple[int, int, int]) -> list[LayerSpec]:
    """Assign ids and propagate channel counts and spatial extents through the chain."""
    c, h, w = input_shape
    counters: dict[LayerKind, int] = defaultdict(int)
    specs: list[LayerSpec] = []
    try:
        for bp in blueprint:
            counters[bp.kind] += 1
            layer_id = _ID_PREFIX[bp.kind] if bp.kind == LayerKind.FLATTEN else f"{_ID_PREFIX[bp.kind]}{counters[bp.kind]}"
            match bp.kind:
                case LayerKind.CONV:
                    if bp.width is None:
                        raise GraphError(f"{layer_id} needs a width")
                    oh = conv_output_extent(h, bp.kernel, bp.stride, bp.pad)
                    ow = conv_output_extent(w, bp.kernel, bp.stride, bp.pad)
                    specs.append(LayerSpec(
                        id=layer_id, kind=bp.kind, c_in=c, c_out=bp.width,
                        kernel=(bp.kernel, bp.kernel), stride=bp.stride, pad=bp.pad,
                        in_hw=(h, w), out_hw=(oh, ow),
                    ))
                    c, h, w = bp.width, oh, ow
                case LayerKind.RELU:
                    specs.append(LayerSpec(id=layer_id, kind=bp.kind, c_in=c, c_out=c, in_hw=(h, w), out_hw=(h, w)))
                case LayerKind.MAXPOOL | LayerKind.AVGPOOL:
                    oh = conv_output_extent(h, bp.kernel, bp.kernel, 0)
                    ow = conv_output_extent(w, bp.kernel, bp.kernel, 0)
                    specs.append(LayerSpec(
                        id=layer_id, kind=bp.kind, c_in=c, c_out=c,
                        kernel=(bp.kernel, bp.kernel), stride=bp.kernel,
                        in_hw=(h, w), out_hw=(oh, ow),
                    ))
                    h, w = oh, ow
                case LayerKind.FLATTEN:
                    specs.append(LayerSpec(id=layer_id, kind=bp.kind, c_in=c, c_out=c * h * w, in_hw=(h, w)))
                    c, h, w = c * h * w, 1, 1
                case LayerKind.LINEAR:
                    if bp.width is None:
                        raise GraphError(f"{layer_id} needs a width")
                    if (h, w) != (1, 1):
                        raise GraphError(f"{layer_id} must follow a flatten layer")
                    specs.append(LayerSpec(id=layer_id, kind=bp.kind, c_in=c, c_out=bp.width))
                    c = bp.width
    except ShapeError as e:
        raise GraphError(f"blueprint does not fit input {input_shape}: {e}") from e
    return specs


def blueprint_from_layers(layers: Sequence[LayerSpec], widths: Optional[dict[str, int]] = None) -> list[LayerBlueprint]:
    """Recover a blueprint from resolved specs, optionally overriding conv widths."""
    widths = widths or {}
    blueprint: list[LayerBlueprint] = []
    for spec in layers:
        match spec.kind:
            case LayerKind.CONV:
                blueprint.append(LayerBlueprint(
                    kind=spec.kind, width=widths.get(spec.id, spec.c_out),
                    kernel=spec.kernel[0], stride=spec.stride, pad=spec.pad,
                ))
            case LayerKind.LINEAR:
                blueprint.append(LayerBlueprint(kind=spec.kind, width=spec.c_out))
            case LayerKind.MAXPOOL | LayerKind.AVGPOOL:
                blueprint.append(LayerBlueprint(kind=spec.kind, kernel=spec.kernel[0], stride=spec.stride, pad=0))
            case _:
                blueprint.append(LayerBlueprint(kind=spec.kind))
    return blueprint


def init_weights(layers: Sequence[LayerSpec], rng: np.random.Generator) -> dict[str, np.ndarray]:
    """Fan-in scaled uniform init: weights U(±sqrt(6/fan_in)), biases U(±1/sqrt(fan_in))."""
    weights: dict[str, np.ndarray] = {}
    for spec in layers:
        if not spec.parameterized:
            continue
        if spec.kind == LayerKind.CONV:
            shape = (spec.c_out, spec.c_in, *spec.kernel)
            fan_in = spec.c_in * spec.kernel[0] * spec.kernel[1]
        else:
            shape = (spec.c_out, spec.c_in)
            fan_in = spec.c_in
        bound = np.sqrt(6.0 / fan_in)
        weights[f"{spec.id}.weight"] = rng.uniform(-bound, bound, size=shape).astype(np.float32)
        bias_bound = 1.0 / np.sqrt(fan_in)
        weights[f"{spec.id}.bias"] = rng.uniform(-bias_bound, bias_bound, size=spec.c_out).astype(np.float32)
    return weights


def validate_graph(graph: ModelGraph) -> None:
    """Check chain consistency of specs and that every weight has the shape its spec implies."""
    c, h, w = graph.input_shape
    for spec in graph.layers:
        if spec.c_in != c or spec.in_hw != (h, w):
            raise GraphError(
                f"{spec.id} expects {spec.c_in}×{spec.in_hw}, predecessor produces {c}×{(h, w)}"
            )
        if spec.kind == LayerKind.CONV:
            expected = {"weight": (spec.c_out, spec.c_in, *spec.kernel), "bias": (spec.c_out,)}
        elif spec.kind == LayerKind.LINEAR:
            expected = {"weight": (spec.c_out, spec.c_in), "bias": (spec.c_out,)}
        else:
            expected = {}
        for name, shape in expected.items():
            actual = graph.weights.get(f"{spec.id}.{name}")
            if actual is None or actual.shape != shape:
                raise GraphError(
                    f"{spec.id}.{name} should have shape {shape}, got {None if actual is None else actual.shape}"
                )
        c, (h, w) = spec.c_out, spec.out_hw


def build_graph(
    arch: str,
    blueprint: Sequence[LayerBlueprint],
    input_shape: tuple[int, int, int],
    seed: int = 0,
) -> ModelGraph:
    layers = resolve_layers(blueprint, input_shape)
    weights = init_weights(layers, np.random.default_rng(seed))
    graph = ModelGraph(arch=arch, input_shape=tuple(input_shape), layers=layers, weights=weights)
    validate_graph(graph)
    return graph


def build_preset(
    name: ArchPreset | str,
    input_shape: tuple[int, int, int] = (3, 32, 32),
    seed: int = 0,
    num_classes: int = 10,
) -> ModelGraph:
    """
    Build a randomly initialized preset.

    tinyvgg6: six 3×3 convs (16-32-M-64-64-M-128-128-M) and a linear classifier.
    vgg16: the thirteen-conv configuration with a single 512→classes linear head
    and no batch normalization (14,719,818 parameters on 3×32×32).
    """
    try:
        preset = ArchPreset(name)
    except ValueError:
        raise UnknownPresetError(f"unknown architecture preset {name!r}; choose from {[p.value for p in ArchPreset]}")
    widths = TINYVGG6_WIDTHS if preset == ArchPreset.TINYVGG6 else VGG16_WIDTHS
    graph = build_graph(preset.value, preset_blueprint(widths, num_classes), input_shape, seed)
    logger.info(f"Built {preset} on {input_shape}: {graph.parameter_count()} parameters")
    return graph


# ============== FLOPS ==============

def _layer_flops(kind: LayerKind, kernel: tuple[int, int], c_in: int, c_out: int, out_hw: tuple[int, int]) -> int:
    # one multiply-accumulate counts as 2 FLOPS
    if kind == LayerKind.CONV:
        return 2 * kernel[0] * kernel[1] * c_in * c_out * out_hw[0] * out_hw[1]
    if kind == LayerKind.LINEAR:
        return 2 * c_in * c_out
    return 0


def count_flops(spec: LayerSpec) -> int:
    return _layer_flops(spec.kind, spec.kernel, spec.c_in, spec.c_out, spec.out_hw)


def flops_report(graph: ModelGraph, reference: Optional[ModelGraph] = None) -> FlopsReport:
    per_layer = {spec.id: count_flops(spec) for spec in graph.layers if spec.parameterized}
    total = sum(per_layer.values())
    ratio = 1.0
    if reference is not None:
        ratio = preserved_ratio(graph, reference)
    return FlopsReport(per_layer=per_layer, total=total, ratio=ratio)


def preserved_ratio(pruned: ModelGraph, original: ModelGraph) -> float:
    original_total = sum(count_flops(spec) for spec in original.layers)
    if original_total == 0:
        raise GraphError("reference graph has zero FLOPS")
    return sum(count_flops(spec) for spec in pruned.layers) / original_total


def flops_with_widths(graph: ModelGraph, widths: dict[str, int]) -> int:
    """Total FLOPS if the listed convs had the given output widths (input widths follow the chain)."""
    total = 0
    carry: Optional[int] = None
    for spec in graph.layers:
        c_in = spec.c_in if carry is None else carry
        match spec.kind:
            case LayerKind.CONV:
                c_out = widths.get(spec.id, spec.c_out)
                total += _layer_flops(spec.kind, spec.kernel, c_in, c_out, spec.out_hw)
                carry = c_out
            case LayerKind.LINEAR:
                total += _layer_flops(spec.kind, spec.kernel, c_in, spec.c_out, spec.out_hw)
                carry = spec.c_out
            case LayerKind.FLATTEN:
                carry = c_in * spec.in_hw[0] * spec.in_hw[1]
            case _:
                carry = c_in
    return total


# ============== CHANNEL REMOVAL ==============

def remove_output_channels(graph: ModelGraph, layer_id: str, kept: Sequence[int] | np.ndarray) -> ModelGraph:
    """
    Drop every filter of a conv not listed in `kept`.

    The next parameterized layer loses the matching input channels; for a linear
    layer after flatten that is the whole H'·W' block of columns per channel.
    """
    spec = graph.layer(layer_id)
    if spec.kind != LayerKind.CONV:
        raise GraphError(f"only convolution filters can be removed, {layer_id} is {spec.kind}")
    kept = np.asarray(kept, dtype=np.int64).reshape(-1)
    if kept.size == 0:
        raise GraphError(f"at least one filter per layer must be kept ({layer_id})")
    if kept.min() < 0 or kept.max() >= spec.c_out or np.any(np.diff(kept) <= 0):
        raise GraphError(f"kept indices for {layer_id} must be sorted, unique and within [0, {spec.c_out})")
    if kept.size == spec.c_out:
        return graph

    weights = dict(graph.weights)
    layers = list(graph.layers)
    start = graph.index(layer_id)
    weights[f"{layer_id}.weight"] = weights[f"{layer_id}.weight"][kept]
    weights[f"{layer_id}.bias"] = weights[f"{layer_id}.bias"][kept]
    layers[start] = spec.model_copy(update={"c_out": int(kept.size)})

    columns = kept
    width = int(kept.size)
    for i in range(start + 1, len(layers)):
        nxt = layers[i]
        if nxt.parameterized:
            weights[f"{nxt.id}.weight"] = weights[f"{nxt.id}.weight"][:, columns]
            layers[i] = nxt.model_copy(update={"c_in": width})
            break
        if nxt.kind == LayerKind.FLATTEN:
            area = nxt.in_hw[0] * nxt.in_hw[1]
            columns = (columns[:, None] * area + np.arange(area)).reshape(-1)
            layers[i] = nxt.model_copy(update={"c_in": width, "c_out": width * area})
            width *= area
        else:
            layers[i] = nxt.model_copy(update={"c_in": width, "c_out": width})

    pruned = graph.copy_with(layers=layers, weights=weights)
    validate_graph(pruned)
    return pruned
