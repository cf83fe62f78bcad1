"""Dataflow graph IR for fully-connected networks.

The model document is UTF-8 JSON with top-level fields ``format_version``
(currently "1"), ``input_shape``, and ``layers``, an ordered array of::

    {"name": ..., "kind": ..., "params": {...},
     "precision"?: ..., "reuse_factor"?: int, "compression"?: bool}

Layer params are either a bare number (scalar tensor) or
``{"shape": [...], "data": [flat row-major numbers]}``. ``precision`` is
a single ``fixed<W,I[,u][,rnd][,sat]>`` string applied to all four slots,
or an object with per-slot strings (weight, bias, accumulator, result).
Layers form a chain in declaration order; graphs are immutable after
construction.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace

from .fixed_point import MAX_SPEC_WIDTH, FixedPointSpec, FixedPointValue

FORMAT_VERSION = "1"
DEFAULT_PRECISION = "fixed<16,6>"

LAYER_KINDS = ("input", "dense", "relu", "batch_norm", "binary_tanh", "ternary_tanh", "softmax")

BATCH_NORM_PARAMS = ("gamma", "beta", "moving_mean", "moving_variance", "epsilon")
# Constant-folded batch_norm form (see passes.constant_fold).
BATCH_NORM_FOLDED_PARAMS = ("scale", "shift")


class ParseError(ValueError):
    """Model document violates the schema; message names the offending path."""


class ValidationError(ValueError):
    """Graph invariant broken; message names the offending layer."""


class GraphCycleError(ValueError):
    pass


@dataclass(frozen=True)
class Tensor:
    """Flat row-major tensor; data holds floats or FixedPointValue."""

    shape: tuple
    data: tuple

    def __post_init__(self):
        if len(self.shape) == 0:
            raise ValueError("tensor shape must be non-empty")
        if any(int(d) != d or d <= 0 for d in self.shape):
            raise ValueError(f"tensor shape must be positive integers, got {self.shape}")
        if math.prod(self.shape) != len(self.data):
            raise ValueError(
                f"tensor data length {len(self.data)} does not match shape {self.shape}"
            )
        object.__setattr__(self, "shape", tuple(int(d) for d in self.shape))
        object.__setattr__(self, "data", tuple(self.data))

    @property
    def size(self) -> int:
        return len(self.data)

    def at(self, i: int, j: int):
        """Element (i, j) of a 2-D tensor."""
        return self.data[i * self.shape[1] + j]

    def is_quantized(self) -> bool:
        return len(self.data) > 0 and isinstance(self.data[0], FixedPointValue)

    def to_numpy(self):
        import numpy as np

        return np.array(self.data, dtype=np.float64).reshape(self.shape)

    @classmethod
    def from_numpy(cls, arr) -> "Tensor":
        import numpy as np

        a = np.asarray(arr, dtype=np.float64)
        return cls(a.shape if a.ndim else (1,), tuple(float(v) for v in a.reshape(-1)))

    @classmethod
    def scalar(cls, value: float) -> "Tensor":
        return cls((1,), (float(value),))


@dataclass(frozen=True)
class PrecisionSet:
    """Fixed-point specs for the four per-layer slots."""

    weight: FixedPointSpec
    bias: FixedPointSpec
    accumulator: FixedPointSpec
    result: FixedPointSpec

    SLOTS = ("weight", "bias", "accumulator", "result")

    @classmethod
    def uniform(cls, spec_text: str = DEFAULT_PRECISION) -> "PrecisionSet":
        spec = FixedPointSpec.from_string(spec_text)
        return cls(spec, spec, spec, spec)

    @classmethod
    def from_doc(cls, doc, path: str) -> "PrecisionSet":
        if isinstance(doc, str):
            try:
                return cls.uniform(doc)
            except ValueError as e:
                raise ParseError(f"{path}: {e}") from None
        if isinstance(doc, dict):
            specs = {}
            for slot in cls.SLOTS:
                text = doc.get(slot, DEFAULT_PRECISION)
                try:
                    specs[slot] = FixedPointSpec.from_string(text)
                except ValueError as e:
                    raise ParseError(f"{path}.{slot}: {e}") from None
            for key in doc:
                if key not in cls.SLOTS:
                    raise ParseError(f"{path}.{key}: unknown precision slot")
            return cls(**specs)
        raise ParseError(f"{path}: precision must be a string or object")

    def to_doc(self) -> dict:
        return {slot: getattr(self, slot).to_string() for slot in self.SLOTS}


@dataclass(frozen=True)
class LayerNode:
    name: str
    kind: str
    params: dict = field(default_factory=dict)
    precision: PrecisionSet = field(default_factory=PrecisionSet.uniform)
    reuse_factor: int = 1
    compression: bool = False

    def param(self, key: str) -> Tensor:
        return self.params[key]

    def with_params(self, **updates) -> "LayerNode":
        merged = dict(self.params)
        merged.update(updates)
        return replace(self, params=merged)


@dataclass(frozen=True)
class Diagnostic:
    layer: str
    rule: str
    message: str

    def __str__(self) -> str:
        return f"[{self.layer}] {self.rule}: {self.message}"


@dataclass(frozen=True)
class ModelGraph:
    """Chain of layers; first node has kind ``input``."""

    nodes: tuple
    edges: dict  # successor map, name -> tuple of names
    input_shape: tuple

    def __post_init__(self):
        object.__setattr__(self, "nodes", tuple(self.nodes))
        object.__setattr__(self, "input_shape", tuple(int(d) for d in self.input_shape))
        object.__setattr__(
            self, "edges", {k: tuple(v) for k, v in self.edges.items()}
        )

    @classmethod
    def chain(cls, nodes, input_shape) -> "ModelGraph":
        """Wire nodes linearly in the given order."""
        nodes = tuple(nodes)
        edges = {}
        for i, node in enumerate(nodes):
            edges[node.name] = (nodes[i + 1].name,) if i + 1 < len(nodes) else ()
        return cls(nodes, edges, tuple(input_shape))

    def node(self, name: str) -> LayerNode:
        for n in self.nodes:
            if n.name == name:
                return n
        raise KeyError(name)

    def predecessors(self, name: str) -> tuple:
        return tuple(n.name for n in self.nodes if name in self.edges.get(n.name, ()))

    def successors(self, name: str) -> tuple:
        return self.edges.get(name, ())

    @property
    def input_width(self) -> int:
        return math.prod(self.input_shape)

    def layer_widths(self) -> dict:
        """Output width of every node, walking the chain."""
        widths = {}
        for node in topo_order(self):
            preds = self.predecessors(node.name)
            in_width = widths[preds[0]] if preds else self.input_width
            if node.kind == "dense":
                widths[node.name] = node.param("weight").shape[0]
            else:
                widths[node.name] = in_width
        return widths

    @property
    def output_width(self) -> int:
        order = topo_order(self)
        return self.layer_widths()[order[-1].name]

    def replace_nodes(self, nodes) -> "ModelGraph":
        """New chain graph with the given node sequence (used by passes)."""
        return ModelGraph.chain(nodes, self.input_shape)


def topo_order(graph: ModelGraph):
    """Topological order, stable by declaration order; cycle raises."""
    index = {n.name: i for i, n in enumerate(graph.nodes)}
    indegree = {n.name: 0 for n in graph.nodes}
    for src, dsts in graph.edges.items():
        for dst in dsts:
            if dst not in indegree:
                raise ValidationError(f"[{src}] edge targets unknown node {dst!r}")
            indegree[dst] += 1
    ready = sorted((name for name, deg in indegree.items() if deg == 0), key=index.get)
    order = []
    while ready:
        name = ready.pop(0)
        order.append(graph.node(name))
        for dst in graph.edges.get(name, ()):
            indegree[dst] -= 1
            if indegree[dst] == 0:
                # Insertion keeps the ready list sorted by declaration order.
                pos = 0
                while pos < len(ready) and index[ready[pos]] < index[dst]:
                    pos += 1
                ready.insert(pos, dst)
    if len(order) != len(graph.nodes):
        stuck = [n.name for n in graph.nodes if indegree[n.name] > 0]
        raise GraphCycleError(f"graph contains a cycle through {stuck}")
    return order


def _expect(cond: bool, path: str, message: str):
    if not cond:
        raise ParseError(f"{path}: {message}")


def _parse_tensor(doc, path: str) -> Tensor:
    if isinstance(doc, (int, float)) and not isinstance(doc, bool):
        return Tensor.scalar(float(doc))
    _expect(isinstance(doc, dict), path, "param must be a number or {shape, data} object")
    _expect("shape" in doc and "data" in doc, path, "param object needs shape and data")
    shape, data = doc["shape"], doc["data"]
    _expect(isinstance(shape, list) and shape, path, "shape must be a non-empty array")
    _expect(all(isinstance(d, int) and d > 0 for d in shape), path, "shape entries must be positive integers")
    _expect(isinstance(data, list), path, "data must be an array")
    _expect(
        all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in data),
        path, "data entries must be numbers",
    )
    try:
        return Tensor(tuple(shape), tuple(float(v) for v in data))
    except ValueError as e:
        raise ParseError(f"{path}: {e}") from None


def parse_model(text: str) -> ModelGraph:
    """Parse and validate a model document; applies per-layer defaults."""
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise ParseError(f"$: not valid JSON ({e})") from None
    _expect(isinstance(doc, dict), "$", "document must be an object")
    _expect(doc.get("format_version") == FORMAT_VERSION, "$.format_version",
            f"expected {FORMAT_VERSION!r}, got {doc.get('format_version')!r}")
    shape = doc.get("input_shape")
    _expect(isinstance(shape, list) and shape, "$.input_shape", "must be a non-empty array")
    _expect(all(isinstance(d, int) and d > 0 for d in shape),
            "$.input_shape", "entries must be positive integers")
    layers_doc = doc.get("layers")
    _expect(isinstance(layers_doc, list) and layers_doc, "$.layers", "must be a non-empty array")

    nodes = []
    for i, layer_doc in enumerate(layers_doc):
        path = f"$.layers[{i}]"
        _expect(isinstance(layer_doc, dict), path, "layer must be an object")
        name = layer_doc.get("name")
        _expect(isinstance(name, str) and name, f"{path}.name", "must be a non-empty string")
        kind = layer_doc.get("kind")
        _expect(kind in LAYER_KINDS, f"{path}.kind", f"must be one of {LAYER_KINDS}")
        params_doc = layer_doc.get("params", {})
        _expect(isinstance(params_doc, dict), f"{path}.params", "must be an object")
        params = {
            key: _parse_tensor(val, f"{path}.params.{key}") for key, val in params_doc.items()
        }
        precision = PrecisionSet.from_doc(
            layer_doc.get("precision", DEFAULT_PRECISION), f"{path}.precision"
        )
        reuse = layer_doc.get("reuse_factor", 1)
        _expect(isinstance(reuse, int) and not isinstance(reuse, bool),
                f"{path}.reuse_factor", "must be an integer")
        compression = layer_doc.get("compression", False)
        _expect(isinstance(compression, bool), f"{path}.compression", "must be a boolean")
        for key in layer_doc:
            if key not in ("name", "kind", "params", "precision", "reuse_factor", "compression"):
                raise ParseError(f"{path}.{key}: unknown field")
        if any(n.name == name for n in nodes):
            raise ParseError(f"{path}.name: duplicate layer name {name!r}")
        nodes.append(LayerNode(name, kind, params, precision, reuse, compression))

    if not any(n.kind == "input" for n in nodes):
        # Implicit input node keeps hand-written documents short.
        auto_name = "input" if all(n.name != "input" for n in nodes) else "_input"
        nodes.insert(0, LayerNode(auto_name, "input"))
    graph = ModelGraph.chain(nodes, tuple(shape))
    problems = validate(graph)
    if problems:
        raise ValidationError("; ".join(str(p) for p in problems))
    return graph


def _shape_of(node: LayerNode, key: str):
    t = node.params.get(key)
    return None if t is None else t.shape


def _check_layer(node: LayerNode, in_width: int, diags: list):
    def bad(rule, message):
        diags.append(Diagnostic(node.name, rule, message))

    if node.kind not in LAYER_KINDS:
        bad("kind", f"unknown kind {node.kind!r}")
        return
    if node.reuse_factor < 1:
        bad("reuse_factor", f"must be >= 1, got {node.reuse_factor}")
    if node.kind != "dense":
        if node.compression:
            bad("compression", "compression is only valid on dense layers")
        if node.reuse_factor != 1:
            bad("reuse_factor", "reuse_factor is only configurable on dense layers")
    for slot in PrecisionSet.SLOTS:
        spec = getattr(node.precision, slot)
        if spec.width_bits > MAX_SPEC_WIDTH:
            bad("precision", f"{slot} width {spec.width_bits} exceeds {MAX_SPEC_WIDTH}")

    if node.kind == "input":
        value = node.params.get("value")
        if value is not None and value.size != in_width:
            bad("shape", f"constant value has {value.size} elements, input width is {in_width}")
        for key in node.params:
            if key != "value":
                bad("params", f"unexpected param {key!r} on input layer")
    elif node.kind == "dense":
        w = _shape_of(node, "weight")
        if w is None:
            bad("params", "dense layer missing weight")
        elif len(w) != 2:
            bad("shape", f"dense weight must be 2-D, got shape {list(w)}")
        elif w[1] != in_width:
            bad("shape", f"weight expects {w[1]} inputs but predecessor provides {in_width}")
        b = _shape_of(node, "bias")
        if b is None:
            bad("params", "dense layer missing bias")
        elif w is not None and len(w) == 2 and b != (w[0],):
            bad("shape", f"bias shape {list(b)} does not match {w[0]} outputs")
    elif node.kind == "batch_norm":
        folded = all(k in node.params for k in BATCH_NORM_FOLDED_PARAMS)
        keys = BATCH_NORM_FOLDED_PARAMS if folded else BATCH_NORM_PARAMS
        for key in keys:
            t = node.params.get(key)
            if t is None:
                bad("params", f"batch_norm missing {key}")
            elif key == "epsilon":
                if t.shape != (1,):
                    bad("shape", "epsilon must be a scalar")
            elif t.size != in_width:
                bad("shape", f"{key} has {t.size} channels, expected {in_width}")
    elif node.kind in ("binary_tanh", "ternary_tanh"):
        for key in ("threshold", "mode"):
            t = node.params.get(key)
            if t is not None and t.size != in_width:
                bad("shape", f"{key} has {t.size} channels, expected {in_width}")


def validate(graph: ModelGraph):
    """All invariant violations as diagnostics; empty list means valid."""
    diags = []
    seen = set()
    for node in graph.nodes:
        if node.name in seen:
            diags.append(Diagnostic(node.name, "names", "duplicate layer name"))
        seen.add(node.name)

    try:
        order = topo_order(graph)
    except GraphCycleError as e:
        return diags + [Diagnostic("<graph>", "cycle", str(e))]
    except ValidationError as e:
        return diags + [Diagnostic("<graph>", "edges", str(e))]

    inputs = [n for n in graph.nodes if n.kind == "input"]
    if len(inputs) != 1:
        diags.append(Diagnostic("<graph>", "structure", f"expected exactly one input node, found {len(inputs)}"))
    for node in graph.nodes:
        preds = graph.predecessors(node.name)
        succs = graph.successors(node.name)
        if node.kind == "input" and preds:
            diags.append(Diagnostic(node.name, "structure", "input node has a predecessor"))
        if node.kind != "input" and len(preds) != 1:
            diags.append(Diagnostic(node.name, "structure", f"chain node must have one predecessor, has {len(preds)}"))
        if len(succs) > 1:
            diags.append(Diagnostic(node.name, "structure", "chain node has multiple successors"))
    if diags:
        return diags

    widths = {}
    for node in order:
        preds = graph.predecessors(node.name)
        in_width = widths[preds[0]] if preds else graph.input_width
        _check_layer(node, in_width, diags)
        w = _shape_of(node, "weight")
        widths[node.name] = w[0] if node.kind == "dense" and w and len(w) == 2 else in_width
    return diags


def _tensor_doc(t: Tensor):
    if t.shape == (1,) and not t.is_quantized():
        return t.data[0]
    # Quantized values serialize as their exact decimal reals.
    data = [v.to_float() if isinstance(v, FixedPointValue) else float(v) for v in t.data]
    return {"shape": list(t.shape), "data": data}


def serialize_model(graph: ModelGraph) -> str:
    """Canonical document text; parse -> serialize -> parse is the identity."""
    layers = []
    for node in topo_order(graph):
        layers.append({
            "name": node.name,
            "kind": node.kind,
            "params": {k: _tensor_doc(v) for k, v in sorted(node.params.items())},
            "precision": node.precision.to_doc(),
            "reuse_factor": node.reuse_factor,
            "compression": node.compression,
        })
    doc = {
        "format_version": FORMAT_VERSION,
        "input_shape": list(graph.input_shape),
        "layers": layers,
    }
    return json.dumps(doc, indent=2) + "\n"
