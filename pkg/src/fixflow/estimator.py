"""Static cost model: DSP tiling, reuse-factor timing, LUT heuristic, BOPs.

The DSP tiling model reproduces the two known hard-block data points
(one 25x18 multiply per block, two blocks for 25x19) and degrades
plausibly in between; it is a model, not vendor truth. Multiplies whose
operands both fit under ``lut_threshold`` bits map to LUTs instead and
cost no DSPs.

Timing follows the reuse-factor contract: a dense layer with reuse
factor R has initiation interval R, latency R plus the accumulation-tree
depth plus a pipeline constant, layers run sequentially, and total
latency adds one interconnect cycle per layer boundary. The constants
are declared defaults, configurable and excluded from any calibration
claim. The LUT estimate is an explicitly uncalibrated heuristic.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

from .fixed_point import quantize
from .model_ir import ModelGraph, topo_order
from .pruning import compute_bops

DSP_PORT_WIDE = 25
DSP_PORT_NARROW = 18


@dataclass(frozen=True)
class EstimatorConfig:
    lut_threshold: int = 9
    pipeline_constant: int = 3
    interconnect_cycles: int = 1
    lut_per_mult_bit: float = 0.5
    lut_per_accum_bit: float = 4.0


DEFAULT_CONFIG = EstimatorConfig()


def dsp_per_multiply(b1: int, b2: int, lut_threshold: int = DEFAULT_CONFIG.lut_threshold) -> int:
    """DSP blocks for one b1 x b2 multiply; 0 when it maps to LUTs."""
    if b1 < 1 or b2 < 1:
        raise ValueError("bit widths must be >= 1")
    if max(b1, b2) <= lut_threshold:
        return 0
    straight = math.ceil(b1 / DSP_PORT_WIDE) * math.ceil(b2 / DSP_PORT_NARROW)
    swapped = math.ceil(b1 / DSP_PORT_NARROW) * math.ceil(b2 / DSP_PORT_WIDE)
    return min(straight, swapped)


@dataclass(frozen=True)
class LayerResource:
    layer: str
    n_mult: int
    multipliers: int
    dsp: int
    lut: int  # heuristic, uncalibrated
    bops: float


@dataclass(frozen=True)
class LayerTiming:
    layer: str
    ii_cycles: int
    latency_cycles: int


@dataclass(frozen=True)
class ResourceEstimate:
    per_layer: tuple
    dsp_total: int
    lut_estimate: int  # heuristic, uncalibrated
    bops_total: float


@dataclass(frozen=True)
class TimingEstimate:
    per_layer: tuple
    total_latency_cycles: int
    model_ii_cycles: int
    clock_mhz: float

    @property
    def throughput_inferences_per_second(self) -> float:
        if self.model_ii_cycles == 0:
            return 0.0
        return self.clock_mhz * 1e6 / self.model_ii_cycles


def cycles_to_seconds(cycles: int, clock_mhz: float) -> float:
    return cycles / (clock_mhz * 1e6)


def quantized_zero_fraction(node) -> float:
    """Fraction of weights that are zero on the layer's weight grid.

    Multiplications by zero weights are skipped in the generated kernels,
    so they allocate no hardware.
    """
    weight = node.param("weight")
    spec = node.precision.weight
    zeros = 0
    for v in weight.data:
        raw = v.raw if hasattr(v, "raw") else quantize(float(v), spec).raw
        zeros += raw == 0
    return zeros / weight.size


def _dense_rows(node, f_p, activation_bits, config):
    m, n = node.param("weight").shape
    n_mult = int(round((1.0 - f_p) * n * m))
    r = node.reuse_factor
    multipliers = math.ceil(n_mult / r) if n_mult else 0
    b_w = node.precision.weight.width_bits
    b_a = activation_bits
    per_mult = dsp_per_multiply(b_w, b_a, config.lut_threshold)
    lut_mults = multipliers if per_mult == 0 else 0
    lut = round(config.lut_per_mult_bit * lut_mults * b_w * b_a
                + config.lut_per_accum_bit * m * node.precision.accumulator.width_bits)
    resource = LayerResource(node.name, n_mult, multipliers, multipliers * per_mult,
                             lut, compute_bops(n, m, b_w, b_a, f_p))
    latency = r + math.ceil(math.log2(n)) if n > 1 else r
    timing = LayerTiming(node.name, r, latency + config.pipeline_constant)
    return resource, timing


def estimate_layer(node, f_p: float, clock_mhz: float = 200.0,
                   activation_bits: int = None, config: EstimatorConfig = DEFAULT_CONFIG):
    """(resource row, timing row) for one dense layer at pruned fraction f_p."""
    if node.kind != "dense":
        raise ValueError(f"estimate_layer expects a dense layer, got {node.kind!r}")
    if node.reuse_factor < 1:
        raise ValueError("reuse factor must be >= 1")
    if activation_bits is None:
        activation_bits = node.precision.result.width_bits
    return _dense_rows(node, f_p, activation_bits, config)


def estimate_model(graph: ModelGraph, state=None, clock_mhz: float = 200.0,
                   config: EstimatorConfig = DEFAULT_CONFIG, assume_dense: bool = False):
    """Roll up per-layer estimates over the chain.

    Dense pruned fractions come from prune-state masks when given,
    otherwise from the zero count of the quantized weights;
    ``assume_dense`` forces f_p = 0 everywhere (architecture studies).
    Batch norm scales count as one multiply per channel at reuse 1;
    activations cost one cycle; softmax and the input node are excluded
    from estimation.
    """
    resources, timings = [], []
    activation_bits = None
    for node in topo_order(graph):
        if node.kind == "input":
            activation_bits = node.precision.result.width_bits
        elif node.kind == "dense":
            if assume_dense:
                f_p = 0.0
            elif state is not None and node.name in state.masks:
                mask = state.masks[node.name]
                f_p = 1.0 - float(mask.sum()) / mask.size
            else:
                f_p = quantized_zero_fraction(node)
            res, tim = _dense_rows(node, f_p, activation_bits, config)
            resources.append(res)
            timings.append(tim)
            activation_bits = node.precision.result.width_bits
        elif node.kind == "batch_norm":
            m = graph.layer_widths()[node.name]
            b_w = node.precision.weight.width_bits
            per_mult = dsp_per_multiply(b_w, activation_bits, config.lut_threshold)
            lut_mults = m if per_mult == 0 else 0
            lut = round(config.lut_per_mult_bit * lut_mults * b_w * activation_bits
                        + config.lut_per_accum_bit * m * node.precision.accumulator.width_bits)
            resources.append(LayerResource(node.name, m, m, m * per_mult, lut, 0.0))
            timings.append(LayerTiming(node.name, 1, 1 + config.pipeline_constant))
            activation_bits = node.precision.result.width_bits
        elif node.kind in ("relu", "binary_tanh", "ternary_tanh"):
            timings.append(LayerTiming(node.name, 1, 1))
            activation_bits = node.precision.result.width_bits
        elif node.kind == "softmax":
            pass  # host-side, excluded from estimation
        else:
            raise ValueError(f"layer {node.name!r}: unsupported kind {node.kind!r}")

    total_latency = sum(t.latency_cycles for t in timings)
    if timings:
        total_latency += config.interconnect_cycles * (len(timings) - 1)
    resource = ResourceEstimate(
        per_layer=tuple(resources),
        dsp_total=sum(r.dsp for r in resources),
        lut_estimate=sum(r.lut for r in resources),
        bops_total=sum(r.bops for r in resources),
    )
    timing = TimingEstimate(
        per_layer=tuple(timings),
        total_latency_cycles=total_latency,
        model_ii_cycles=max((t.ii_cycles for t in timings), default=0),
        clock_mhz=clock_mhz,
    )
    return resource, timing


def reuse_sweep(graph: ModelGraph, reuse_factors, clock_mhz: float = 200.0,
                config: EstimatorConfig = DEFAULT_CONFIG, assume_dense: bool = False):
    """Estimate the model at each reuse factor applied to every dense layer.

    Returns rows of (R, model II, total latency, DSP total, total
    multiplications, throughput): the data behind a reuse-scan plot.
    """
    rows = []
    for r in reuse_factors:
        nodes = [
            replace(n, reuse_factor=r) if n.kind == "dense" else n
            for n in graph.nodes
        ]
        res, tim = estimate_model(graph.replace_nodes(nodes), None, clock_mhz, config,
                                  assume_dense)
        rows.append({
            "reuse_factor": r,
            "model_ii_cycles": tim.model_ii_cycles,
            "total_latency_cycles": tim.total_latency_cycles,
            "dsp_total": res.dsp_total,
            "n_mult_total": sum(row.n_mult for row in res.per_layer),
            "throughput_hz": tim.throughput_inferences_per_second,
        })
    return rows
