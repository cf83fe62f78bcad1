"""Graph-rewrite passes that precompute constants and fuse layers.

All passes are pure graph-to-graph functions run on real-valued
parameters, before quantization; fusing after quantization would change
the quantization grid. Each returns the rewritten graph plus a
PassReport listing (removed layer names, absorbing layer name) per
rewrite, and is idempotent: a second application reports no rewrites.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

from .kernels import batch_norm_scale_shift, run_inference
from .model_ir import ModelGraph, Tensor, topo_order

# binary_tanh per-channel mode codes (shared with kernels execution)
MODE_GE = 0  # +1 iff x >= threshold
MODE_LE = 1  # +1 iff x <= threshold (negative batch-norm gain)
MODE_CONST_PLUS = 2
MODE_CONST_MINUS = 3


@dataclass(frozen=True)
class PassReport:
    pass_name: str
    rewrites: tuple  # ((removed names...), absorbing name)

    def __post_init__(self):
        object.__setattr__(
            self, "rewrites", tuple((tuple(r), a) for r, a in self.rewrites)
        )

    @property
    def empty(self) -> bool:
        return not self.rewrites

    def to_doc(self) -> dict:
        return {
            "pass": self.pass_name,
            "rewrites": [{"removed": list(r), "absorbed_into": a} for r, a in self.rewrites],
        }


def _real_params(node) -> bool:
    return all(not t.is_quantized() for t in node.params.values())


def fuse_batchnorm_into_dense(graph: ModelGraph):
    """Fold dense -> batch_norm into the dense layer's weights and bias.

    With scale s_i = gamma_i / sqrt(var_i + eps): W'_ij = s_i * W_ij and
    b'_i = s_i * (b_i - mean_i) + beta_i.
    """
    nodes = list(topo_order(graph))
    out, rewrites = [], []
    i = 0
    while i < len(nodes):
        node = nodes[i]
        nxt = nodes[i + 1] if i + 1 < len(nodes) else None
        if (
            node.kind == "dense"
            and nxt is not None
            and nxt.kind == "batch_norm"
            and _real_params(node)
            and _real_params(nxt)
        ):
            try:
                scale, shift = batch_norm_scale_shift(nxt.params)
            except ValueError as e:
                raise ValueError(f"cannot fuse {nxt.name!r} into {node.name!r}: {e}") from None
            weight, bias = node.param("weight"), node.param("bias")
            m, n = weight.shape
            new_w = tuple(
                scale[r] * weight.data[r * n + c] for r in range(m) for c in range(n)
            )
            new_b = tuple(scale[r] * bias.data[r] + shift[r] for r in range(m))
            out.append(node.with_params(
                weight=Tensor((m, n), new_w), bias=Tensor((m,), new_b)
            ))
            rewrites.append(((nxt.name,), node.name))
            i += 2
        else:
            out.append(node)
            i += 1
    report = PassReport("fuse_batchnorm_into_dense", tuple(rewrites))
    return (graph.replace_nodes(out) if rewrites else graph), report


def fuse_batchnorm_into_binary_tanh(graph: ModelGraph):
    """Replace batch_norm -> binary_tanh with per-channel thresholds.

    The threshold solves gamma_i*(t - mean_i)/sqrt(var_i + eps) + beta_i = 0;
    a negative gain flips the comparison direction, and a zero gain leaves
    the channel constant at sign(beta_i) (sign(0) = +1), the limit of the
    threshold formula.
    """
    nodes = list(topo_order(graph))
    out, rewrites = [], []
    i = 0
    while i < len(nodes):
        node = nodes[i]
        nxt = nodes[i + 1] if i + 1 < len(nodes) else None
        if (
            node.kind == "batch_norm"
            and nxt is not None
            and nxt.kind == "binary_tanh"
            and "threshold" not in nxt.params
            and _real_params(node)
        ):
            scale, shift = batch_norm_scale_shift(node.params)
            thresholds, modes = [], []
            for s, sh in zip(scale, shift):
                if s == 0.0:
                    thresholds.append(0.0)
                    modes.append(MODE_CONST_PLUS if sh >= 0 else MODE_CONST_MINUS)
                else:
                    thresholds.append(-sh / s)
                    modes.append(MODE_GE if s > 0 else MODE_LE)
            width = len(scale)
            out.append(nxt.with_params(
                threshold=Tensor((width,), tuple(thresholds)),
                mode=Tensor((width,), tuple(float(m) for m in modes)),
            ))
            rewrites.append(((node.name,), nxt.name))
            i += 2
        else:
            out.append(node)
            i += 1
    report = PassReport("fuse_batchnorm_into_binary_tanh", tuple(rewrites))
    return (graph.replace_nodes(out) if rewrites else graph), report


def constant_fold(graph: ModelGraph):
    """Precompute everything that depends only on constant parameters.

    Batch-norm parameter blocks collapse to per-channel (scale, shift).
    When the graph input itself is a constant, the whole chain is folded
    through the bit-accurate emulator and replaced by its computed output,
    so folding never changes emulation results.
    """
    nodes = list(topo_order(graph))
    rewrites = []

    folded_nodes = []
    for node in nodes:
        if node.kind == "batch_norm" and "scale" not in node.params and _real_params(node):
            scale, shift = batch_norm_scale_shift(node.params)
            width = len(scale)
            folded_nodes.append(replace(node, params={
                "scale": Tensor((width,), tuple(scale)),
                "shift": Tensor((width,), tuple(shift)),
            }))
            rewrites.append(((), node.name))
        else:
            folded_nodes.append(node)
    nodes = folded_nodes

    head = nodes[0]
    if head.kind == "input" and "value" in head.params and len(nodes) > 1:
        sub = graph.replace_nodes(nodes)
        output, _ = run_inference(sub)
        removed = tuple(n.name for n in nodes[1:])
        nodes = [head.with_params(value=output)]
        rewrites.append((removed, head.name))

    report = PassReport("constant_fold", tuple(rewrites))
    return (graph.replace_nodes(nodes) if rewrites else graph), report


def run_standard_passes(graph: ModelGraph):
    """The default pre-quantization pipeline, in its canonical order."""
    reports = []
    for pass_fn in (fuse_batchnorm_into_dense, fuse_batchnorm_into_binary_tanh, constant_fold):
        graph, report = pass_fn(graph)
        reports.append(report)
    return graph, reports
