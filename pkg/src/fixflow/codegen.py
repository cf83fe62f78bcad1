"""Backend writer emitting a self-contained HLS-style C++ project.

The emitted kernels mirror the emulator's frozen cast-point and
accumulation-order conventions exactly, and weights are emitted as raw
integer literals on the same quantization grid, so a compiled project
bit-matches the emulator. Arithmetic rides on a generated minimal
fixed-point header (128-bit intermediates) instead of any vendor type,
which keeps the compile-and-compare test toolchain-portable.

A trailing softmax layer is evaluated host-side (it is monotone, so the
classification argmax is unchanged); the firmware ends at the last
fixed-point layer, and the testbench exchanges raw integer vectors, one
whitespace-separated vector per line.

``ProjectWriter`` is the multi-backend seam; ``HlsCppWriter`` is the one
implementation that ships. Generation is pure and deterministic given
(graph, config, tool version); only the manifest carries a timestamp.
Writing files to disk is the caller's concern.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass
from datetime import datetime, timezone

from . import __version__
from .fixed_point import ROUND_HALF_UP, SATURATE, FixedPointSpec, quantize
from .kernels import materialize_quantized, ternary_half_raw, threshold_raws
from .model_ir import ModelGraph, serialize_model, topo_order

TOOL_VERSION = __version__

# Left-shift headroom available in the generated 128-bit intermediates.
_WIDE_BITS = 127


class CodegenError(ValueError):
    pass


@dataclass(frozen=True)
class CodegenConfig:
    project_name: str = "model"


@dataclass(frozen=True)
class ProjectTree:
    """Generated files plus a manifest; only the manifest carries a timestamp."""

    files: tuple  # ((relative path, text), ...)
    manifest: dict

    def __post_init__(self):
        paths = [p for p, _ in self.files]
        if len(set(paths)) != len(paths):
            raise ValueError("duplicate paths in project tree")
        object.__setattr__(self, "files", tuple(self.files))

    def file(self, path: str) -> str:
        for p, text in self.files:
            if p == path:
                return text
        raise KeyError(path)

    def write_to(self, out_dir):
        import os

        manifest_text = json.dumps(self.manifest, indent=2) + "\n"
        for path, text in self.files + (("manifest.json", manifest_text),):
            full = os.path.join(out_dir, path)
            os.makedirs(os.path.dirname(full) or out_dir, exist_ok=True)
            with open(full, "w") as fh:
                fh.write(text)
            if path.endswith(".sh"):
                os.chmod(full, 0o755)


FIXED_OPS_HEADER = """\
#pragma once
// Minimal exact fixed-point raw-integer operations.
// Semantics: truncate rounds toward negative infinity, round-half-up adds
// half a unit then floors; wrap reduces modulo 2^width in two's complement,
// saturate clamps. 128-bit intermediates hold every exact product.

typedef __int128 ff_wide_t;

static inline ff_wide_t ff_shift_round(ff_wide_t v, int shift, int round_half_up) {
    if (shift >= 0) return v << shift;
    int s = -shift;
    if (round_half_up) return (v + (((ff_wide_t)1) << (s - 1))) >> s;
    return v >> s;  // arithmetic shift floors
}

static inline ff_wide_t ff_overflow(ff_wide_t v, int width, int is_signed, int saturate) {
    ff_wide_t max_raw = is_signed ? ((((ff_wide_t)1) << (width - 1)) - 1)
                                  : ((((ff_wide_t)1) << width) - 1);
    ff_wide_t min_raw = is_signed ? -(((ff_wide_t)1) << (width - 1)) : (ff_wide_t)0;
    if (v >= min_raw && v <= max_raw) return v;
    if (saturate) return v > max_raw ? max_raw : min_raw;
    ff_wide_t wrapped = v & ((((ff_wide_t)1) << width) - 1);
    if (is_signed && wrapped > max_raw) wrapped -= ((ff_wide_t)1) << width;
    return wrapped;
}

static inline ff_wide_t ff_cast(ff_wide_t raw, int from_frac, int to_frac, int round_half_up,
                                int width, int is_signed, int saturate) {
    return ff_overflow(ff_shift_round(raw, to_frac - from_frac, round_half_up),
                       width, is_signed, saturate);
}
"""

TESTBENCH = """\
// Generated testbench: one whitespace-separated raw-integer vector per line.
// Inputs are raws on the model's input grid; outputs are the final
// fixed-point layer's raws in the same exchange format.
#include <cstdio>
#include "{name}.h"

int main(int argc, char **argv) {{
    if (argc != 3) {{
        std::fprintf(stderr, "usage: %s <input.txt> <output.txt>\\n", argv[0]);
        return 2;
    }}
    std::FILE *in = std::fopen(argv[1], "r");
    if (!in) {{ std::fprintf(stderr, "cannot open %s\\n", argv[1]); return 1; }}
    std::FILE *out = std::fopen(argv[2], "w");
    if (!out) {{ std::fprintf(stderr, "cannot open %s\\n", argv[2]); return 1; }}

    long long x[FF_INPUT_WIDTH];
    long long y[FF_OUTPUT_WIDTH];
    for (;;) {{
        int got = 0;
        for (; got < FF_INPUT_WIDTH; ++got) {{
            if (std::fscanf(in, "%lld", &x[got]) != 1) break;
        }}
        if (got == 0) break;
        if (got != FF_INPUT_WIDTH) {{
            std::fprintf(stderr, "truncated input vector (%d of %d values)\\n",
                         got, FF_INPUT_WIDTH);
            return 1;
        }}
        {name}_forward(x, y);
        for (int i = 0; i < FF_OUTPUT_WIDTH; ++i)
            std::fprintf(out, i + 1 == FF_OUTPUT_WIDTH ? "%lld\\n" : "%lld ", y[i]);
    }}
    std::fclose(in);
    std::fclose(out);
    return 0;
}}
"""

BUILD_SH = """\
#!/bin/sh
# Build the generated testbench; needs a C++17 compiler with __int128.
set -e
cd "$(dirname "$0")"
mkdir -p build
${{CXX:-g++}} -O2 -std=c++17 -I firmware -o build/testbench \\
    firmware/{name}.cpp tb/testbench.cpp
echo "built build/testbench"
"""


def _spec_comment(spec: FixedPointSpec) -> str:
    return f"{spec.to_string()}  value = raw * 2^-{spec.fraction_bits}"


def _cast_args(from_frac: int, spec: FixedPointSpec) -> str:
    return (f"{from_frac}, {spec.fraction_bits}, {int(spec.rounding == ROUND_HALF_UP)}, "
            f"{spec.width_bits}, {int(spec.signed)}, {int(spec.overflow == SATURATE)}")


def _overflow_args(spec: FixedPointSpec) -> str:
    return f"{spec.width_bits}, {int(spec.signed)}, {int(spec.overflow == SATURATE)}"


def _check_widths(layer: str, in_spec, weight_spec, bias_spec, acc_spec, result_spec):
    for spec in (in_spec, weight_spec, bias_spec, acc_spec, result_spec):
        # Raw values are stored in long long.
        if not spec.signed and spec.width_bits > 63:
            raise CodegenError(
                f"layer {layer!r}: unsigned width {spec.width_bits} does not fit the "
                "generated 64-bit storage"
            )
    product_bits = weight_spec.width_bits + in_spec.width_bits
    shift_up = max(0, acc_spec.fraction_bits - (weight_spec.fraction_bits + in_spec.fraction_bits))
    if product_bits + shift_up > _WIDE_BITS:
        raise CodegenError(
            f"layer {layer!r}: intermediate needs {product_bits + shift_up} bits, "
            f"generated arithmetic supports {_WIDE_BITS}"
        )


def _literal_rows(values, per_row=12):
    if not values:
        return ""
    rows = []
    for start in range(0, len(values), per_row):
        rows.append(", ".join(str(int(v)) for v in values[start:start + per_row]))
    return "    " + ",\n    ".join(rows)


def _array(name: str, values) -> list:
    return [f"static const long long {name}[] = {{", _literal_rows(values), "};"]


def _weight_header(index: int, title: str, comments: list, arrays: list) -> str:
    guard = f"FF_W{index}_H"
    lines = [f"#ifndef {guard}", f"#define {guard}", f"// {title}"]
    lines += [f"// {c}" for c in comments]
    lines.append("")
    for name, values in arrays:
        lines += _array(name, values)
    lines += ["", f"#endif  // {guard}", ""]
    return "\n".join(lines)


def _plan(graph: ModelGraph):
    """(kind, node, incoming spec) per layer, mirroring the emulator walk."""
    order = topo_order(graph)
    plan = []
    in_spec = None
    for pos, node in enumerate(order):
        if node.kind == "softmax" and pos != len(order) - 1:
            raise CodegenError(f"layer {node.name!r}: softmax is only supported as the final layer")
        if node.kind not in ("input", "dense", "batch_norm", "relu",
                             "binary_tanh", "ternary_tanh", "softmax"):
            raise CodegenError(f"layer {node.name!r}: unsupported kind {node.kind!r}")
        plan.append((node.kind, node, in_spec))
        in_spec = node.precision.result
    return plan


def _emit_dense(node, in_spec, index):
    weight, bias = node.param("weight"), node.param("bias")
    m, n = weight.shape
    wspec, bspec = node.precision.weight, node.precision.bias
    acc, res = node.precision.accumulator, node.precision.result
    _check_widths(node.name, in_spec, wspec, bspec, acc, res)
    w_raws = [v.raw for v in weight.data]
    b_raws = [v.raw for v in bias.data]
    nz = sum(1 for r in w_raws if r != 0)
    prod_frac = wspec.fraction_bits + in_spec.fraction_bits
    comments = [
        f"weight {_spec_comment(wspec)}",
        f"bias   {_spec_comment(bspec)}",
        f"nonzero weights: {nz} of {m * n}",
    ]
    kernel = [
        f"// {node.name}: dense {n} -> {m}",
        f"// reuse_factor={node.reuse_factor}"
        f"  (#pragma HLS PIPELINE II={node.reuse_factor};"
        f" {math.ceil(nz / node.reuse_factor) if nz else 0} multipliers)",
    ]
    if node.compression:
        entries = [(i, raw) for i, raw in enumerate(w_raws) if raw != 0]
        index_bits = max(0, math.ceil(math.log2(m * n)))
        comments.append(
            f"COO records: packed index = out * {n} + in ({index_bits} index bits)"
        )
        arrays = [
            (f"coo_index_{index}", [i for i, _ in entries]),
            (f"coo_weight_{index}", [raw for _, raw in entries]),
            (f"bias_{index}", b_raws),
        ]
        kernel += [
            "// compression=true: coordinate-list sparse kernel",
            f"static void {node.name}_kernel(const long long x[{n}], long long y[{m}]) {{",
            f"    ff_wide_t acc[{m}];",
            f"    for (int i = 0; i < {m}; ++i)",
            f"        acc[i] = ff_cast((ff_wide_t)bias_{index}[i], {_cast_args(bspec.fraction_bits, acc)});",
            f"    for (int e = 0; e < {len(entries)}; ++e) {{",
            f"        int i = (int)(coo_index_{index}[e] / {n});",
            f"        int j = (int)(coo_index_{index}[e] % {n});",
            f"        ff_wide_t p = (ff_wide_t)coo_weight_{index}[e] * (ff_wide_t)x[j];",
            f"        acc[i] = ff_overflow(acc[i] + ff_cast(p, {_cast_args(prod_frac, acc)}), {_overflow_args(acc)});",
            "    }",
            f"    for (int i = 0; i < {m}; ++i)",
            f"        y[i] = (long long)ff_cast(acc[i], {_cast_args(acc.fraction_bits, res)});",
            "}",
        ]
    else:
        arrays = [(f"weight_{index}", w_raws), (f"bias_{index}", b_raws)]
        kernel += [
            f"static void {node.name}_kernel(const long long x[{n}], long long y[{m}]) {{",
            f"    for (int i = 0; i < {m}; ++i) {{",
            f"        ff_wide_t acc = ff_cast((ff_wide_t)bias_{index}[i], {_cast_args(bspec.fraction_bits, acc)});",
            f"        for (int j = 0; j < {n}; ++j) {{",
            f"            if (weight_{index}[i * {n} + j] == 0) continue;  // zero weights skipped",
            f"            ff_wide_t p = (ff_wide_t)weight_{index}[i * {n} + j] * (ff_wide_t)x[j];",
            f"            acc = ff_overflow(acc + ff_cast(p, {_cast_args(prod_frac, acc)}), {_overflow_args(acc)});",
            "        }",
            f"        y[i] = (long long)ff_cast(acc, {_cast_args(acc.fraction_bits, res)});",
            "    }",
            "}",
        ]
    header = _weight_header(index, f"layer {node.name}: dense {n} -> {m}", comments, arrays)
    return header, kernel, m


def _emit_batch_norm(node, in_spec, index, width):
    scale, shift = node.param("scale"), node.param("shift")
    wspec, bspec = node.precision.weight, node.precision.bias
    acc, res = node.precision.accumulator, node.precision.result
    _check_widths(node.name, in_spec, wspec, bspec, acc, res)
    prod_frac = wspec.fraction_bits + in_spec.fraction_bits
    header = _weight_header(
        index,
        f"layer {node.name}: batch_norm over {width} channels (folded scale/shift)",
        [f"scale {_spec_comment(wspec)}", f"shift {_spec_comment(bspec)}"],
        [(f"scale_{index}", [v.raw for v in scale.data]),
         (f"shift_{index}", [v.raw for v in shift.data])],
    )
    kernel = [
        f"// {node.name}: batch_norm, one multiply per channel",
        f"static void {node.name}_kernel(const long long x[{width}], long long y[{width}]) {{",
        f"    for (int i = 0; i < {width}; ++i) {{",
        f"        ff_wide_t acc = ff_cast((ff_wide_t)shift_{index}[i], {_cast_args(bspec.fraction_bits, acc)});",
        f"        ff_wide_t p = (ff_wide_t)scale_{index}[i] * (ff_wide_t)x[i];",
        f"        acc = ff_overflow(acc + ff_cast(p, {_cast_args(prod_frac, acc)}), {_overflow_args(acc)});",
        f"        y[i] = (long long)ff_cast(acc, {_cast_args(acc.fraction_bits, res)});",
        "    }",
        "}",
    ]
    return header, kernel


def _emit_relu(node, in_spec, width):
    res = node.precision.result
    return [
        f"// {node.name}: relu, max(0, x) exact in fixed point",
        f"static void {node.name}_kernel(const long long x[{width}], long long y[{width}]) {{",
        f"    for (int i = 0; i < {width}; ++i)",
        f"        y[i] = (long long)ff_cast(x[i] < 0 ? (ff_wide_t)0 : (ff_wide_t)x[i], "
        f"{_cast_args(in_spec.fraction_bits, res)});",
        "}",
    ]


def _emit_sign_activation(node, in_spec, index, width, ternary: bool):
    res = node.precision.result
    traws, modes = threshold_raws(node, width, in_spec)
    plus = quantize(1.0, res).raw
    minus = quantize(-1.0, res).raw
    header = _weight_header(
        index,
        f"layer {node.name}: {node.kind} thresholds on the incoming grid",
        [f"threshold {_spec_comment(in_spec)}",
         "mode: 0 = +1 iff x >= t, 1 = +1 iff x <= t, 2/3 = constant +1/-1"],
        [(f"threshold_{index}", traws), (f"mode_{index}", modes)],
    )
    lines = [
        f"// {node.name}: {node.kind} (XNOR-friendly +/-1 encoding in {res.to_string()})",
        f"static void {node.name}_kernel(const long long x[{width}], long long y[{width}]) {{",
        f"    for (int i = 0; i < {width}; ++i) {{",
        f"        int mode = (int)mode_{index}[i];",
        f"        if (mode == 2) {{ y[i] = {plus}; continue; }}",
        f"        if (mode == 3) {{ y[i] = {minus}; continue; }}",
    ]
    if ternary:
        zero = quantize(0.0, res).raw
        half = ternary_half_raw(in_spec)
        lines += [
            f"        ff_wide_t d = (ff_wide_t)x[i] - (ff_wide_t)threshold_{index}[i];",
            "        if (mode == 1) d = -d;",
            f"        y[i] = d >= {half} ? {plus}LL : (d <= -({half}) ? {minus}LL : {zero}LL);",
        ]
    else:
        lines += [
            f"        int hot = mode == 1 ? (x[i] <= threshold_{index}[i]) : (x[i] >= threshold_{index}[i]);",
            f"        y[i] = hot ? {plus}LL : {minus}LL;",
        ]
    lines += ["    }", "}"]
    return header, lines


def emit_project(graph: ModelGraph, config: CodegenConfig = CodegenConfig()) -> ProjectTree:
    """Emit the full project tree for a validated, pass-optimized graph."""
    source_hash = hashlib.sha256(serialize_model(graph).encode()).hexdigest()
    graph = materialize_quantized(graph)
    plan = _plan(graph)
    name = config.project_name

    widths = graph.layer_widths()
    kernels, headers, stages = [], [], []
    header_paths = []
    weight_index = 0
    notes = []
    input_spec = None
    for kind, node, in_spec in plan:
        width = widths[node.name]
        if kind == "input":
            input_spec = node.precision.result
            if "value" in node.params:
                notes.append(f"input {node.name!r} carries a constant value; testbench inputs override it")
            continue
        if kind == "softmax":
            notes.append("trailing softmax is evaluated host-side; firmware emits the logits")
            continue
        if kind == "dense":
            header, kernel, _ = _emit_dense(node, in_spec, weight_index)
            headers.append((f"firmware/weights/w{weight_index}.h", header))
            header_paths.append(f"weights/w{weight_index}.h")
            weight_index += 1
        elif kind == "batch_norm":
            header, kernel = _emit_batch_norm(node, in_spec, weight_index, width)
            headers.append((f"firmware/weights/w{weight_index}.h", header))
            header_paths.append(f"weights/w{weight_index}.h")
            weight_index += 1
        elif kind == "relu":
            kernel = _emit_relu(node, in_spec, width)
        else:  # binary_tanh / ternary_tanh
            header, kernel = _emit_sign_activation(node, in_spec, weight_index, width,
                                                   ternary=kind == "ternary_tanh")
            headers.append((f"firmware/weights/w{weight_index}.h", header))
            header_paths.append(f"weights/w{weight_index}.h")
            weight_index += 1
        kernels.append(kernel)
        stages.append((node.name, width))

    if input_spec is None:
        raise CodegenError("graph has no input node")
    if not stages:
        raise CodegenError("graph has no fixed-point compute layers to emit")
    out_width = stages[-1][1]

    model_h = "\n".join([
        "#pragma once",
        f"// {name}: generated inference entry point.",
        f"// Input: {graph.input_width} raws on {_spec_comment(input_spec)}",
        f"#define FF_INPUT_WIDTH {graph.input_width}",
        f"#define FF_OUTPUT_WIDTH {out_width}",
        f"void {name}_forward(const long long x[FF_INPUT_WIDTH], long long y[FF_OUTPUT_WIDTH]);",
        "",
    ])

    cpp = [
        f"// {name}: generated fully-connected inference kernels.",
        "// Convention: exact product -> cast into the accumulator spec -> add",
        "// (accumulator overflow applied per add, ascending input index);",
        "// one final cast into the result spec. Bit-exact with the emulator.",
        '#include "fixed_ops.h"',
        '#include "parameters.h"',
        f'#include "{name}.h"',
    ]
    cpp += [f'#include "{p}"' for p in header_paths]
    cpp.append("")
    for kernel in kernels:
        cpp.extend(kernel)
        cpp.append("")
    cpp.append(f"void {name}_forward(const long long x[FF_INPUT_WIDTH], long long y[FF_OUTPUT_WIDTH]) {{")
    prev = "x"
    for i, (layer_name, width) in enumerate(stages):
        buf = f"t{i}"
        cpp.append(f"    long long {buf}[{width}];")
        cpp.append(f"    {layer_name}_kernel({prev}, {buf});")
        prev = buf
    cpp.append(f"    for (int i = 0; i < FF_OUTPUT_WIDTH; ++i) y[i] = {prev}[i];")
    cpp.append("}")
    cpp.append("")

    files = [
        ("firmware/fixed_ops.h", FIXED_OPS_HEADER),
        ("firmware/parameters.h", _parameters_header(graph, plan, widths)),
        (f"firmware/{name}.h", model_h),
        (f"firmware/{name}.cpp", "\n".join(cpp)),
    ]
    files += headers
    files += [
        ("tb/testbench.cpp", TESTBENCH.format(name=name)),
        ("build.sh", BUILD_SH.format(name=name)),
    ]
    manifest = {
        "project": name,
        "model_hash": source_hash,
        "tool_version": TOOL_VERSION,
        "generated_at": datetime.now(timezone.utc).isoformat(),
        "notes": notes,
    }
    return ProjectTree(tuple(files), manifest)


class ProjectWriter:
    """Backend-writer seam; one implementation per target language."""

    def emit(self, graph: ModelGraph, config: CodegenConfig) -> ProjectTree:
        raise NotImplementedError


class HlsCppWriter(ProjectWriter):
    def emit(self, graph: ModelGraph, config: CodegenConfig = CodegenConfig()) -> ProjectTree:
        return emit_project(graph, config)


def _parameters_header(graph, plan, widths) -> str:
    lines = [
        "#pragma once",
        "// Per-layer configuration summary (informational).",
        "//",
        "// layer | kind | width | reuse | compression | weight/bias/acc/result",
    ]
    for kind, node, _ in plan:
        prec = node.precision
        lines.append(
            f"// {node.name} | {kind} | {widths[node.name]} | {node.reuse_factor} | "
            f"{str(node.compression).lower()} | "
            f"{prec.weight} / {prec.bias} / {prec.accumulator} / {prec.result}"
        )
    lines.append("")
    return "\n".join(lines)


REPORT_SCHEMA = {
    "$schema": "http://json-schema.org/draft-07/schema#",
    "type": "object",
    "required": ["schema_version", "model", "passes", "resources", "timing",
                 "profile", "prune_history"],
    "properties": {
        "schema_version": {"const": "1"},
        "model": {
            "type": "object",
            "required": ["hash", "input_shape", "layers"],
            "properties": {
                "hash": {"type": "string"},
                "input_shape": {"type": "array", "items": {"type": "integer"}},
                "layers": {
                    "type": "array",
                    "items": {
                        "type": "object",
                        "required": ["name", "kind", "output_width"],
                    },
                },
            },
        },
        "passes": {"type": "array", "items": {"type": "object"}},
        "resources": {
            "type": ["object", "null"],
            "properties": {
                "dsp_total": {"type": "integer", "minimum": 0},
                "lut_estimate": {"type": "number", "minimum": 0},
                "bops_total": {"type": "number", "minimum": 0},
                "per_layer": {"type": "array"},
            },
        },
        "timing": {"type": ["object", "null"]},
        "profile": {"type": ["object", "null"]},
        "prune_history": {"type": "array"},
    },
}


def emit_report(graph: ModelGraph, estimates=None, profile=None,
                prune_history=None, pass_reports=None) -> dict:
    """One structured document aggregating everything the pipeline measured."""
    widths = graph.layer_widths()
    doc = {
        "schema_version": "1",
        "model": {
            "hash": hashlib.sha256(serialize_model(graph).encode()).hexdigest(),
            "input_shape": list(graph.input_shape),
            "layers": [
                {"name": n.name, "kind": n.kind, "output_width": widths[n.name]}
                for n in topo_order(graph)
            ],
        },
        "passes": [r.to_doc() for r in (pass_reports or [])],
        "resources": None,
        "timing": None,
        "profile": profile.to_doc() if profile is not None else None,
        "prune_history": [
            {"iteration": r.iteration, "fraction": r.fraction, "accuracy": r.accuracy,
             "auc": r.auc, "bops": r.bops}
            for r in (prune_history or [])
        ],
    }
    if estimates is not None:
        resource, timing = estimates
        doc["resources"] = {
            "dsp_total": resource.dsp_total,
            "lut_estimate": resource.lut_estimate,
            "bops_total": resource.bops_total,
            "per_layer": [
                {"layer": r.layer, "n_mult": r.n_mult, "multipliers": r.multipliers,
                 "dsp": r.dsp, "lut": r.lut, "bops": r.bops}
                for r in resource.per_layer
            ],
        }
        doc["timing"] = {
            "clock_mhz": timing.clock_mhz,
            "model_ii_cycles": timing.model_ii_cycles,
            "total_latency_cycles": timing.total_latency_cycles,
            "throughput_inferences_per_second": timing.throughput_inferences_per_second,
            "per_layer": [
                {"layer": t.layer, "ii_cycles": t.ii_cycles, "latency_cycles": t.latency_cycles}
                for t in timing.per_layer
            ],
        }
    return doc
