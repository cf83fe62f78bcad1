"""Command-line entry point orchestrating the full workflow.

Subcommands: convert, profile, train, qat, prune, emulate, estimate,
scan, codegen. Heavy configuration can live in a JSON config document
passed with --config; explicit flags override config leaves. Every
subcommand honors --seed and writes deterministic artifacts (the codegen
manifest timestamp is the one quarantined exception).

Exit codes: 0 success, 1 domain error, 2 usage error. Set FIXFLOW_LOG to
DEBUG/INFO/WARNING for log verbosity.

Model arguments accept either a model document path or the shorthand
``arch:IN x H1 x ... x OUT`` (no spaces, e.g. ``arch:16x64x32x32x5``)
for a freshly initialized dense/ReLU/softmax classifier. Dataset
arguments accept a CSV path or ``synthetic[:seed[:samples]]`` for the
bundled 16-feature 5-class task.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np

from . import codegen, estimator, kernels, passes, profiler, pruning, trainer
from .fixed_point import quantize
from .model_ir import ModelGraph, Tensor, parse_model, serialize_model, validate

log = logging.getLogger("fixflow")

_METHODS = {"l1": "l1_retrain", "lt": "lt_rewind", "qap": "qap"}


def _load_config(path):
    if path is None:
        return {}
    with open(path) as fh:
        doc = json.load(fh)
    if not isinstance(doc, dict):
        raise ValueError(f"{path}: config must be a JSON object")
    if str(doc.get("config_version", "1")) != "1":
        raise ValueError(f"{path}: unsupported config_version")
    return doc


def _pick(args, config, key, default):
    """Flag value if given, else config leaf, else default."""
    value = getattr(args, key, None)
    if value is not None:
        return value
    return config.get(key, default)


def _load_model(spec: str, seed: int) -> ModelGraph:
    if spec.startswith("arch:"):
        dims = [int(d) for d in spec[len("arch:"):].replace(",", "x").split("x")]
        if len(dims) < 2:
            raise ValueError(f"{spec}: need at least input and output widths")
        return trainer.build_classifier(dims[0], dims[1:-1], dims[-1], seed=seed)
    with open(spec) as fh:
        return parse_model(fh.read())


def _load_dataset(spec: str, seed: int) -> trainer.Dataset:
    if spec == "synthetic" or spec.startswith("synthetic:"):
        parts = spec.split(":")
        data_seed = int(parts[1]) if len(parts) > 1 else seed
        samples = int(parts[2]) if len(parts) > 2 else 2000
        return trainer.synthetic_task(seed=data_seed, n_samples=samples)
    return trainer.load_csv_dataset(spec)


def _load_input_rows(spec: str, seed: int) -> np.ndarray:
    if spec == "synthetic" or spec.startswith("synthetic:") or spec.endswith(".csv"):
        return _load_dataset(spec, seed).features
    rows = []
    with open(spec) as fh:
        for line in fh:
            line = line.strip()
            if line:
                rows.append([float(v) for v in line.split()])
    return np.array(rows, dtype=np.float64)


def _out_dir(args) -> str:
    os.makedirs(args.out, exist_ok=True)
    return args.out


def _write_text(path, text):
    with open(path, "w") as fh:
        fh.write(text)
    log.info("wrote %s", path)


def _write_json(path, doc):
    _write_text(path, json.dumps(doc, indent=2) + "\n")


def _training_config(args, config) -> trainer.TrainingConfig:
    return trainer.TrainingConfig(
        learning_rate=float(_pick(args, config, "learning_rate", 0.01)),
        optimizer=str(_pick(args, config, "optimizer", "adam")),
        epochs=int(_pick(args, config, "epochs", 50)),
        batch_size=int(_pick(args, config, "batch_size", 64)),
        l1_lambda=float(_pick(args, config, "l1_lambda", 0.0)),
        seed=args.seed,
    )


def _quantizer(args, config) -> trainer.QuantizerSpec:
    return trainer.QuantizerSpec(
        bits=int(_pick(args, config, "bits", 6)),
        integer_bits=int(_pick(args, config, "integer_bits", 1)),
        alpha=float(_pick(args, config, "alpha", 1.0)),
        mode=str(_pick(args, config, "mode", "fixed")),
    )


def cmd_convert(args, config):
    graph = _load_model(args.model, args.seed)
    graph, reports = passes.run_standard_passes(graph)
    problems = validate(graph)
    if problems:
        for p in problems:
            print(f"error: {p}", file=sys.stderr)
        return 1
    out = _out_dir(args)
    _write_text(os.path.join(out, "model.json"), serialize_model(graph))
    _write_json(os.path.join(out, "report.json"),
                codegen.emit_report(graph, pass_reports=reports))
    applied = sum(len(r.rewrites) for r in reports)
    print(f"converted: {len(graph.nodes)} layers, {applied} rewrites")
    return 0


def cmd_profile(args, config):
    graph = _load_model(args.model, args.seed)
    report = profiler.profile_weights(graph)
    coverage = profiler.check_coverage(report, graph)
    out = _out_dir(args)
    _write_json(os.path.join(out, "profile.json"), report.to_doc())
    _write_json(os.path.join(out, "coverage.json"),
                [dict(c.__dict__) for c in coverage])
    for entry in coverage:
        print(f"{entry.level}: [{entry.layer}.{entry.param}] {entry.message}")
    print(f"profiled {len(report.rows)} tensors, {len(coverage)} findings")
    return 0


def cmd_train(args, config):
    graph = _load_model(args.model, args.seed)
    data = _load_dataset(args.data, args.seed)
    cfg = _training_config(args, config)
    trained, trace = trainer.train(graph, data, cfg)
    out = _out_dir(args)
    _write_text(os.path.join(out, "model.json"), serialize_model(trained))
    trainer.write_loss_trace(trace, os.path.join(out, "loss_trace.csv"))
    report = trainer.evaluate(trained, data)
    print(f"trained {cfg.epochs} epochs: loss {trace[-1].loss:.4f}, "
          f"accuracy {report.accuracy:.4f}, mean AUC {report.mean_auc:.4f}")
    return 0


def cmd_qat(args, config):
    graph = _load_model(args.model, args.seed)
    data = _load_dataset(args.data, args.seed)
    cfg = _training_config(args, config)
    quantizer = _quantizer(args, config)
    cfg = trainer.replace_quantizers(cfg, quantizer)
    trained, trace = trainer.train_qat(graph, data, cfg)
    deployed = trainer.quantize_model_weights(trained, quantizer)
    out = _out_dir(args)
    _write_text(os.path.join(out, "model.json"), serialize_model(trained))
    _write_text(os.path.join(out, "model_quantized.json"), serialize_model(deployed))
    trainer.write_loss_trace(trace, os.path.join(out, "loss_trace.csv"))
    report = trainer.evaluate(deployed, data)
    print(f"qat({quantizer.bits} bits) {cfg.epochs} epochs: loss {trace[-1].loss:.4f}, "
          f"accuracy {report.accuracy:.4f}")
    return 0


def cmd_prune(args, config):
    graph = _load_model(args.model, args.seed)
    data = _load_dataset(args.data, args.seed)
    cfg = _training_config(args, config)
    method = _METHODS[args.method]
    schedule = pruning.PruneSchedule(
        target_fraction=float(_pick(args, config, "target_fraction", 0.8)),
        increment=float(_pick(args, config, "increment", 0.10)),
        retrain_epochs=int(_pick(args, config, "retrain_epochs", 20)),
        method=method,
    )
    if method == "qap":
        cfg = trainer.replace_quantizers(cfg, _quantizer(args, config))
    model, state, history = pruning.prune_iterative(graph, data, schedule, cfg)
    out = _out_dir(args)
    _write_text(os.path.join(out, "model.json"), serialize_model(model))
    pruning.write_prune_history(history, os.path.join(out, "prune_history.csv"))
    final = history[-1] if history else None
    if final:
        print(f"pruned to {final.fraction:.2f}: accuracy {final.accuracy:.4f}, "
              f"BOPs {final.bops:.0f}")
    else:
        print("target fraction 0: model unchanged")
    return 0


def cmd_emulate(args, config):
    graph = _load_model(args.model, args.seed)
    rows = _load_input_rows(args.data, args.seed)
    if rows.ndim != 2 or rows.shape[1] != graph.input_width:
        raise ValueError(
            f"inputs have {rows.shape[-1] if rows.size else 0} values per row, "
            f"model expects {graph.input_width}"
        )
    graph = kernels.materialize_quantized(graph)
    out = _out_dir(args)
    tap_dir = os.path.join(out, "taps")
    if args.taps:
        os.makedirs(tap_dir, exist_ok=True)
    outputs, raw_inputs = [], []
    tap_rows = {}
    for x in rows:
        result, taps = kernels.run_inference(graph, Tensor.from_numpy(x), tap_all=args.taps)
        outputs.append(_format_vector(result.data))
        for tap in taps:
            tap_rows.setdefault(tap.layer, []).append(_format_vector(tap.output.data))
            if tap.layer == graph.nodes[0].name:
                raw_inputs.append(_format_vector(tap.output.data))
        if not args.taps:
            quantized = [quantize(float(v), graph.nodes[0].precision.result) for v in x]
            raw_inputs.append(_format_vector(quantized))
    _write_text(os.path.join(out, "outputs.txt"), "".join(outputs))
    _write_text(os.path.join(out, "inputs_raw.txt"), "".join(raw_inputs))
    if args.taps:
        for idx, node in enumerate(graph.nodes):
            if node.name in tap_rows:
                path = os.path.join(tap_dir, f"tap_{idx:02d}_{node.name}.txt")
                _write_text(path, "".join(tap_rows[node.name]))
    print(f"emulated {len(rows)} inputs")
    return 0


def _format_vector(values) -> str:
    parts = []
    for v in values:
        if hasattr(v, "raw"):
            parts.append(str(v.raw))
        else:
            parts.append(repr(float(v)))
    return " ".join(parts) + "\n"


def cmd_estimate(args, config):
    graph = _load_model(args.model, args.seed)
    clock = float(_pick(args, config, "clock_mhz", 200.0))
    out = _out_dir(args)
    estimates = estimator.estimate_model(graph, clock_mhz=clock,
                                         assume_dense=args.assume_dense)
    profile = profiler.profile_weights(graph)
    _write_json(os.path.join(out, "report.json"),
                codegen.emit_report(graph, estimates, profile))
    resource, timing = estimates
    if args.reuse:
        factors = _parse_int_list(args.reuse)
        sweep = estimator.reuse_sweep(graph, factors, clock_mhz=clock,
                                      assume_dense=args.assume_dense)
        _write_sweep_csv(sweep, os.path.join(out, "reuse_scan.csv"))
        print(f"swept {len(factors)} reuse factors")
    print(f"DSP {resource.dsp_total}, BOPs {resource.bops_total:.0f}, "
          f"II {timing.model_ii_cycles} cycles at {clock:g} MHz")
    return 0


def _write_sweep_csv(rows, path):
    import csv as _csv

    with open(path, "w", newline="") as fh:
        writer = _csv.writer(fh)
        writer.writerow(["reuse_factor", "ii_cycles", "latency_cycles", "dsp_total",
                         "n_mult_total", "throughput_hz"])
        for row in rows:
            writer.writerow([row["reuse_factor"], row["model_ii_cycles"],
                             row["total_latency_cycles"], row["dsp_total"],
                             row["n_mult_total"], repr(row["throughput_hz"])])


def cmd_scan(args, config):
    graph = _load_model(args.model, args.seed)
    data = _load_dataset(args.data, args.seed)
    if args.data.startswith("synthetic"):
        parts = args.data.split(":")
        task_seed = int(parts[1]) if len(parts) > 1 else args.seed
        eval_data = trainer.synthetic_task(seed=task_seed, sample_seed=task_seed + 10_000)
    else:
        eval_data = data
    cfg = _training_config(args, config)
    bits = _parse_int_list(args.bits)
    baseline, rows = trainer.ptq_qat_scan(
        graph, data, eval_data, bits, cfg,
        fixed_eval_limit=int(_pick(args, config, "fixed_eval_limit", 1000)),
    )
    out = _out_dir(args)
    trainer.write_scan_csv(rows, os.path.join(out, "scan.csv"))
    print(f"baseline accuracy {baseline.accuracy:.4f}")
    for row in rows:
        print(f"bits {row.bits}: PTQ {row.ptq_rel_acc:.4f}  QAT {row.qat_rel_acc:.4f}")
    return 0


def cmd_codegen(args, config):
    graph = _load_model(args.model, args.seed)
    tree = codegen.emit_project(graph, codegen.CodegenConfig(project_name=args.name))
    out = _out_dir(args)
    tree.write_to(out)
    print(f"emitted {len(tree.files) + 1} files to {out}")
    return 0


def _parse_int_list(text: str):
    """Accepts '14,28,98' or an inclusive range '3..16'."""
    text = text.strip()
    if ".." in text:
        lo, hi = text.split("..", 1)
        return list(range(int(lo), int(hi) + 1))
    return [int(v) for v in text.split(",") if v]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fixflow",
        description="Compile trained MLPs to bit-accurate fixed-point implementations.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, model=True, data=False, out=True):
        if model:
            p.add_argument("--model", required=True,
                           help="model document path or arch:INxH1x...xOUT")
        if data:
            p.add_argument("--data", required=True,
                           help="dataset CSV path or synthetic[:seed[:samples]]")
        if out:
            p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--config", help="JSON config document; flags override leaves")
        p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("convert", help="parse, optimize, validate, write canonical model")
    common(p)
    p.set_defaults(handler=cmd_convert)

    p = sub.add_parser("profile", help="weight distribution and precision coverage")
    common(p)
    p.set_defaults(handler=cmd_profile)

    p = sub.add_parser("train", help="float training")
    common(p, data=True)
    _train_flags(p)
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser("qat", help="quantization-aware training")
    common(p, data=True)
    _train_flags(p)
    _quant_flags(p)
    p.set_defaults(handler=cmd_qat)

    p = sub.add_parser("prune", help="iterative pruning driver")
    common(p, data=True)
    _train_flags(p)
    _quant_flags(p)
    p.add_argument("--method", choices=sorted(_METHODS), default="l1")
    p.add_argument("--target-fraction", dest="target_fraction", type=float)
    p.add_argument("--increment", type=float)
    p.add_argument("--retrain-epochs", dest="retrain_epochs", type=int)
    p.set_defaults(handler=cmd_prune)

    p = sub.add_parser("emulate", help="bit-accurate batch inference")
    common(p, data=True)
    p.add_argument("--taps", action="store_true", help="write every layer output")
    p.set_defaults(handler=cmd_emulate)

    p = sub.add_parser("estimate", help="resource and timing estimates")
    common(p)
    p.add_argument("--clock-mhz", dest="clock_mhz", type=float)
    p.add_argument("--reuse", help="comma list or lo..hi of reuse factors to sweep")
    p.add_argument("--assume-dense", dest="assume_dense", action="store_true",
                   help="count every weight as a multiplier (architecture study)")
    p.set_defaults(handler=cmd_estimate)

    p = sub.add_parser("scan", help="PTQ vs QAT bit-width sweep")
    common(p, data=True)
    _train_flags(p)
    p.add_argument("--bits", required=True, help="comma list or lo..hi, e.g. 3..16")
    p.add_argument("--fixed-eval-limit", dest="fixed_eval_limit", type=int,
                   help="samples used for the bit-accurate evaluations")
    p.set_defaults(handler=cmd_scan)

    p = sub.add_parser("codegen", help="emit the HLS-style C++ project")
    common(p)
    p.add_argument("--name", default="model", help="project / entry-point name")
    p.set_defaults(handler=cmd_codegen)
    return parser


def _train_flags(p):
    p.add_argument("--epochs", type=int)
    p.add_argument("--learning-rate", dest="learning_rate", type=float)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--l1-lambda", dest="l1_lambda", type=float)
    p.add_argument("--optimizer", choices=("sgd", "adam"))


def _quant_flags(p):
    p.add_argument("--bits", type=int)
    p.add_argument("--integer-bits", dest="integer_bits", type=int)
    p.add_argument("--alpha", type=float)
    p.add_argument("--mode", choices=("fixed", "binary", "ternary"))


def run(argv) -> int:
    """Parse argv and execute; returns the process exit code."""
    level = getattr(logging, os.environ.get("FIXFLOW_LOG", "WARNING").upper(), logging.WARNING)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code else 0
    try:
        config = _load_config(args.config)
        return args.handler(args, config)
    except (ValueError, KeyError, OSError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        log.debug("failure detail", exc_info=True)
        return 1


def main() -> None:
    sys.exit(run(sys.argv[1:]))


if __name__ == "__main__":
    main()
