"""
``rana`` command line.

Exit codes: 0 success, 1 configuration or other error, 2 unreadable tensor file,
3 shape mismatch, 4 infeasible budget, 5 missing bundle.

Diagnostics go to stderr. With ``--json`` stdout carries a single JSON summary
and nothing else.
"""

import argparse
import csv
import io
import json
import sys
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from . import __version__
from .adapters import DenseLinear, build_prop1_equivalent, neuron_adapted_relu_mlp
from .allocation import (
    AllocationPlan,
    FlopAllocator,
    realize_layer,
    realize_mlp,
    settle_layer,
    settle_mlp,
)
from .bundle import (
    BUNDLE_FILE,
    PLAN_FILE,
    SEARCH_LOG_FILE,
    BundleManifest,
    load_adapted_layer,
    load_manifest,
    load_model_bundle,
    load_plan,
    save_adapted_layer,
    split_search_logs,
    write_json,
    write_model_bundle,
)
from .config import ToolkitConfig, load_config, resolve_run_config, resolve_threads
from .decomposition import CalibrationSet, decompose, rank_contributions
from .errors import InfeasibleBudgetError, RanaError
from .evaluation import (
    ERROR_FIELDS,
    HISTOGRAM_FIELDS,
    LINEAR_KINDS,
    MLP_KINDS,
    AdapterComparison,
    ErrorReport,
    build_sparsity_histogram,
    measure_layer_error,
    toy_model_divergence,
)
from .flop_model import compression_table, dense_linear_flops, dense_mlp_flops
from .kernels import BENCH_FIELDS, bench_masked_gemv
from .maskers import calibrate_b_masker, calibrate_neuron_masker
from .tensor_io import atomic_write_bytes, read_tensor, write_tensor
from .toy import make_toy_transformer, token_sequences, train_toy_swiglu

PROP1_TOLERANCE = 1e-12


def _warn(message: str):
    print(f"Warning: {message}", file=sys.stderr)


def _emit(args, summary: dict, lines: List[str]):
    if args.json:
        print(json.dumps(summary, sort_keys=True))
    else:
        for line in lines:
            print(line)


def _write_csv(path: Path, fieldnames: List[str], rows: List[dict]):
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=fieldnames, extrasaction="ignore", lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow(row)
    atomic_write_bytes(path, buf.getvalue().encode("utf-8"))


def _allocator(config: ToolkitConfig, grid_step: float, masker_kind: str) -> FlopAllocator:
    return FlopAllocator(
        settings=config.allocation.model_copy(update={"grid_step": grid_step}),
        masker=config.masker.model_copy(update={"kind": masker_kind}),
        threads=resolve_threads(config),
    )


# --- decompose / calibrate ---


def cmd_decompose(args, config: ToolkitConfig) -> int:
    weight = read_tensor(args.weights)
    calib = CalibrationSet(read_tensor(args.calib))
    keep = args.keep_ranks if args.keep_ranks is not None else config.decomposition.keep_ranks
    dec = decompose(weight, calib, keep_ranks=keep, rank_cutoff=config.decomposition.rank_cutoff)
    out = Path(args.out)
    write_tensor(out / "A.rana", dec.a)
    write_tensor(out / "B.rana", dec.b)
    write_tensor(out / "S.rana", dec.singular_values)
    manifest = {
        "toolkit_version": __version__,
        "seed": args.seed if args.seed is not None else config.seed,
        "weight_shape": list(dec.source_shape),
        "calibration_shape": list(calib.x.shape),
        "a_shape": list(dec.a.shape),
        "b_shape": list(dec.b.shape),
        "kept_ranks": dec.kept_ranks,
        "dropped_ranks": dec.dropped_ranks,
        "notes": dec.notes,
    }
    write_json(out / "manifest.json", manifest)
    _emit(args, manifest, [f"Decomposed {args.weights}: kept {dec.kept_ranks} ranks, wrote {out}"])
    return 0


def cmd_calibrate(args, config: ToolkitConfig) -> int:
    weight = read_tensor(args.weights)
    calib = CalibrationSet(read_tensor(args.calib))
    if args.masker == "neuron":
        # weights: the d x h down projection, calibration: hidden states entering it
        target = args.target_fraction * weight.shape[1]
        masker = calibrate_neuron_masker(weight, calib.x, target)
        summary = {"masker": "neuron", "width": int(weight.shape[1])}
    else:
        dec = decompose(weight, calib, rank_cutoff=config.decomposition.rank_cutoff)
        target = args.target_fraction * dec.kept_ranks
        masker = calibrate_b_masker(rank_contributions(dec, calib), target)
        summary = {"masker": "b", "width": dec.kept_ranks}
    summary.update(
        {
            "threshold": masker.threshold,
            "target_expected_active": masker.target_expected_active,
            "calibrated_mean_active": masker.calibrated_mean_active,
        }
    )
    if args.out:
        write_json(args.out, summary)
    _emit(
        args,
        summary,
        [
            f"{summary['masker']} masker threshold {masker.threshold:.6g}: "
            f"{masker.calibrated_mean_active:.3f} of {summary['width']} active on average"
        ],
    )
    return 0


# --- compress ---


def _decompose(weight: np.ndarray, calib: CalibrationSet, config: ToolkitConfig):
    return decompose(
        weight,
        calib,
        keep_ranks=config.decomposition.keep_ranks,
        rank_cutoff=config.decomposition.rank_cutoff,
    )


def cmd_compress(args, config: ToolkitConfig) -> int:
    manifest, layers = load_model_bundle(args.bundle)
    run = resolve_run_config(
        config,
        seed=args.seed,
        budget=args.budget,
        grid_step=args.grid_step,
        masker_kind=args.masker,
        calibration_paths=[str(args.bundle)],
        output_dir=args.out,
    )
    allocator = _allocator(config, run.grid_step, run.masker_kind)
    holdout = config.evaluation.holdout_fraction
    out = Path(run.output_dir)
    plan = AllocationPlan(
        toolkit_version=__version__,
        config_hash=run.config_hash(),
        seed=run.seed,
        budget=run.budget,
        grid_step=run.grid_step,
        masker_kind=run.masker_kind,
    )
    adapted_manifest = BundleManifest(
        kind="adapted", seed=run.seed, source=str(Path(args.bundle)), config_hash=plan.config_hash
    )
    infeasible: Dict[str, InfeasibleBudgetError] = {}
    mlp_pairs, linear_pairs = [], []

    for layer in layers:
        name = layer.entry.name
        calib, _ = layer.calibration.split(run.seed, holdout)
        print(f"Compressing {name} ({layer.entry.kind}) at {run.budget:.0%} of dense FLOPs", file=sys.stderr)
        try:
            if isinstance(layer.target, DenseLinear):
                dense = dense_linear_flops(*layer.target.shape)
                dec = _decompose(layer.target.weight, calib, config)
                alloc = allocator.line_search_layer(
                    dec,
                    rank_contributions(dec, calib),
                    run.budget * dense.total,
                    masker_kind=run.masker_kind,
                    component=name,
                )
                adapted = realize_layer(dec, alloc, calib, allocator.masker, run.seed)
                alloc = settle_layer(dec, alloc, adapted, calib)
                plan.layers[name] = alloc
                linear_pairs.append((alloc.achieved_flops, dense))
            else:
                mlp = layer.target
                dense = dense_mlp_flops(mlp.shape)
                decs = {"up": _decompose(mlp.up, calib, config)}
                if mlp.gate is not None:
                    decs["gate"] = _decompose(mlp.gate, calib, config)
                alloc = allocator.grid_search_mlp(mlp, calib, run.budget * dense.total, decompositions=decs)
                adapted = realize_mlp(mlp, decs, alloc, calib, allocator.masker, run.seed)
                alloc = settle_mlp(mlp, decs, alloc, adapted, calib)
                plan.mlps[name] = alloc
                mlp_pairs.append((alloc.achieved_flops, dense))
        except InfeasibleBudgetError as e:
            infeasible[name] = e
            continue
        adapted_manifest.layers.append(save_adapted_layer(out, name, layer.entry.kind, adapted))

    if infeasible:
        for name, error in infeasible.items():
            layer = next(l for l in layers if l.entry.name == name)
            dense = (
                dense_linear_flops(*layer.target.shape)
                if isinstance(layer.target, DenseLinear)
                else dense_mlp_flops(layer.target.shape)
            )
            minimum = error.minimum_flops
            fraction = f" ({minimum / dense.total:.2%} of dense)" if minimum is not None else ""
            print(f"Error: {name}: {error}{fraction}", file=sys.stderr)
        return InfeasibleBudgetError.exit_code

    table = compression_table(mlp_pairs, linear_pairs, config.model_flop_census)
    plan.compression = {row.scope: row.compression for row in table.rows}
    plan_data, logs = split_search_logs(plan)
    write_json(out / PLAN_FILE, plan_data)
    write_json(out / SEARCH_LOG_FILE, logs)
    write_json(out / BUNDLE_FILE, adapted_manifest)

    summary = {
        "plan": str(out / PLAN_FILE),
        "config_hash": plan.config_hash,
        "compression": plan.compression,
        "layers": len(layers),
    }
    lines = [f"Wrote adapted bundle to {out}"] + [
        f"  {row.scope}: {row.compression:.2%} FLOP compression" for row in table.rows
    ]
    _emit(args, summary, lines)
    return 0


# --- eval / hist ---


def cmd_eval(args, config: ToolkitConfig) -> int:
    plan = load_plan(args.adapted)
    adapted_manifest = load_manifest(args.adapted)
    _, layers = load_model_bundle(adapted_manifest.source)
    kinds = args.kinds or list(config.evaluation.adapter_kinds)
    allocator = _allocator(config, plan.grid_step, plan.masker_kind)
    comparison = AdapterComparison(allocator=allocator, seed=plan.seed)
    rows = []
    for layer in layers:
        name = layer.entry.name
        calib, held = layer.calibration.split(plan.seed, config.evaluation.holdout_fraction)
        is_linear = isinstance(layer.target, DenseLinear)
        dense = (
            dense_linear_flops(*layer.target.shape) if is_linear else dense_mlp_flops(layer.target.shape)
        ).total
        applicable = LINEAR_KINDS if is_linear else MLP_KINDS
        for kind in kinds:
            if kind not in applicable:
                continue
            if kind == "rana":
                entry = adapted_manifest.layer(name)
                adapted = load_adapted_layer(args.adapted, entry, plan, layer.target)
                allocation = plan.layers[name] if is_linear else plan.mlps[name]
                report = measure_layer_error(layer.target, adapted, held.x, kind, name)
                achieved = allocation.achieved_flops.total
                report = report.model_copy(
                    update={"achieved_flops": achieved, "dense_flops": dense, "compression": 1.0 - achieved / dense}
                )
            else:
                try:
                    if is_linear:
                        report = comparison.linear_row(kind, layer.target, calib, held.x, plan.budget * dense, name)
                    else:
                        report = comparison.mlp_row(kind, layer.target, calib, held.x, plan.budget * dense, name)
                except RanaError as e:
                    report = ErrorReport(layer=name, kind=kind, dense_flops=dense, feasible=False, note=str(e))
            rows.append(report)

    records = [r.model_dump() for r in rows]
    out = Path(args.out)
    _write_csv(out, ERROR_FIELDS, records)
    write_json(out.with_suffix(".json"), {"config_hash": plan.config_hash, "rows": records})
    _emit(
        args,
        {"config_hash": plan.config_hash, "rows": records},
        [
            f"{r.layer:<20} {r.kind:<12} "
            + (f"{r.mean_error:.4%}" if r.mean_error is not None else f"infeasible: {r.note}")
            for r in rows
        ],
    )
    return 0


def _histogram_targets(layer) -> Dict[str, np.ndarray]:
    if isinstance(layer.target, DenseLinear):
        return {layer.entry.name: layer.target.weight}
    targets = {f"{layer.entry.name}.up": layer.target.up}
    if layer.target.gate is not None:
        targets[f"{layer.entry.name}.gate"] = layer.target.gate
    return targets


def cmd_hist(args, config: ToolkitConfig) -> int:
    _, layers = load_model_bundle(args.bundle)
    seed = args.seed if args.seed is not None else config.seed
    bins = args.bins or config.evaluation.histogram_bins
    scale = args.scale or config.evaluation.histogram_scale
    rows, summary = [], {}
    for layer in layers:
        calib, _ = layer.calibration.split(seed, config.evaluation.holdout_fraction)
        for label, weight in _histogram_targets(layer).items():
            if args.layer and label not in args.layer:
                continue
            dec = decompose(weight, calib, rank_cutoff=config.decomposition.rank_cutoff)
            hist = build_sparsity_histogram(rank_contributions(dec, calib), bins=bins, scale=scale)
            summary[label] = {"top_half_mass": hist.top_half_mass, "entries": hist.total_entries}
            for index, count in enumerate(hist.counts):
                rows.append(
                    {
                        "layer": label,
                        "bin": index,
                        "lower": hist.bin_edges[index],
                        "upper": hist.bin_edges[index + 1],
                        "count": count,
                    }
                )
    if args.layer and not summary:
        _warn(f"no layer matched {', '.join(args.layer)}")
    _write_csv(Path(args.out), HISTOGRAM_FIELDS, rows)
    _emit(
        args,
        {"histograms": summary, "bins": bins, "scale": scale},
        [f"{label}: top half of ranks carries {s['top_half_mass']:.1%} of the energy" for label, s in summary.items()],
    )
    return 0


# --- bench / prop1-check ---


def cmd_bench(args, config: ToolkitConfig) -> int:
    settings = config.bench
    rows = bench_masked_gemv(
        sizes=args.sizes or settings.sizes,
        densities=args.densities or settings.densities,
        repetitions=args.repetitions or settings.repetitions,
        warmup=args.warmup or settings.warmup,
        seed=args.seed if args.seed is not None else config.seed,
    )
    records = [row.model_dump() for row in rows]
    _write_csv(Path(args.out), BENCH_FIELDS, records)
    _emit(
        args,
        {"rows": records},
        [
            f"{r.size:>6} x {r.size:<6} density {r.density:<5} median {r.median_ns / 1e3:10.1f} us  speedup {r.speedup:.2f}x"
            for r in rows
        ],
    )
    return 0


def cmd_prop1_check(args, config: ToolkitConfig) -> int:
    rng = np.random.default_rng(args.seed if args.seed is not None else config.seed)
    worst = 0.0
    for _ in range(args.trials):
        d, h = int(rng.integers(2, 12)), int(rng.integers(2, 16))
        w_up = rng.standard_normal((h, d))
        w_down = rng.standard_normal((d, h))
        x = rng.standard_normal(d)
        mask = (rng.random(h) < 0.5).astype(np.float64)
        construction = build_prop1_equivalent(w_up, w_down)
        deviation = np.max(np.abs(construction.forward(x, mask=mask) - neuron_adapted_relu_mlp(w_up, w_down, x, mask)))
        worst = max(worst, float(deviation))
    passed = worst <= PROP1_TOLERANCE
    _emit(
        args,
        {"trials": args.trials, "max_abs_deviation": worst, "passed": passed},
        [f"{args.trials} trials, max deviation {worst:.3e}: {'ok' if passed else 'FAILED'}"],
    )
    return 0 if passed else 1


# --- toy fixtures ---


def cmd_toy(args, config: ToolkitConfig) -> int:
    seed = args.seed if args.seed is not None else config.seed
    out = Path(args.out)
    if args.kind == "swiglu":
        toy = train_toy_swiglu(d=args.width, h=args.hidden or 2 * args.width, samples=args.samples, seed=seed)
        manifest = write_model_bundle(out, {"mlp": (toy.mlp, toy.inputs)}, seed=seed)
        summary = {"bundle": str(out), "layers": [e.name for e in manifest.layers]}
        _emit(args, summary, [f"Wrote toy SwiGLU bundle to {out}"])
        return 0

    model = make_toy_transformer(blocks=args.blocks, width=args.width, hidden=args.hidden, seed=seed)
    sequences = token_sequences(model.vocab, max(args.samples // args.length, 1), args.length, seed + 1)
    _, trace = model.collect(sequences)
    layers = {}
    for index, block in enumerate(model.blocks):
        layers[f"block{index}.qkv"] = (DenseLinear(block.qkv), trace.qkv_inputs[index])
        layers[f"block{index}.mlp"] = (block.mlp, trace.mlp_inputs[index])
    manifest = write_model_bundle(out, layers, seed=seed)
    summary = {"bundle": str(out), "layers": [e.name for e in manifest.layers]}
    lines = [f"Wrote toy transformer bundle to {out}"]

    if args.divergence:
        allocator = _allocator(config, config.allocation.grid_step, "b")
        eval_sequences = token_sequences(model.vocab, max(len(sequences) // 4, 1), args.length, seed + 2)
        reports = [
            toy_model_divergence(model, c, sequences, eval_sequences, mode=args.mode, allocator=allocator)
            for c in args.divergence
        ]
        write_json(out / "divergence.json", {"reports": [r.model_dump() for r in reports]})
        summary["divergence"] = [r.model_dump() for r in reports]
        lines += [
            f"  compression {r.compression:.0%} ({r.mode}): mean relative logit deviation {r.mean_relative_deviation:.4f}"
            for r in reports
        ]
    _emit(args, summary, lines)
    return 0


# --- Parser ---


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default="config.toml", help="TOML settings file")
    common.add_argument("--json", action="store_true", help="print only a JSON summary on stdout")
    common.add_argument("--seed", type=int, default=None, help="random seed (overrides config)")

    parser = argparse.ArgumentParser(prog="rana", description="Adaptive rank allocation compression toolkit")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("decompose", parents=[common], help="factor one layer from calibration inputs")
    p.add_argument("weights")
    p.add_argument("calib")
    p.add_argument("--keep-ranks", type=int, default=None)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(handler=cmd_decompose)

    p = sub.add_parser("calibrate", parents=[common], help="calibrate a masker threshold")
    p.add_argument("weights")
    p.add_argument("calib")
    p.add_argument("--target-fraction", type=float, required=True, help="expected active share of ranks/neurons")
    p.add_argument("--masker", choices=["b", "neuron"], default="b")
    p.add_argument("--out", default=None, help="JSON file for the calibrated threshold")
    p.set_defaults(handler=cmd_calibrate)

    p = sub.add_parser("compress", parents=[common], help="allocate FLOPs and build adapters for a bundle")
    p.add_argument("bundle")
    p.add_argument("--budget", type=float, default=None, help="fraction of dense FLOPs, in (0, 1]")
    p.add_argument("--grid-step", type=float, default=None)
    p.add_argument("--masker", choices=["b", "sigmoid"], default=None)
    p.add_argument("--out", required=True, help="adapted bundle directory")
    p.set_defaults(handler=cmd_compress)

    p = sub.add_parser("eval", parents=[common], help="normalized error of an adapted bundle and baselines")
    p.add_argument("adapted")
    p.add_argument("--kinds", nargs="+", default=None, choices=sorted(set(LINEAR_KINDS) | set(MLP_KINDS)))
    p.add_argument("--out", required=True, help="CSV error table")
    p.set_defaults(handler=cmd_eval)

    p = sub.add_parser("hist", parents=[common], help="rank contribution sparsity histograms")
    p.add_argument("bundle")
    p.add_argument("--bins", type=int, default=None)
    p.add_argument("--scale", choices=["log", "linear"], default=None)
    p.add_argument("--layer", nargs="+", default=None, help="only these layers (MLPs as NAME.up / NAME.gate)")
    p.add_argument("--out", required=True, help="CSV histogram table")
    p.set_defaults(handler=cmd_hist)

    p = sub.add_parser("bench", parents=[common], help="masked GEMV latency benchmark")
    p.add_argument("--sizes", type=int, nargs="+", default=None)
    p.add_argument("--densities", type=float, nargs="+", default=None)
    p.add_argument("--repetitions", type=int, default=None)
    p.add_argument("--warmup", type=int, default=None)
    p.add_argument("--out", required=True, help="CSV latency table")
    p.set_defaults(handler=cmd_bench)

    p = sub.add_parser("prop1-check", parents=[common], help="rank adapters reproduce neuron adapters")
    p.add_argument("--trials", type=int, default=200)
    p.set_defaults(handler=cmd_prop1_check)

    p = sub.add_parser("toy", parents=[common], help="write a toy model bundle")
    p.add_argument("--kind", choices=["swiglu", "transformer"], default="swiglu")
    p.add_argument("--width", type=int, default=16)
    p.add_argument("--hidden", type=int, default=None)
    p.add_argument("--blocks", type=int, default=2)
    p.add_argument("--samples", type=int, default=512)
    p.add_argument("--length", type=int, default=32, help="toy transformer sequence length")
    p.add_argument("--divergence", type=float, nargs="+", default=None, help="compression rates to evaluate")
    p.add_argument("--mode", choices=["mlp_qkv", "mlp_only"], default="mlp_qkv")
    p.add_argument("--out", required=True, help="bundle directory")
    p.set_defaults(handler=cmd_toy)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code) if e.code is not None else 0
    try:
        config = load_config(args.config)
        return args.handler(args, config)
    except RanaError as e:
        print(f"Error: {e}", file=sys.stderr)
        return e.exit_code
    except (OSError, ValueError) as e:
        print(f"Error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
