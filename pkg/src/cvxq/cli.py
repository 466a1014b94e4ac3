"""Command-line surface.

Subcommands:

* ``make-model``     build a seeded desk-scale network bundle
* ``make-calib``     build a seeded calibration container
* ``quantize``       run the calibration loop and write a quantized bundle
* ``dequantize``     expand a quantized bundle back to float32
* ``compare``        head-to-head against round-to-nearest and
                     prune-and-compensate at the same budget

Exit codes: 0 success, 2 malformed input (message carries the byte offset),
3 non-convergence (a partial trace is still written).

The CVXQ_THREADS environment variable caps BLAS parallelism; it must be set
before numpy loads, which is why this module defers its heavy imports.
"""

from __future__ import annotations

import argparse
import dataclasses
import os
import sys
from pathlib import Path

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_NOCONV = 3

_THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS")


def _cap_threads():
    cap = os.environ.get("CVXQ_THREADS")
    if cap:
        for var in _THREAD_VARS:
            os.environ.setdefault(var, cap)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cvxq",
        description="Post-training weight quantization with budgeted bit allocation")
    sub = parser.add_subparsers(dest="command", required=True)

    mk = sub.add_parser("make-model", help="write a seeded built-in network")
    mk.add_argument("--out", required=True)
    mk.add_argument("--widths", default="64,64,64,64",
                    help="comma-separated layer widths (default 64,64,64,64)")
    mk.add_argument("--seed", type=int, default=0)
    mk.add_argument("--dist", choices=("laplace", "gaussian"), default="laplace")
    mk.add_argument("--col-spread", type=float, default=1.5)
    mk.add_argument("--row-spread", type=float, default=1.0)
    mk.add_argument("--attention", action="store_true",
                    help="build the single-head attention model instead")
    mk.add_argument("--dim", type=int, default=8,
                    help="embedding width for --attention")
    mk.set_defaults(func=cmd_make_model)

    mc = sub.add_parser("make-calib", help="write a seeded calibration set")
    mc.add_argument("--out", required=True)
    mc.add_argument("--dim", type=int, required=True)
    mc.add_argument("--batches", type=int, default=16)
    mc.add_argument("--rows", type=int, default=64)
    mc.add_argument("--seed", type=int, default=1)
    mc.add_argument("--mean-scale", type=float, default=0.5)
    mc.set_defaults(func=cmd_make_calib)

    def add_run_flags(p):
        p.add_argument("--rate", type=float, required=True,
                       help="target average bits per weight")
        p.add_argument("--bmax", type=float, default=8.0)
        p.add_argument("--cluster-size", type=int, default=512)
        p.add_argument("--clusters-per-column", type=int, default=None)
        p.add_argument("--batch-size", type=int, default=16)
        p.add_argument("--tokens", type=int, default=17)
        p.add_argument("--max-iter", type=int, default=64)
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--ema-rate", type=float, default=0.1)
        p.add_argument("--dual-step", type=float, default=2.0)
        p.add_argument("--inner-steps", type=int, default=10)
        p.add_argument("--no-finetune", action="store_true")
        p.add_argument("--report-dir", default=None,
                       help="write CSV reports and PNG figures here")

    qz = sub.add_parser("quantize", help="quantize a bundle at a bit budget")
    qz.add_argument("bundle")
    qz.add_argument("calib")
    qz.add_argument("--out", required=True)
    qz.add_argument("--trace", default=None, help="iteration trace CSV path")
    add_run_flags(qz)
    qz.set_defaults(func=cmd_quantize)

    dq = sub.add_parser("dequantize", help="expand a quantized bundle to f32")
    dq.add_argument("quant")
    dq.add_argument("--out", required=True)
    dq.set_defaults(func=cmd_dequantize)

    cp = sub.add_parser("compare", help="compare against RTN and pruning")
    cp.add_argument("bundle")
    cp.add_argument("calib")
    cp.add_argument("--json", default=None, help="machine-readable report path")
    add_run_flags(cp)
    cp.set_defaults(func=cmd_compare)
    return parser


def _config_from_args(args):
    from .calib import CvxqConfig
    return CvxqConfig(target_rate=args.rate, max_bits=args.bmax,
                      batch_size=args.batch_size, tokens_per_seq=args.tokens,
                      cluster_size=args.cluster_size,
                      clusters_per_column=args.clusters_per_column,
                      max_iter=args.max_iter, inner_steps=args.inner_steps,
                      ema_rate=args.ema_rate, dual_step=args.dual_step,
                      seed=args.seed, finetune=not args.no_finetune)


def cmd_make_model(args) -> int:
    from . import formats, netmodel
    if args.attention:
        model = netmodel.build_attention_model(dim=args.dim, seed=args.seed)
    else:
        widths = tuple(int(w) for w in args.widths.split(","))
        model = netmodel.build_mlp(widths=widths, seed=args.seed,
                                   weight_dist=args.dist,
                                   col_spread=args.col_spread,
                                   row_spread=args.row_spread)
    formats.write_bundle(args.out, model)
    total = sum(w.size for w in model.weights.values())
    print(f"wrote {args.out}: {len(model.weight_names())} matrices, "
          f"{total} weights")
    return EXIT_OK


def cmd_make_calib(args) -> int:
    from . import formats, netmodel
    batches = netmodel.build_calibration(dim=args.dim, batches=args.batches,
                                         rows=args.rows, seed=args.seed,
                                         mean_scale=args.mean_scale)
    formats.write_calibration(args.out, batches)
    print(f"wrote {args.out}: {len(batches)} batches of "
          f"{batches[0].shape[0]}x{batches[0].shape[1]}")
    return EXIT_OK


def _write_reports(report_dir, stem, result):
    from . import report
    out = Path(report_dir)
    out.mkdir(parents=True, exist_ok=True)
    report.write_trace_csv(out / f"{stem}_trace.csv", result.trace)
    report.trace_figure(out / f"{stem}_trace.png", result.trace)
    report.bits_figure(out / f"{stem}_bits.png",
                       result.allocation.bits_int, result.config.target_rate)


def cmd_quantize(args) -> int:
    from . import calib, formats, report
    model = formats.read_bundle(args.bundle)
    batches = formats.read_calibration(args.calib)
    config = _config_from_args(args)
    try:
        result = calib.cvxq(model, batches, config)
    except calib.DivergenceError as exc:
        trace_path = args.trace or f"{args.out}.trace.csv"
        report.write_trace_csv(trace_path, exc.trace)
        print(f"error: {exc} (partial trace in {trace_path})", file=sys.stderr)
        return EXIT_NOCONV
    formats.write_quant(args.out, result)
    if args.trace:
        report.write_trace_csv(args.trace, result.trace)
    if args.report_dir:
        _write_reports(args.report_dir, Path(args.out).stem, result)
    overhead = calib.overhead_percent(result)
    zero_total = 100.0 * sum(c.codes.size for c in result.group_codes
                             if c.bits == 0) / result.total_weights()
    size = os.path.getsize(args.out)
    print(f"wrote {args.out} ({size} bytes)")
    print(f"  avg bits/weight       {result.avg_bits:.3f} payload, "
          f"{result.avg_bits * (1 + overhead / 100):.3f} with parameter overhead")
    print(f"  modeled distortion    {result.modeled_distortion:.6e}")
    print(f"  output MSE            {result.output_mse:.6e} "
          f"({result.output_mse_rel:.3e} relative)")
    print(f"  zero-level weights    {zero_total:.2f}%")
    if not result.allocation.converged:
        print("  warning: final allocation did not meet tolerance",
              file=sys.stderr)
        return EXIT_NOCONV
    return EXIT_OK


def cmd_dequantize(args) -> int:
    from . import formats
    content = formats.read_quant(args.quant)
    formats.write_bundle(args.out, content.model)
    print(f"wrote {args.out}: {content.model.provenance}, "
          f"{content.avg_bits:.3f} bits/weight")
    return EXIT_OK


def _pooled_mse(outputs, references):
    import math
    num = math.fsum(float(((a - b) ** 2).sum())
                    for a, b in zip(outputs, references))
    return num / sum(a.size for a in outputs)


def _rtn_bundle(model, bits):
    from .netmodel import substitute
    from .quant import rtn_quantize
    qweights = {nm: rtn_quantize(w.ravel(), bits).decode().reshape(w.shape)
                for nm, w in model.weights.items()}
    return substitute(model, qweights, provenance=f"rtn({bits})")


def _obs_bundle(model, batches, rate):
    """Prune to the same storage budget, compensating survivors.

    Survivors stay in float16, so a rate of r bits/weight keeps an r/16
    fraction of the weights. Each column is pruned under its layer's input
    second-moment matrix; candidates compete globally across columns.
    """
    import numpy as np
    from .netmodel import forward, substitute
    from .obs import QuadraticModel, prune_step

    total = sum(w.size for w in model.weights.values())
    keep = min(rate / 16.0, 1.0)
    prune_count = int(round(total * (1.0 - keep)))
    if prune_count <= 0:
        return substitute(model, provenance="pruned(0)"), 0

    moments = {nm: np.zeros((w.shape[0], w.shape[0]))
               for nm, w in model.weights.items()}
    rows_seen = 0
    for x in batches:
        _, inputs = forward(model, x)
        rows_seen += x.shape[0]
        for nm, xin in inputs.items():
            moments[nm] += xin.T @ xin
    curvatures = {nm: m / rows_seen for nm, m in moments.items()}

    entries = []  # per column: mutable pruning state
    for nm in model.weight_names():
        w = model.weights[nm]
        quad = QuadraticModel(curvatures[nm], w[:, 0])
        for col in range(w.shape[1]):
            entries.append({"name": nm, "col": col, "quad": quad,
                            "theta": w[:, col].copy(),
                            "support": set(range(w.shape[0]))})

    losses = np.empty(len(entries))
    steps = [None] * len(entries)

    def refresh(i):
        e = entries[i]
        if not e["support"]:
            losses[i] = np.inf
            steps[i] = None
            return
        step = prune_step(e["quad"], support=e["support"], theta=e["theta"])
        losses[i] = step.loss
        steps[i] = step

    for i in range(len(entries)):
        refresh(i)
    for _ in range(prune_count):
        i = int(np.argmin(losses))
        e, step = entries[i], steps[i]
        e["theta"] = e["theta"] + step.delta
        e["theta"][step.index] = 0.0
        e["support"].remove(step.index)
        refresh(i)

    pruned = {nm: w.copy() for nm, w in model.weights.items()}
    for e in entries:
        pruned[e["name"]][:, e["col"]] = e["theta"]
    return substitute(model, pruned,
                      provenance=f"pruned({prune_count})"), prune_count


def cmd_compare(args) -> int:
    from . import calib, formats, report
    from .netmodel import forward

    model = formats.read_bundle(args.bundle)
    batches = formats.read_calibration(args.calib)
    config = _config_from_args(args)
    originals = [forward(model, x)[0] for x in batches]
    total = sum(w.size for w in model.weights.values())

    result = calib.cvxq(model, batches, config)
    overhead = calib.overhead_percent(result)
    zero_total = 100.0 * sum(c.codes.size for c in result.group_codes
                             if c.bits == 0) / total
    rows = [{
        "method": "cvxq",
        "avg_bits": result.avg_bits * (1 + overhead / 100.0),
        "output_mse": result.output_mse,
        "zero_fraction_pct": zero_total,
    }]

    rtn_bits = max(1, int(round(config.target_rate)))
    rtn = _rtn_bundle(model, rtn_bits)
    rtn_mse = _pooled_mse([forward(rtn, x)[0] for x in batches], originals)
    rows.append({
        "method": "rtn",
        "avg_bits": rtn_bits + 32.0 * len(model.weight_names()) / total,
        "output_mse": rtn_mse,
        "zero_fraction_pct": 0.0,
    })

    pruned, prune_count = _obs_bundle(model, batches, config.target_rate)
    obs_mse = _pooled_mse([forward(pruned, x)[0] for x in batches], originals)
    rows.append({
        "method": "obs-prune",
        "avg_bits": 16.0 * (total - prune_count) / total,
        "output_mse": obs_mse,
        "zero_fraction_pct": 100.0 * prune_count / total,
    })

    print(report.compare_table(rows))
    config_dict = dataclasses.asdict(config)
    if args.json:
        with open(args.json, "w") as fh:
            fh.write(report.compare_json(rows, config_dict))
        print(f"wrote {args.json}")
    if args.report_dir:
        out = Path(args.report_dir)
        out.mkdir(parents=True, exist_ok=True)
        report.write_compare_csv(out / "compare.csv", rows)
        report.compare_figure(out / "compare.png", rows)
        _write_reports(args.report_dir, "quantize", result)
    return EXIT_OK


def main(argv=None) -> int:
    _cap_threads()
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except Exception as exc:
        from .formats import FormatError
        if isinstance(exc, FormatError):
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_INPUT
        raise


def console_main() -> None:
    sys.exit(main())


if __name__ == "__main__":
    console_main()
