"""Delimited reports and the figures rendered alongside them.

Every report path writes machine-readable CSV/JSON first and then renders a
matching PNG next to it, so runs can be audited without re-executing.
"""

from __future__ import annotations

import csv
import json

import matplotlib

matplotlib.use("Agg")  # file output only; no display server in sight

import matplotlib.pyplot as plt
import numpy as np

__all__ = [
    "write_trace_csv",
    "trace_figure",
    "bits_figure",
    "compare_table",
    "write_compare_csv",
    "compare_json",
    "compare_figure",
]

TRACE_FIELDS = ("iteration", "residual", "modeled_distortion",
                "output_mse", "output_mse_rel")
COMPARE_FIELDS = ("method", "avg_bits", "output_mse", "zero_fraction_pct")


def write_trace_csv(path, trace) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(TRACE_FIELDS)
        for row in trace:
            writer.writerow([row.iteration, repr(row.residual),
                             repr(row.modeled_distortion),
                             repr(row.output_mse), repr(row.output_mse_rel)])


def trace_figure(path, trace, title="quantization trace") -> None:
    iters = [row.iteration for row in trace]
    fig, (top, bottom) = plt.subplots(2, 1, sharex=True, figsize=(7, 6))
    top.semilogy(iters, [row.output_mse for row in trace],
                 marker="o", ms=3, label="output MSE")
    top.semilogy(iters, [row.modeled_distortion for row in trace],
                 marker="s", ms=3, label="modeled distortion")
    top.set_ylabel("distortion")
    top.legend(loc="best")
    top.set_title(title)
    bottom.semilogy(iters, [max(abs(row.residual), 1e-16) for row in trace],
                    marker=".", color="tab:red")
    bottom.set_ylabel("|budget residual| (bits/weight)")
    bottom.set_xlabel("iteration")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def bits_figure(path, bits_int, target_rate) -> None:
    bits = np.asarray(bits_int)
    top = int(bits.max(initial=0))
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.hist(bits, bins=np.arange(top + 2) - 0.5, rwidth=0.85,
            color="tab:blue")
    ax.axvline(target_rate, color="tab:red", ls="--",
               label=f"target {target_rate:g} bits")
    ax.set_xlabel("assigned bit depth")
    ax.set_ylabel("groups")
    ax.legend(loc="best")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def compare_table(rows) -> str:
    """Fixed-width text table; deterministic column alignment."""
    header = ("method", "avg bits", "output MSE", "zero %")
    body = [(r["method"], f"{r['avg_bits']:.3f}", f"{r['output_mse']:.6e}",
             f"{r['zero_fraction_pct']:.2f}") for r in rows]
    widths = [max(len(h), *(len(b[i]) for b in body))
              for i, h in enumerate(header)]
    lines = ["  ".join(h.ljust(widths[i]) for i, h in enumerate(header))]
    lines.append("  ".join("-" * w for w in widths))
    for b in body:
        lines.append("  ".join(b[i].ljust(widths[i]) for i in range(len(b))))
    return "\n".join(lines)


def write_compare_csv(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=COMPARE_FIELDS)
        writer.writeheader()
        for r in rows:
            writer.writerow({k: r[k] for k in COMPARE_FIELDS})


def compare_json(rows, config: dict) -> str:
    return json.dumps({"config": config, "rows": rows}, indent=2,
                      sort_keys=True)


def compare_figure(path, rows) -> None:
    methods = [r["method"] for r in rows]
    mses = [r["output_mse"] for r in rows]
    fig, ax = plt.subplots(figsize=(6, 4))
    bars = ax.bar(methods, mses, color=["tab:blue", "tab:orange", "tab:green"][:len(rows)])
    ax.set_yscale("log")
    ax.set_ylabel("calibration output MSE")
    for bar, r in zip(bars, rows):
        ax.annotate(f"{r['avg_bits']:.2f} b/w",
                    (bar.get_x() + bar.get_width() / 2, bar.get_height()),
                    ha="center", va="bottom", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
