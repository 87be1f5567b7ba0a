"""Figure rendering for sweep results.

The harness itself emits CSV only; these helpers draw one matplotlib figure
per experiment for the CLI's --plot-dir option, written next to the CSV.
"""

from __future__ import annotations

import os

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

from .harness import SweepResult  # noqa: E402


def _ok_rows(result: SweepResult) -> list[dict]:
    return [r for r in result.rows if r.get("R") is not None or
            r.get("predicted_kl_flat") is not None or
            r.get("achieved_bits") is not None]


def _save(fig, outdir: str, name: str) -> str:
    os.makedirs(outdir, exist_ok=True)
    path = os.path.join(outdir, name)
    fig.savefig(path, dpi=150, bbox_inches="tight")
    plt.close(fig)
    return path


def _plot_error_vs_bits(result: SweepResult, outdir: str) -> str:
    fig, ax = plt.subplots(figsize=(6, 4))
    groups: dict[tuple, list] = {}
    for r in _ok_rows(result):
        key = (r.get("scaling"), bool(r.get("compression")))
        groups.setdefault(key, []).append((r["achieved_bits"], r["scaled_R"]))
    for (scaling, comp), pts in sorted(groups.items(), key=str):
        pts.sort()
        label = f"{scaling}{' + compression' if comp else ''}"
        ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o", label=label)
    ax.set_xlabel("bits per parameter")
    ax.set_ylabel("R * 2^b")
    ax.set_title(f"error/size trade-off ({result.rows[0].get('distribution', '')})")
    ax.legend(fontsize=8)
    ax.grid(alpha=0.3)
    return _save(fig, outdir, "error_vs_bits.png")


def _plot_alpha_sweep(result: SweepResult, outdir: str) -> str:
    fig, ax = plt.subplots(figsize=(6, 4))
    alphas, errs = [], []
    for r in _ok_rows(result):
        if r.get("element") == "power_alpha" and r.get("alpha") is not None:
            alphas.append(r["alpha"])
            errs.append(r["R"])
        elif r.get("element") == "lloyd_max":
            ax.axhline(r["R"], color="k", ls="--", lw=1, label="Lloyd-Max")
        elif r.get("element") == "uniform_grid":
            ax.plot([0.0], [r["R"]], marker="s", color="tab:red",
                    label="uniform grid + compression")
    order = sorted(range(len(alphas)), key=lambda i: alphas[i])
    ax.plot([alphas[i] for i in order], [errs[i] for i in order], marker="o",
            label="p^alpha codebook")
    ax.set_xlabel("density exponent alpha")
    ax.set_ylabel("R")
    ax.set_title("power-density exponent sweep")
    ax.legend(fontsize=8)
    ax.grid(alpha=0.3)
    return _save(fig, outdir, "alpha_sweep.png")


def _plot_block_size(result: SweepResult, outdir: str) -> str:
    fig, ax = plt.subplots(figsize=(6, 4))
    groups: dict[tuple, list] = {}
    for r in _ok_rows(result):
        key = (r.get("scale_format"), r.get("target_bits"))
        groups.setdefault(key, []).append((r["block_size"], r["R"]))
    for (fmt, b), pts in sorted(groups.items(), key=str):
        pts.sort()
        ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o",
                label=f"{fmt}, b~{b}")
    ax.set_xscale("log", base=2)
    ax.set_xlabel("block size B")
    ax.set_ylabel("R")
    ax.set_title("absmax error vs block size")
    ax.legend(fontsize=8)
    ax.grid(alpha=0.3)
    return _save(fig, outdir, "block_size.png")


def _plot_compression(result: SweepResult, outdir: str) -> str:
    fig, ax = plt.subplots(figsize=(6, 4))
    rows = [r for r in _ok_rows(result) if r.get("achieved_bits") is not None]
    labels = [r["element"] for r in rows]
    ax.bar(range(len(rows)), [r["achieved_bits"] for r in rows], color="tab:blue")
    ax.set_xticks(range(len(rows)), labels, rotation=20, ha="right", fontsize=8)
    ax.set_ylabel("bits per element")
    ax.set_title("practical vs optimal compression")
    ax.grid(alpha=0.3, axis="y")
    return _save(fig, outdir, "compression.png")


def _plot_allocation(result: SweepResult, outdir: str) -> str:
    fig, ax = plt.subplots(figsize=(6, 4))
    rows = sorted(_ok_rows(result), key=lambda r: r["target_bits"])
    xs = [r["target_bits"] for r in rows]
    for key, label in [("predicted_kl_flat", "flat"),
                       ("predicted_kl_variable", "variable"),
                       ("predicted_kl_oracle", "quarter-bit oracle")]:
        ys = [r.get(key) for r in rows]
        if any(y is not None for y in ys):
            ax.plot(xs, ys, marker="o", label=label)
    ax.set_yscale("log")
    ax.set_xlabel("target bits per parameter")
    ax.set_ylabel("predicted KL (nats)")
    ax.set_title("flat vs Fisher-variable bit allocation")
    ax.legend(fontsize=8)
    ax.grid(alpha=0.3)
    return _save(fig, outdir, "allocation.png")


_RENDERERS = {
    "error-vs-bits": _plot_error_vs_bits,
    "alpha-sweep": _plot_alpha_sweep,
    "block-size": _plot_block_size,
    "compression": _plot_compression,
    "allocation": _plot_allocation,
}


def render_figures(result: SweepResult, outdir: str) -> list[str]:
    """Render the figure(s) for a sweep result; returns written paths."""
    renderer = _RENDERERS.get(result.experiment)
    if renderer is None or not result.rows:
        return []
    return [renderer(result, outdir)]
