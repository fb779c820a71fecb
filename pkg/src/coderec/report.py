"""Report rendering: aligned text tables, tab-delimited files, JSON, and
matplotlib figures written next to the delimited output.
"""

from __future__ import annotations

import json
import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .evaluation import METRIC_NAMES, MetricReport  # noqa: E402


def format_table(headers, rows) -> str:
    """Aligned-column text table."""
    cells = [[str(h) for h in headers]] + [[str(c) for c in row] for row in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(headers))]
    lines = []
    for i, row in enumerate(cells):
        lines.append("  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip())
        if i == 0:
            lines.append("  ".join("-" * w for w in widths))
    return "\n".join(lines)


def write_tsv(path, headers, rows):
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\t".join(str(h) for h in headers) + "\n")
        for row in rows:
            fh.write("\t".join(str(c) for c in row) + "\n")


def metric_table(report: MetricReport):
    headers = ["metric"] + [f"@{k}" for k in report.ks]
    rows = [[m] + [f"{report.mean[m][k]:.4f}" for k in report.ks] for m in METRIC_NAMES]
    return headers, rows


def write_metric_report(outdir: str, report: MetricReport, prefix: str | None = None) -> dict:
    """Write JSON + TSV + a per-metric bar figure; returns the file paths."""
    os.makedirs(outdir, exist_ok=True)
    prefix = prefix or f"report_{report.protocol}_{report.variant.replace('-', '_')}"
    paths = {
        "json": os.path.join(outdir, f"{prefix}.json"),
        "tsv": os.path.join(outdir, f"{prefix}.tsv"),
        "txt": os.path.join(outdir, f"{prefix}.txt"),
        "png": os.path.join(outdir, f"{prefix}.png"),
    }
    with open(paths["json"], "w", encoding="utf-8") as fh:
        json.dump(report.to_json(), fh, indent=1, sort_keys=True)
    headers, rows = metric_table(report)
    write_tsv(paths["tsv"], headers, rows)
    title = (f"{report.variant} | protocol={report.protocol} | "
             f"{report.n_users} users ({report.n_skipped} skipped)")
    with open(paths["txt"], "w", encoding="utf-8") as fh:
        fh.write(title + "\n" + format_table(headers, rows) + "\n")

    fig, axes = plt.subplots(1, len(METRIC_NAMES), figsize=(3.2 * len(METRIC_NAMES), 3.0))
    for ax, metric in zip(axes, METRIC_NAMES):
        ks = list(report.ks)
        ax.bar([str(k) for k in ks], [report.mean[metric][k] for k in ks], color="#4878a8")
        ax.set_title(metric.upper())
        ax.set_xlabel("K")
        ax.set_ylim(0, 1)
        ax.grid(axis="y", alpha=0.3)
    fig.suptitle(title)
    fig.tight_layout()
    fig.savefig(paths["png"], dpi=110)
    plt.close(fig)
    return paths


def write_training_log(outdir: str, history: list) -> dict:
    """Loss trajectory as TSV plus a curve figure."""
    os.makedirs(outdir, exist_ok=True)
    entries = [h for h in history if "file_bpr" in h]
    keys = ["epoch", "total", "file_bpr", "project_bpr", "contrastive", "reg", "val_ndcg10"]
    rows = [[h.get(k, "") for k in keys] for h in entries]
    paths = {"tsv": os.path.join(outdir, "training_log.tsv"),
             "png": os.path.join(outdir, "loss_curve.png")}
    write_tsv(paths["tsv"], keys, rows)

    fig, ax = plt.subplots(figsize=(6.4, 3.6))
    epochs = [h["epoch"] for h in entries]
    ax.plot(epochs, [h["total"] for h in entries], label="total", color="#303030")
    ax.plot(epochs, [h["file_bpr"] for h in entries], label="file bpr", color="#4878a8")
    if any("val_ndcg10" in h for h in entries):
        ax2 = ax.twinx()
        pts = [(h["epoch"], h["val_ndcg10"]) for h in entries if "val_ndcg10" in h]
        ax2.plot([p[0] for p in pts], [p[1] for p in pts], label="val ndcg@10",
                 color="#a84848", linestyle="--")
        ax2.set_ylabel("val NDCG@10")
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.legend(loc="upper right")
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(paths["png"], dpi=110)
    plt.close(fig)
    return paths


def summary_table(summary: dict):
    headers = ["#Files", "#Users", "#Repos", "#Interactions", "Density"]
    rows = [[summary["n_files"], summary["n_users"], summary["n_repos"],
             summary["n_interactions"], f"{summary['density']:.3e}"]]
    return headers, rows


def write_dataset_summary(outdir: str, summary: dict) -> dict:
    os.makedirs(outdir, exist_ok=True)
    paths = {"json": os.path.join(outdir, "summary.json"),
             "tsv": os.path.join(outdir, "summary.tsv"),
             "png": os.path.join(outdir, "summary.png")}
    with open(paths["json"], "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=1, sort_keys=True)
    headers, rows = summary_table(summary)
    write_tsv(paths["tsv"], headers, rows)

    fig, ax = plt.subplots(figsize=(5.2, 3.2))
    labels = ["train", "val", "test"]
    ax.bar(labels, [summary["split_sizes"][k] for k in labels], color="#4878a8")
    ax.set_ylabel("interaction records")
    ax.set_title(f"{summary['n_users']} users / {summary['n_files']} files / "
                 f"{summary['n_repos']} repos")
    ax.grid(axis="y", alpha=0.3)
    fig.tight_layout()
    fig.savefig(paths["png"], dpi=110)
    plt.close(fig)
    return paths
