"""Multi-seed aggregation: CSV tables and self-contained SVG line plots.

No plotting dependency: plots are small hand-assembled SVG files viewable in
any browser.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

SUMMARY_COLUMNS = [
    "seed",
    "final_target_accuracy",
    "baseline_target_accuracy",
    "adaptation_gain",
    "pseudo_initial_accuracy",
    "pseudo_refined_accuracy",
    "easy_split_accuracy",
    "source_val_accuracy",
]


def report_row(report: dict) -> dict:
    quality = report["pseudo_label_quality"]
    easy = quality["after_split"]["within"].get("E", {})
    return {
        "seed": report["seed"],
        "final_target_accuracy": report["final_target_accuracy"],
        "baseline_target_accuracy": report.get("baseline_target_accuracy", ""),
        "adaptation_gain": report.get("adaptation_gain", ""),
        "pseudo_initial_accuracy": quality["initial"]["overall"],
        "pseudo_refined_accuracy": quality["after_refine"]["overall"],
        "easy_split_accuracy": easy.get("accuracy", ""),
        "source_val_accuracy": report["selftrain"]["source_val_accuracy"],
    }


def aggregate_reports(reports: list) -> dict:
    rows = [report_row(r) for r in reports]
    numeric = [c for c in SUMMARY_COLUMNS if c != "seed"]
    means = {}
    for col in numeric:
        vals = [row[col] for row in rows if row[col] != ""]
        means[col] = float(np.mean(vals)) if vals else None
    return {"rows": rows, "mean": means, "n_seeds": len(rows)}


def write_summary_csv(reports: list, path) -> None:
    agg = aggregate_reports(reports)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=SUMMARY_COLUMNS)
        writer.writeheader()
        for row in agg["rows"]:
            writer.writerow(row)
        mean_row = dict(agg["mean"])
        mean_row["seed"] = "mean"
        writer.writerow(mean_row)


def svg_line_plot(series: dict, path, title: str, xlabel: str = "epoch",
                  width: int = 640, height: int = 360) -> None:
    """Plot named float sequences as SVG polylines with a shared axis."""
    palette = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"]
    margin = 50
    plot_w, plot_h = width - 2 * margin, height - 2 * margin
    cleaned = {k: [v for v in vals if v is not None] for k, vals in series.items()}
    cleaned = {k: v for k, v in cleaned.items() if v}
    all_vals = [v for vals in cleaned.values() for v in vals]
    if not all_vals:
        raise ValueError("nothing to plot")
    lo, hi = min(all_vals), max(all_vals)
    if hi == lo:
        hi = lo + 1.0
    max_len = max(len(v) for v in cleaned.values())

    def sx(i):
        return margin + (i / max(1, max_len - 1)) * plot_w

    def sy(v):
        return margin + (1.0 - (v - lo) / (hi - lo)) * plot_h

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width/2}" y="20" text-anchor="middle" font-size="14">{title}</text>',
        f'<line x1="{margin}" y1="{margin}" x2="{margin}" y2="{height-margin}" stroke="black"/>',
        f'<line x1="{margin}" y1="{height-margin}" x2="{width-margin}" y2="{height-margin}" stroke="black"/>',
        f'<text x="{width/2}" y="{height-10}" text-anchor="middle" font-size="11">{xlabel}</text>',
        f'<text x="12" y="{margin}" font-size="11">{hi:.3g}</text>',
        f'<text x="12" y="{height-margin}" font-size="11">{lo:.3g}</text>',
    ]
    for idx, (name, vals) in enumerate(cleaned.items()):
        color = palette[idx % len(palette)]
        pts = " ".join(f"{sx(i):.1f},{sy(v):.1f}" for i, v in enumerate(vals))
        parts.append(f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="1.5"/>')
        ly = margin + 16 * idx
        parts.append(f'<rect x="{width-margin-130}" y="{ly-9}" width="10" height="10" fill="{color}"/>')
        parts.append(f'<text x="{width-margin-115}" y="{ly}" font-size="11">{name}</text>')
    parts.append("</svg>")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(parts))


def collect_run_reports(out_dir) -> list:
    reports = []
    for path in sorted(Path(out_dir).glob("seed_*/run_report.json")):
        reports.append(json.loads(path.read_text()))
    return reports


def write_report_bundle(out_dir, reports: list | None = None) -> dict:
    """Aggregate CSV plus metric plots for every seed found under out_dir."""
    out = Path(out_dir)
    if reports is None:
        reports = collect_run_reports(out)
    if not reports:
        raise ValueError(f"no run reports found under {out}")
    write_summary_csv(reports, out / "summary.csv")

    acc_series = {}
    loss_series = {}
    for rep in reports:
        tag = f"seed {rep['seed']}"
        epochs = rep["selftrain"]["epochs"]
        accs = [e.get("target_accuracy") for e in epochs]
        if any(a is not None for a in accs):
            acc_series[tag] = accs
        loss_series[f"{tag} src"] = [e["loss_source"] for e in epochs]
        loss_series[f"{tag} tgt"] = [e["loss_target"] for e in epochs]
    if acc_series:
        svg_line_plot(acc_series, out / "target_accuracy.svg",
                      "Target accuracy during self-training")
    svg_line_plot(loss_series, out / "selftrain_losses.svg", "Self-training losses")
    agg = aggregate_reports(reports)
    (out / "summary.json").write_text(json.dumps(agg, indent=2, sort_keys=True) + "\n")
    return agg
