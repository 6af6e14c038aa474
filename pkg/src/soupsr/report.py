"""Evaluation report files: JSON lines, CSV summaries and metric-vs-scale figures."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .errors import InsufficientDataError
from .metrics import paired_significance

METRICS = ("rmse", "psnr", "ssim")
BASELINE = "tricubic"


def _fmt(x):
    if x is None:
        return ""
    if isinstance(x, float) and math.isinf(x):
        return "inf" if x > 0 else "-inf"
    if isinstance(x, float) and math.isnan(x):
        return "nan"
    return repr(float(x)) if isinstance(x, float) else str(x)


def write_records(records, path):
    with open(path, "w") as f:
        for r in records:
            f.write(json.dumps(r.to_json_dict(), sort_keys=True) + "\n")


def read_records(path):
    from .metrics import MetricRecord

    out = []
    for line in Path(path).read_text().splitlines():
        d = json.loads(line)
        if d.get("psnr") == "inf":
            d["psnr"] = math.inf
        out.append(MetricRecord(**d))
    return out


def methods_and_scales(records):
    methods = list(dict.fromkeys(r.method for r in records))
    scales = sorted({r.scale for r in records})
    return methods, scales


def summarize(records):
    """Mean and population std per (method, scale) over volumes without errors."""
    methods, scales = methods_and_scales(records)
    rows = []
    for m in methods:
        for s in scales:
            cell = [r for r in records if r.method == m and r.scale == s]
            ok = [r for r in cell if r.error is None]
            row = {"method": m, "scale": s, "n": len(ok), "errors": len(cell) - len(ok)}
            for k in METRICS:
                vals = np.array([getattr(r, k) for r in ok], dtype=np.float64)
                if len(vals) == 0:
                    row[f"{k}_mean"] = row[f"{k}_std"] = None
                elif np.all(vals == vals[0]):
                    # covers all-inf PSNR cells without nan from inf - inf
                    row[f"{k}_mean"], row[f"{k}_std"] = float(vals[0]), 0.0
                else:
                    row[f"{k}_mean"], row[f"{k}_std"] = float(vals.mean()), float(vals.std())
            rows.append(row)
    return rows


def write_summary_csv(rows, path):
    fields = ["method", "scale", "n", "errors"] + [f"{k}_{p}" for k in METRICS for p in ("mean", "std")]
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=fields, lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: _fmt(v) for k, v in row.items()})


def significance_table(records, baseline=BASELINE, test="ttest"):
    """Every other method against the baseline, per scale and metric.

    Cells with fewer than two paired volumes are skipped.
    """
    methods, scales = methods_and_scales(records)
    out = []
    for m in methods:
        if m == baseline:
            continue
        for s in scales:
            for k in METRICS:
                try:
                    out.append(paired_significance(records, k, m, baseline, s, test=test))
                except InsufficientDataError:
                    continue
    return out


def write_significance_csv(results, path):
    fields = ["method_a", "method_b", "scale", "metric", "p_value", "stars", "mean_difference", "n"]
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=fields, lineterminator="\n")
        w.writeheader()
        for r in results:
            w.writerow({k: _fmt(v) for k, v in asdict(r).items()})


def plot_metrics(rows, significance, path):
    """Three panels (RMSE, PSNR, SSIM) against scale, one line per method.

    Significance stars of each method against the baseline are appended to
    the x tick labels, one row per compared method.
    """
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    methods = list(dict.fromkeys(r["method"] for r in rows))
    scales = sorted({r["scale"] for r in rows})
    titles = {"rmse": "RMSE", "psnr": "PSNR (dB)", "ssim": "SSIM"}
    fig, axes = plt.subplots(1, 3, figsize=(12, 3.6))
    for ax, k in zip(axes, METRICS):
        for m in methods:
            pts = [(r["scale"], r[f"{k}_mean"], r[f"{k}_std"]) for r in rows
                   if r["method"] == m and r[f"{k}_mean"] is not None and math.isfinite(r[f"{k}_mean"])]
            if pts:
                xs, ys, es = zip(*pts)
                ax.errorbar(xs, ys, yerr=es, marker="o", capsize=3, label=m)
        labels = []
        for s in scales:
            stars = [r.stars for r in significance if r.metric == k and r.scale == s]
            marks = "\n".join("" if st == "none" else st for st in stars)
            labels.append(f"{s:g}" + (f"\n{marks}" if marks.strip() else ""))
        ax.set_xticks(scales)
        ax.set_xticklabels(labels)
        ax.set_xlabel("sampling factor s")
        ax.set_title(titles[k])
        ax.grid(alpha=0.3)
    axes[0].legend(fontsize=8)
    fig.tight_layout()
    path = Path(path)
    # fixed metadata keeps repeated renders byte-identical
    meta = {"Date": None} if path.suffix == ".svg" else {"Software": None}
    with matplotlib.rc_context({"svg.hashsalt": "soupsr"}):
        fig.savefig(path, metadata=meta)
    plt.close(fig)
    return path


def write_report(records, out_dir, plot_format="png", test="ttest", plot=True):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = summarize(records)
    sig = significance_table(records, test=test)
    paths = {"records": out_dir / "records.jsonl", "summary": out_dir / "summary.csv",
             "significance": out_dir / "significance.csv"}
    write_records(records, paths["records"])
    write_summary_csv(rows, paths["summary"])
    write_significance_csv(sig, paths["significance"])
    if plot:
        paths["figure"] = plot_metrics(rows, sig, out_dir / f"metrics.{plot_format}")
    return paths
