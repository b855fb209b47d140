"""Figures written next to the CSV/JSON outputs."""

from __future__ import annotations

import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "font.size": 9,
    "legend.fontsize": 8,
    "figure.dpi": 120,
}
FORMATS = ("png", "svg")


def _save(fig, stem) -> list[Path]:
    stem = Path(stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    paths = []
    for ext in FORMATS:
        p = stem.with_suffix("." + ext)
        fig.savefig(p, bbox_inches="tight")
        paths.append(p)
    plt.close(fig)
    return paths


def plot_ablation(rows: list, summary: list, stem) -> list[Path]:
    """PSNR per variant: one marker per seed, line through the medians."""
    names = [s["variant"] for s in summary]
    x = np.arange(len(names))
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5.5, 3.2))
        for i, name in enumerate(names):
            ps = [r["psnr"] for r in rows if r["variant"] == name and r["status"] == "ok"]
            ax.scatter(np.full(len(ps), i), ps, s=14, color="0.55", zorder=2)
        med = [s["psnr_median"] for s in summary]
        ax.plot(x, med, "-o", color="C0", label="median over seeds", zorder=3)
        hazy = [r["hazy_psnr"] for r in rows if r["status"] == "ok"]
        if hazy:
            ax.axhline(float(np.mean(hazy)), color="C3", ls="--", lw=1, label="hazy input")
        ax.set_xticks(x, names, rotation=20)
        ax.set_ylabel("PSNR on held-out domain (dB)")
        ax.legend(loc="lower right")
        return _save(fig, stem)


def plot_metrics(metrics_path, stem) -> list[Path]:
    """Loss curves from a metrics.jsonl file."""
    recs = [json.loads(line) for line in Path(metrics_path).read_text().splitlines() if line.strip()]
    if not recs:
        return []
    steps = np.array([r["step"] for r in recs])
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(2, 3, figsize=(8, 4.2), sharex=True)
        for ax, key in zip(axes.flat, ("total", "pixel", "ssim", "cr", "ce", "dcr")):
            v = np.array([r[key] for r in recs])
            ax.plot(steps, v, lw=0.5, color="0.7")
            w = min(50, len(v))
            if w > 1:
                smooth = np.convolve(v, np.ones(w) / w, mode="valid")
                ax.plot(steps[w - 1:], smooth, lw=1.2, color="C0")
            ax.set_title(key)
        for ax in axes[-1]:
            ax.set_xlabel("step")
        fig.tight_layout()
        return _save(fig, stem)


def plot_eval(report: dict, stem) -> list[Path]:
    """Bar chart of hazy vs dehazed PSNR and dark-channel mean per domain."""
    doms = sorted(report["domains"], key=int)
    d = report["domains"]
    x = np.arange(len(doms))
    with plt.rc_context(STYLE):
        fig, (a1, a2) = plt.subplots(1, 2, figsize=(7, 2.8))
        a1.bar(x - 0.2, [d[k]["hazy_psnr_mean"] for k in doms], 0.4, label="hazy", color="0.6")
        a1.bar(x + 0.2, [d[k]["psnr_mean"] for k in doms], 0.4, label="dehazed", color="C0")
        a1.set_ylabel("PSNR (dB)")
        a2.bar(x - 0.27, [d[k]["hazy_dark_channel_mean"] for k in doms], 0.27, label="hazy", color="0.6")
        a2.bar(x, [d[k]["dark_channel_mean"] for k in doms], 0.27, label="dehazed", color="C0")
        a2.bar(x + 0.27, [d[k]["clear_dark_channel_mean"] for k in doms], 0.27, label="clear", color="C2")
        a2.set_ylabel("dark-channel mean")
        for ax in (a1, a2):
            ax.set_xticks(x, [f"domain {k}" for k in doms])
            ax.legend()
        fig.tight_layout()
        return _save(fig, stem)
