"""PNG figures written next to the CSV/JSON outputs."""
import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "figure.dpi": 110,
}

MODE_COLORS = {"sync": "#1b6ca8", "hybrid_raw": "#8fb339", "hybrid_opt": "#2a9d3c", "async": "#d1495b"}


def _save(fig, out_dir, name):
    path = os.path.join(out_dir, name)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def plot_run(metrics, out_dir):
    """Loss/AUC traces and the staleness histogram of one run; returns file paths."""
    paths = []
    with plt.rc_context(STYLE):
        fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(8, 3))
        rows = [r for r in metrics.rows if r["loss"] is not None]
        color = MODE_COLORS.get(metrics.mode, "k")
        ax1.plot([r["step"] for r in rows], [r["loss"] for r in rows], lw=0.8, color=color)
        ax1.set_xlabel("step")
        ax1.set_ylabel("training loss")
        if metrics.auc_trace:
            s, a = zip(*metrics.auc_trace)
            ax2.plot(s, a, marker="o", ms=3, lw=1, color=color)
        ax2.set_xlabel("step")
        ax2.set_ylabel("held-out AUC")
        fig.suptitle(f"{metrics.mode} ({metrics.status})")
        paths.append(_save(fig, out_dir, "training.png"))

        fig, ax = plt.subplots(figsize=(4, 3))
        hist = metrics.staleness.hist if metrics.staleness is not None else np.zeros(1)
        ax.bar(np.arange(len(hist)), hist, color=color)
        ax.set_yscale("log" if hist.max(initial=0) > 0 else "linear")
        ax.set_xlabel("delay (updates between read and write)")
        ax.set_ylabel("embedding reads")
        paths.append(_save(fig, out_dir, "staleness.png"))
    return paths


def plot_comparison(report, out_dir):
    """AUC traces and throughput per mode; returns file paths."""
    paths = []
    with plt.rc_context(STYLE):
        fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(8, 3))
        modes = list(report.runs)
        for mode, run in report.runs.items():
            if run.auc_trace:
                s, a = zip(*run.auc_trace)
                ax1.plot(s, a, marker="o", ms=2, lw=1, label=mode, color=MODE_COLORS.get(mode))
        ax1.set_xlabel("step")
        ax1.set_ylabel("held-out AUC")
        ax1.legend(frameon=False)
        tp = [report.runs[m].samples_per_sec for m in modes]
        ax2.bar(modes, tp, color=[MODE_COLORS.get(m, "0.5") for m in modes])
        ax2.set_ylabel("samples / s (cluster model)")
        paths.append(_save(fig, out_dir, "comparison.png"))
    return paths
