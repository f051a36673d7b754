"""Report figures: error CDFs, training curves, prediction scatter.

All rendering uses the Agg backend so the CLI can run headless; every
function writes a file and returns its path.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

from .errors import ValidationError


def plot_cdf(reports: dict, path):
    """Overlay error CDFs of several reports on one axis.

    Args:
        reports: mapping label -> EvalReport.
        path: output image file (extension picks the format).
    """
    if not reports:
        raise ValidationError("no reports to plot")
    fig, ax = plt.subplots(figsize=(5.0, 3.5))
    for label, report in reports.items():
        xs = [e for e, _ in report.cdf]
        ys = [f for _, f in report.cdf]
        ax.step([0.0] + xs, [0.0] + ys, where="post",
                label=f"{label} (MED {report.med:.3f} m)")
    ax.set_xlabel("localization error [m]")
    ax.set_ylabel("cumulative fraction")
    ax.set_ylim(0.0, 1.02)
    ax.grid(True, alpha=0.3)
    ax.legend(loc="lower right", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path


def plot_losses(train_report, path):
    """Per-epoch loss trajectories of one training run."""
    fig, ax = plt.subplots(figsize=(5.0, 3.5))
    epochs = range(1, len(train_report.l_total) + 1)
    for name, series in (
        ("total", train_report.l_total),
        ("prediction", train_report.l_pre),
        ("marginal", train_report.l_m),
        ("conditional", train_report.l_c),
        ("discrepancy", train_report.l_dis),
    ):
        if any(v != 0.0 for v in series) or name == "total":
            ax.plot(list(epochs), series, label=name, linewidth=1.2)
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.grid(True, alpha=0.3)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path


def plot_scatter(preds, truths, path):
    """Predicted vs. true positions with error segments."""
    fig, ax = plt.subplots(figsize=(4.5, 4.5))
    for (px, py), (tx, ty) in zip(preds, truths):
        ax.plot([tx, px], [ty, py], color="0.7", linewidth=0.6, zorder=1)
    ax.scatter([t[0] for t in truths], [t[1] for t in truths],
               marker="s", s=25, label="true", zorder=2)
    ax.scatter([p[0] for p in preds], [p[1] for p in preds],
               marker="x", s=20, label="predicted", zorder=3)
    ax.set_xlabel("x [m]")
    ax.set_ylabel("y [m]")
    ax.set_aspect("equal")
    ax.grid(True, alpha=0.3)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path
