"""Matplotlib figure output rendered next to the delimited report files."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def save_loss_curve(history, path) -> Path:
    """Training (and validation, when present) NLL per epoch."""
    path = Path(path)
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(history.epochs, history.train_nll, label="train", color="tab:blue")
    if any(v is not None for v in history.val_nll):
        ax.plot(history.epochs, history.val_nll, label="validation", color="tab:orange")
    ax.set_xlabel("epoch")
    ax.set_ylabel("sequence NLL")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def save_ssim_curves(report, out_dir) -> list:
    """Per-slice mean SSIM vs slice index, one figure per context count plus
    a combined figure; context positions are marked."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []

    for n in report.context_counts:
        rows = report.curve(n)
        ks = [r[0] for r in rows]
        vals = [r[1] for r in rows]
        fig, ax = plt.subplots(figsize=(6, 4))
        ax.plot(ks, vals, color="tab:blue")
        for ctx in report.schedules.get(n, []):
            ax.axvline(ctx, color="tab:red", linestyle="--", linewidth=0.8, alpha=0.7)
        ax.set_xlabel("slice index")
        ax.set_ylabel("mean SSIM")
        ax.set_title(f"{n} context slice{'s' if n != 1 else ''}")
        ax.set_ylim(0.0, 1.0)
        fig.tight_layout()
        path = out_dir / f"ssim_curve_ctx{n}.png"
        fig.savefig(path, dpi=120)
        plt.close(fig)
        paths.append(path)

    fig, ax = plt.subplots(figsize=(7, 4.5))
    for n in report.context_counts:
        rows = report.curve(n)
        ax.plot([r[0] for r in rows], [r[1] for r in rows], label=f"{n} contexts")
    ax.set_xlabel("slice index")
    ax.set_ylabel("mean SSIM")
    ax.set_ylim(0.0, 1.0)
    ax.legend()
    fig.tight_layout()
    combined = out_dir / "ssim_curves.png"
    fig.savefig(combined, dpi=120)
    plt.close(fig)
    paths.append(combined)
    return paths
