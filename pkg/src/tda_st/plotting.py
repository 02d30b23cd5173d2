"""Figures written next to the tab-separated reports."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

_RC = {
    "figure.figsize": (7.0, 4.2),
    "axes.grid": True,
    "grid.alpha": 0.3,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "legend.frameon": False,
    "savefig.dpi": 120,
}
# PNG metadata otherwise carries the matplotlib version string
_META = {"Software": None}


def _save(fig, path) -> Path:
    path = Path(path)
    fig.tight_layout()
    fig.savefig(path, metadata=_META)
    plt.close(fig)
    return path


def plot_metric_log(rows: Sequence[tuple], path, title: str = "") -> Path:
    """Dev curves from ``(step, nll_A, nll_B, kl_fwd, kl_bwd, total)`` rows."""
    steps = [r[0] for r in rows]
    with plt.rc_context(_RC):
        fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(10, 4))
        ax1.plot(steps, [r[1] for r in rows], label="nll A (ASR-MT)")
        ax1.plot(steps, [r[2] for r in rows], label="nll B (ST-BT)")
        ax1.plot(steps, [r[5] for r in rows], "k--", label="total")
        ax1.set_xlabel("step")
        ax1.set_ylabel("per-token loss")
        ax1.legend()
        ax2.plot(steps, [r[3] for r in rows], label="KL fwd")
        ax2.plot(steps, [r[4] for r in rows], label="KL bwd")
        ax2.set_xlabel("step")
        ax2.set_ylabel("per-token KL")
        ax2.set_yscale("symlog", linthresh=1e-3)
        ax2.legend()
        if title:
            fig.suptitle(title)
        return _save(fig, path)


def plot_agreement(report, path, title: str = "") -> Path:
    """Histogram of per-example KL (both directions) from an agreement report."""
    recs = report.records
    per_tok_f = [r.kl_fwd / max(r.n_content, 1) for r in recs]
    per_tok_b = [r.kl_bwd / max(r.n_content, 1) for r in recs]
    with plt.rc_context(_RC):
        fig, ax = plt.subplots()
        ax.hist([per_tok_f, per_tok_b], bins=30, label=["KL fwd", "KL bwd"])
        ax.set_xlabel("per-token KL between paths")
        ax.set_ylabel("examples")
        ax.legend()
        ax.set_title(title or f"mean fwd {report.kl_fwd:.4f}, bwd {report.kl_bwd:.4f}")
        return _save(fig, path)


def plot_lambda_sweep(summary: Sequence[dict], path) -> Path:
    """Mean (and per-seed) KL / BLEU / WER against lambda."""
    lams = sorted({row["lambda"] for row in summary})
    metrics = [("dev_kl", "dev KL (fwd+bwd) / token"), ("test_bleu", "test ST BLEU"), ("test_wer", "test ASR WER")]
    with plt.rc_context(_RC):
        fig, axes = plt.subplots(1, 3, figsize=(12, 3.8))
        for ax, (key, label) in zip(axes, metrics):
            for seed in sorted({row["seed"] for row in summary}):
                pts = sorted((row["lambda"], row[key]) for row in summary if row["seed"] == seed)
                ax.plot([p[0] for p in pts], [p[1] for p in pts], "o-", alpha=0.35, label=f"seed {seed}")
            means = [sum(r[key] for r in summary if r["lambda"] == lam) /
                     max(1, sum(1 for r in summary if r["lambda"] == lam)) for lam in lams]
            ax.plot(lams, means, "ks-", label="mean")
            ax.set_xlabel("lambda")
            ax.set_ylabel(label)
            if len(lams) > 2 and min(lams) > 0:
                ax.set_xscale("log")
        axes[0].legend(fontsize=8)
        return _save(fig, path)
