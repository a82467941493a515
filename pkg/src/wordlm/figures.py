"""Matplotlib figure rendering for training logs, eval reports, and cost curves.

Every function writes a PNG to a path and returns that path; nothing is shown
interactively (Agg backend, safe for headless runs).
"""

from __future__ import annotations

import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .costmodel import KINDS, CostModelParams, training_speedup
from .errors import ConfigError


def _finish(fig, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def training_curves(metrics_path: str | Path, out_path: str | Path) -> Path:
    """Loss and validation accuracy curves from a metrics.jsonl file."""
    metrics_path = Path(metrics_path)
    if not metrics_path.exists():
        raise ConfigError(f"metrics log not found: {metrics_path}")
    entries = [json.loads(line) for line in metrics_path.read_text().splitlines() if line.strip()]
    if not entries:
        raise ConfigError(f"metrics log is empty: {metrics_path}")
    epochs = [e["epoch"] for e in entries]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.5))
    ax1.plot(epochs, [e["train_loss"] for e in entries], marker="o", color="tab:red")
    ax1.set_xlabel("epoch")
    ax1.set_ylabel("train loss")
    ax1.grid(alpha=0.3)
    ax2.plot(
        epochs,
        [e.get("val_word_acc") for e in entries],
        marker="o",
        label="word acc",
        color="tab:blue",
    )
    ax2.plot(
        epochs,
        [e.get("val_char_acc") for e in entries],
        marker="s",
        label="char acc",
        color="tab:green",
    )
    ax2.set_xlabel("epoch")
    ax2.set_ylabel("validation accuracy (%)")
    ax2.set_ylim(0, 100)
    ax2.legend()
    ax2.grid(alpha=0.3)
    return _finish(fig, out_path)


def accuracy_bars(report: dict, out_path: str | Path) -> Path:
    """Bar chart of one evaluation report's accuracy metrics."""
    keys = [
        ("word_acc", "word"),
        ("char_acc", "char"),
        ("rare_acc", "rare"),
        ("freq_acc", "frequent"),
        ("eacc", "EAcc"),
    ]
    pairs = [(label, report[k]) for k, label in keys if report.get(k) is not None]
    if not pairs:
        raise ConfigError("report contains no plottable accuracy fields")
    labels, values = zip(*pairs)
    fig, ax = plt.subplots(figsize=(1.2 * len(pairs) + 2, 3.5))
    bars = ax.bar(labels, values, color="tab:blue")
    ax.bar_label(bars, fmt="%.1f")
    ax.set_ylim(0, 105)
    ax.set_ylabel("accuracy (%)")
    ax.grid(axis="y", alpha=0.3)
    return _finish(fig, out_path)


def speedup_curves(p: CostModelParams, out_path: str | Path) -> Path:
    """Training speed-up vs context length for each tokenizer kind."""
    ts = np.linspace(max(8.0, p.c), max(4 * p.T, 256), 200)
    fig, ax = plt.subplots(figsize=(5.5, 3.8))
    for kind in KINDS:
        ys = [
            training_speedup(
                kind,
                CostModelParams(
                    M=p.M, L=p.L, D=p.D, T=int(t), N_corpus=p.N_corpus, c=p.c, s=p.s, t=p.t
                ),
            )
            for t in ts
        ]
        ax.plot(ts, ys, label=kind)
    ax.axvline(p.T, color="gray", linestyle=":", alpha=0.7)
    ax.set_xlabel("context length T (chars)")
    ax.set_ylabel("training speed-up vs base")
    ax.legend()
    ax.grid(alpha=0.3)
    return _finish(fig, out_path)
