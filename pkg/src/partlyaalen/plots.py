"""Optional figures for the command line (matplotlib, non-interactive backend)."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import numpy as np


def _pyplot():
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    return plt


def _save(fig, path: Path) -> Path:
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    _pyplot().close(fig)
    return path


def step_paths(path: Path, times, values, se=None, labels: Sequence[str] = (),
               title: str = "") -> Path:
    """One panel per column: a right-continuous step path with pointwise 95% bands."""
    plt = _pyplot()
    times = np.asarray(times, float)
    values = np.asarray(values, float).reshape(len(times), -1)
    r = values.shape[1]
    fig, axes = plt.subplots(1, r, figsize=(3.2 * r, 3.0), squeeze=False)
    for j, ax in enumerate(axes[0]):
        ax.step(times, values[:, j], where="post", color="k", lw=1)
        if se is not None:
            s = np.asarray(se, float).reshape(len(times), -1)[:, j]
            for sign in (-1, 1):
                ax.step(times, values[:, j] + sign * 1.96 * s, where="post", color="0.5", lw=0.7, ls="--")
        ax.set_xlabel("t")
        ax.set_title(labels[j] if j < len(labels) else f"column {j + 1}")
    if title:
        fig.suptitle(title)
    return _save(fig, path)


def monitoring(path: Path, times, R, band=None, j: int = 1) -> Path:
    """Monitoring process with an optional +-band (for instance the KS critical value)."""
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(5, 3))
    ax.step(times, R, where="post", color="k", lw=1)
    ax.axhline(0.0, color="0.6", lw=0.6)
    if band is not None:
        ax.axhline(band, color="tab:red", ls="--", lw=0.8)
        ax.axhline(-band, color="tab:red", ls="--", lw=0.8)
    ax.set_xlabel("t")
    ax.set_ylabel(f"R_{j}(t)")
    return _save(fig, path)


def curve(path: Path, x, y, xlabel: str, ylabel: str) -> Path:
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(5, 3))
    ax.plot(x, y, color="k", lw=1)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    return _save(fig, path)


def loglog(path: Path, K, err) -> Path:
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(5, 3))
    ax.loglog(K, err, "o-", color="k", lw=1)
    ax.set_xlabel("K")
    ax.set_ylabel("relative error")
    return _save(fig, path)
