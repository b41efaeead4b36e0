"""Figures written next to the JSON/CSV outputs."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_tre(report, path) -> Path:
    """Per-landmark TRE before and after registration, sorted by initial error."""
    init = np.asarray(report.initial_per_landmark)
    post = np.asarray(report.per_landmark)
    order = np.argsort(init)
    fig, ax = plt.subplots(figsize=(7, 3.5))
    idx = np.arange(len(init))
    ax.plot(idx, init[order], "o", ms=3, color="0.6", label=f"initial ({report.initial_mean:.2f} mm)")
    ax.plot(idx, post[order], "o", ms=3, color="C0", label=f"{report.mode} ({report.mean:.2f} mm)")
    ax.set_xlabel("landmark (sorted by initial error)")
    ax.set_ylabel("TRE [mm]")
    ax.set_title(f"EI -> {report.scenario}")
    ax.legend(frameon=False)
    return _save(fig, path)


def plot_training_log(rows, path) -> Path:
    rows = list(rows)
    ep = np.array([r[0] for r in rows], dtype=float)
    loss = np.array([r[1] for r in rows], dtype=float)
    val = [(r[0], r[5]) for r in rows if r[5] != "" and r[5] is not None]
    fig, ax = plt.subplots(figsize=(7, 3.5))
    ax.plot(ep, loss, lw=0.8, color="C0")
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss", color="C0")
    if val:
        ax2 = ax.twinx()
        ve, vv = zip(*val)
        ax2.plot(ve, np.asarray(vv, dtype=float), "-o", ms=2, color="C3")
        ax2.set_ylabel("validation TRE [mm]", color="C3")
    return _save(fig, path)


def plot_ablation(table, path) -> Path:
    scen = table["scenarios"]
    var = table["variants"]
    fig, ax = plt.subplots(figsize=(7, 3.5))
    w = 0.8 / len(var)
    for i, v in enumerate(var):
        keys = [f"{s}/{v}" for s in scen]
        m = [table["rows"]["mean"].get(k, np.nan) for k in keys]
        sd = [table["rows"]["std"].get(k, np.nan) for k in keys]
        ax.bar(np.arange(len(scen)) + (i - (len(var) - 1) / 2) * w, m, w, yerr=sd, capsize=3, label=v)
    ax.set_xticks(np.arange(len(scen)))
    ax.set_xticklabels([f"EI -> {s}" for s in scen])
    ax.set_ylabel("TRE [mm]")
    ax.legend(frameon=False)
    return _save(fig, path)


def plot_phantom(dataset, path) -> Path:
    """Coronal mid-slices at end-exhale and end-inhale plus the surrogate loop."""
    ee, ei = dataset.by_phase("EE"), dataset.by_phase("EI")
    fig, axes = plt.subplots(1, 3, figsize=(10, 3.4))
    j = ee.image.dims[1] // 2
    for ax, f in zip(axes[:2], (ee, ei)):
        ax.imshow(f.image.data[:, j, :].T, origin="lower", cmap="gray")
        ax.set_title(f.phase)
        ax.set_xticks([])
        ax.set_yticks([])
    s = dataset.surrogates()
    order = np.argsort(dataset.times())
    loop = np.append(order, order[0])
    axes[2].plot(s[loop, 0], s[loop, 1], "-o", ms=3)
    for f in dataset.frames:
        axes[2].annotate(f.phase, (f.volume_norm, f.flow), fontsize=6)
    axes[2].set_xlabel("volume")
    axes[2].set_ylabel("flow [1/s]")
    return _save(fig, path)
