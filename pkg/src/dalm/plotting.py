"""Report figures rendered to files (Agg backend, no display needed)."""
from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

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


def _smooth(values: np.ndarray, window: int) -> np.ndarray:
    if window <= 1 or len(values) < window:
        return values
    kernel = np.ones(window) / window
    return np.convolve(values, kernel, mode="valid")


def loss_curve(curves: Mapping[str, Sequence[dict]], path, window: int = 25) -> Path:
    """One line per stage; each row needs ``step`` and ``loss``."""
    fig, ax = plt.subplots(figsize=(7, 4))
    for name, rows in curves.items():
        if not rows:
            continue
        steps = np.array([r["step"] for r in rows])
        loss = np.array([r["loss"] for r in rows], dtype=float)
        sm = _smooth(loss, window)
        ax.plot(steps[len(steps) - len(sm):], sm, label=str(name))
    ax.set_xlabel("step")
    ax.set_ylabel("masked-diffusion loss")
    ax.set_yscale("log")
    ax.legend()
    return _save(fig, path)


def unmasking_heatmap(trace: Sequence[dict], answer_length: int, path, example: int = 0) -> Path:
    """Step at which each response position was finalised, shaded by confidence."""
    rows = [r for r in trace if r["example"] == example]
    steps = 1 + max((r["step"] for r in rows), default=0)
    grid = np.full((steps, answer_length), np.nan)
    for r in rows:
        if r["action"] == "unmask":
            grid[r["step"], r["position"]] = r["confidence"]
    fig, ax = plt.subplots(figsize=(max(4, answer_length / 4), max(3, steps / 4)))
    im = ax.imshow(grid, aspect="auto", cmap="viridis", vmin=0.0, vmax=1.0, interpolation="nearest")
    ax.set_xlabel("response position")
    ax.set_ylabel("denoising step")
    fig.colorbar(im, ax=ax, label="confidence at unmasking")
    return _save(fig, path)


def category_accuracy(per_category: Mapping[str, float], path, chance: float | None = None) -> Path:
    names = list(per_category)
    values = [100 * per_category[n] for n in names]
    fig, ax = plt.subplots(figsize=(7, 0.5 * len(names) + 1.5))
    ax.barh(names, values, color="tab:blue")
    if chance is not None:
        ax.axvline(100 * chance, color="tab:red", linestyle="--", label="chance")
        ax.legend()
    ax.set_xlim(0, 100)
    ax.set_xlabel("accuracy (%)")
    ax.invert_yaxis()
    return _save(fig, path)
