"""Attention-trace frames and report figures.

Frames are drawn with Pillow so every pixel is under our control; report
figures go through matplotlib's object API (no pyplot state).  Both write
PNGs without timestamps, so identical inputs give identical bytes.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from matplotlib.backends.backend_agg import FigureCanvasAgg
from matplotlib.figure import Figure
from matplotlib.patches import Rectangle
from PIL import Image, ImageDraw

from .attention import window_box

RED = (220, 30, 30)
FRAME_SCALE = 8
PNG_METADATA = {"Software": None}


def _to_uint8(image: np.ndarray) -> np.ndarray:
    return np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)


def render_frame(image: np.ndarray, box: tuple[float, float, float, float], scale: int = FRAME_SCALE) -> np.ndarray:
    """Upscaled greyscale image promoted to RGB with ``box`` (left, top,
    right, bottom in pixel-centre coordinates) outlined in red."""
    grey = Image.fromarray(_to_uint8(image), mode="L")
    S = image.shape[0]
    canvas = grey.resize((S * scale, S * scale), Image.NEAREST).convert("RGB")
    left, top, right, bottom = ((v + 0.5) * scale for v in box)
    hi = S * scale - 1
    clipped = [min(max(v, 0.0), hi) for v in (left, top, right, bottom)]
    ImageDraw.Draw(canvas).rectangle([round(v) for v in clipped], outline=RED, width=max(1, scale // 4))
    return np.asarray(canvas)


def save_png(array: np.ndarray, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(array).save(path, format="PNG", optimize=False)
    return path


def write_frames(images: list[np.ndarray], windows: np.ndarray, N: int, out_dir,
                 probe_scores: list[float] | None = None) -> list[Path]:
    """One ``step_XX.png`` per step plus ``trace.tsv``.

    ``windows`` is (T, 7) rows (x_hat, y_hat, delta_hat, x, y, delta,
    gamma); ``images[t]`` is the image glimpsed at step t.  Numbers in the
    sidecar are ``repr`` of the trace values so they round-trip exactly."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    lines = ["t\timage\tx\ty\tdelta\tgamma\tprobe"]
    for t, (img, row) in enumerate(zip(images, windows)):
        x, y, delta, gamma = (float(v) for v in row[3:7])
        paths.append(save_png(render_frame(img, window_box(x, y, delta, gamma, N)), out_dir / f"step_{t:02d}.png"))
        probe = probe_scores[t] if probe_scores is not None else float("nan")
        lines.append("\t".join([str(t), "ab"[t % 2], repr(x), repr(y), repr(delta), repr(gamma), repr(float(probe))]))
    (out_dir / "trace.tsv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    return paths


def read_trace(path) -> list[dict]:
    rows = Path(path).read_text(encoding="utf-8").splitlines()
    header = rows[0].split("\t")
    out = []
    for line in rows[1:]:
        values = line.split("\t")
        rec = dict(zip(header, values))
        out.append({"t": int(rec["t"]), "image": rec["image"],
                    **{k: float(rec[k]) for k in ("x", "y", "delta", "gamma", "probe")}})
    return out


def _save_figure(fig: Figure, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    FigureCanvasAgg(fig)
    fig.savefig(path, format="png", dpi=100, metadata=PNG_METADATA)
    return path


def plot_trace_grid(images: list[np.ndarray], windows: np.ndarray, N: int, path,
                    probe_scores: list[float] | None = None) -> Path:
    """Two rows of panels, first image on top, one column per glimpse."""
    T = len(images)
    cols = (T + 1) // 2
    fig = Figure(figsize=(1.4 * cols, 3.0))
    axes = fig.subplots(2, cols, squeeze=False)
    for ax in axes.flat:
        ax.set_axis_off()
    for t in range(T):
        ax = axes[t % 2, t // 2]
        ax.imshow(images[t], cmap="gray", vmin=0.0, vmax=1.0, interpolation="nearest")
        x, y, delta, gamma = (float(v) for v in windows[t][3:7])
        left, top, right, bottom = window_box(x, y, delta, gamma, N)
        ax.add_patch(Rectangle((left, top), right - left, bottom - top, fill=False, edgecolor="red", linewidth=1.2))
        S = images[t].shape[0]
        ax.set_xlim(-0.5, S - 0.5)
        ax.set_ylim(S - 0.5, -0.5)
        title = f"t={t}"
        if probe_scores is not None and np.isfinite(probe_scores[t]):
            title += f" p={probe_scores[t]:.2f}"
        ax.set_title(title, fontsize=7)
    fig.tight_layout()
    return _save_figure(fig, path)


def plot_probe_accuracy(accuracies, path) -> Path:
    acc = np.asarray(accuracies, dtype=float)
    k = np.arange(1, len(acc) + 1)
    fig = Figure(figsize=(4.0, 3.0))
    ax = fig.subplots()
    ax.plot(k, 100 * acc, marker="o", color="black")
    ax.axhline(50, color="grey", linestyle=":", linewidth=1)
    ax.set_xlabel("glimpses per image")
    ax.set_ylabel("probe accuracy (%)")
    ax.set_xticks(k)
    ax.set_ylim(40, 100)
    fig.tight_layout()
    return _save_figure(fig, path)


def plot_training_curve(history, path) -> Path:
    """``history`` rows are (step, train_loss, val_acc)."""
    rows = np.asarray(history, dtype=float).reshape(-1, 3)
    fig = Figure(figsize=(6.0, 3.0))
    left, right = fig.subplots(1, 2)
    left.plot(rows[:, 0], rows[:, 1], color="black")
    left.set_xlabel("step")
    left.set_ylabel("train loss")
    right.plot(rows[:, 0], 100 * rows[:, 2], color="tab:blue")
    right.set_xlabel("step")
    right.set_ylabel("validation accuracy (%)")
    fig.tight_layout()
    return _save_figure(fig, path)


def plot_running_accuracy(correct, path, chance: float | None = None) -> Path:
    """Cumulative accuracy over evaluated items."""
    c = np.asarray(correct, dtype=float)
    n = np.arange(1, len(c) + 1)
    fig = Figure(figsize=(4.5, 3.0))
    ax = fig.subplots()
    ax.plot(n, 100 * np.cumsum(c) / n, color="black", linewidth=1)
    if chance is not None:
        ax.axhline(100 * chance, color="grey", linestyle=":", linewidth=1)
    ax.set_xlabel("evaluated")
    ax.set_ylabel("running accuracy (%)")
    ax.set_ylim(0, 100)
    fig.tight_layout()
    return _save_figure(fig, path)
