"""SVG figures drawn from the CSV outputs, plus a plain PGM writer for heatmaps.

Every figure is a function of a CSV file only, so a figure can be redrawn
from a results directory without touching any model.
"""

from __future__ import annotations

import csv
import io
import os
from collections import defaultdict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

_STYLE = {"svg.hashsalt": "ctxfusion", "svg.fonttype": "none", "font.size": 9}
_COLORS = {"fg": "tab:blue", "bg": "tab:orange"}


def _rows(path: str | os.PathLike) -> list[dict]:
    return list(csv.DictReader(io.StringIO(Path(path).read_text())))


def _color(model: str, i: int) -> str:
    return _COLORS.get(model, f"C{(i + 2) % 10}")


def _save(fig, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    fig.savefig(tmp, format="svg", metadata={"Date": None})
    plt.close(fig)
    os.replace(tmp, path)
    return path


def _curves(rows: list[dict], kind: str) -> dict:
    """{split: {model: [(level, accuracy), ...]}} for one perturbation kind."""
    out: dict = defaultdict(lambda: defaultdict(list))
    for r in rows:
        if r["kind"] == kind:
            out[r["split"]][r["model"]].append((float(r["level"]), float(r["accuracy"])))
    return out


def _panels(curves: dict, title: str, xlabel: str, path: Path) -> Path:
    splits = list(curves)
    with plt.rc_context(_STYLE):
        fig, axes = plt.subplots(1, len(splits), figsize=(3.2 * len(splits), 3.0), squeeze=False)
        for ax, split in zip(axes[0], splits):
            for i, (model, pts) in enumerate(curves[split].items()):
                pts = sorted(pts)
                ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o", ms=3,
                        color=_color(model, i), label=model)
            ax.set_title(f"{title}: {split}")
            ax.set_xlabel(xlabel)
            ax.set_ylim(-0.02, 1.02)
            ax.grid(alpha=0.3)
        axes[0][0].set_ylabel("accuracy")
        axes[0][-1].legend(fontsize=7)
        fig.tight_layout()
        return _save(fig, path)


def plot_blur_sweep(csv_path, out_dir) -> list[Path]:
    rows = _rows(csv_path)
    out = []
    for region in ("bbox", "whole"):
        curves = _curves(rows, f"blur_{region}")
        if curves:
            out.append(_panels(curves, f"{region} blur", "sigma", Path(out_dir) / f"blur_{region}.svg"))
    return out


def plot_fgsm_sweep(csv_path, out_dir) -> list[Path]:
    curves = _curves(_rows(csv_path), "fgsm")
    return [_panels(curves, "FGSM", "epsilon", Path(out_dir) / "fgsm.svg")]


def plot_alpha_sweep(csv_path, weights_path, out_dir, reference_eps: float) -> list[Path]:
    """Accuracy at the reference epsilon and fg/bg weight ratio, both against alpha."""
    rows = [r for r in _rows(csv_path) if r["split"] == "all" and float(r["level"]) == float(reference_eps)]
    acc = {r["model"]: float(r["accuracy"]) for r in rows}
    weights = [w for w in _rows(weights_path) if w["model"].startswith("joint_alpha=")]
    alphas = [float(w["alpha"]) for w in weights]
    # alpha = 0 sits at the left edge of a symlog axis
    with plt.rc_context(_STYLE):
        fig, (a1, a2) = plt.subplots(1, 2, figsize=(7.0, 3.0))
        a1.plot(alphas, [acc[w["model"]] for w in weights], marker="o", ms=3, label="joint (alpha)")
        for name, style in (("joint_adv", "--"), ("fg", ":"), ("bg", "-.")):
            if name in acc:
                a1.axhline(acc[name], ls=style, color=_color(name, 3), label=name)
        a1.set_xscale("symlog", linthresh=min(a for a in alphas if a > 0))
        a1.set_xlabel("alpha")
        a1.set_ylabel(f"accuracy at eps={float(reference_eps):g}")
        a1.set_ylim(-0.02, 1.02)
        a1.legend(fontsize=7)
        a1.grid(alpha=0.3)
        a2.plot(alphas, [float(w["ratio"]) for w in weights], marker="o", ms=3, color="tab:green")
        a2.set_xscale("symlog", linthresh=min(a for a in alphas if a > 0))
        a2.set_xlabel("alpha")
        a2.set_ylabel("mean |w_fg| / mean |w_bg|")
        a2.grid(alpha=0.3)
        fig.tight_layout()
        return [_save(fig, Path(out_dir) / "alpha.svg")]


def plot_pca(csv_path, out_dir) -> list[Path]:
    rows = _rows(csv_path)
    sources = list(dict.fromkeys(r["source"] for r in rows))
    with plt.rc_context(_STYLE):
        fig, axes = plt.subplots(1, len(sources), figsize=(3.4 * len(sources), 3.2), squeeze=False)
        for ax, src in zip(axes[0], sources):
            for cond, marker in (("clean", "o"), ("perturbed", "x")):
                pts = [r for r in rows if r["source"] == src and r["condition"] == cond]
                ax.scatter([float(r["pc1"]) for r in pts], [float(r["pc2"]) for r in pts],
                           c=[int(r["class_id"]) for r in pts], cmap="tab10", vmin=0, vmax=9,
                           marker=marker, s=8, linewidths=0.6, label=cond)
            ax.set_title(f"{src} features")
            ax.set_xlabel("PC1")
            ax.set_ylabel("PC2")
            ax.legend(fontsize=7)
        fig.tight_layout()
        return [_save(fig, Path(out_dir) / "pca.svg")]


def cam_overlay(path, pixels: np.ndarray, heatmap: np.ndarray, bbox, title: str = "") -> Path:
    x0, y0, x1, y1 = bbox
    with plt.rc_context(_STYLE):
        fig, ax = plt.subplots(figsize=(2.6, 2.6))
        ax.imshow(np.transpose(pixels, (1, 2, 0)), interpolation="nearest")
        ax.imshow(heatmap, cmap="jet", alpha=0.45, vmin=0, vmax=1, interpolation="nearest")
        ax.add_patch(plt.Rectangle((x0 - 0.5, y0 - 0.5), x1 - x0, y1 - y0, fill=False, ec="white", lw=1.2))
        ax.set_title(title, fontsize=8)
        ax.axis("off")
        fig.tight_layout()
        return _save(fig, Path(path))


def write_pgm(path, heatmap: np.ndarray) -> Path:
    """Binary 8-bit PGM of a map in [0, 1]."""
    h, w = heatmap.shape
    data = np.round(np.clip(heatmap, 0.0, 1.0) * 255).astype(np.uint8)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(b"P5\n%d %d\n255\n" % (w, h) + data.tobytes())
    return path


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(b"\n", 3)
    w, h = (int(v) for v in parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(h, w) / 255.0
