"""Render evaluation reports to figures: per-case overlay panels and a
per-class DSC summary chart.
"""

import json
from dataclasses import dataclass, field
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import h5py  # noqa: E402
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from matplotlib.patches import Patch  # noqa: E402

plt.rcParams.update({
    "figure.dpi": 110,
    "savefig.bbox": "tight",
    "axes.titlesize": 10,
    "font.size": 9,
})


@dataclass
class FigureSet:
    panels: list = field(default_factory=list)
    summary: Path | None = None
    legend_entries: list = field(default_factory=list)
    notice: str = ""


def class_colors(num_foreground: int):
    cmap = plt.get_cmap("tab10" if num_foreground <= 10 else "tab20")
    return [cmap(i % cmap.N) for i in range(num_foreground)]


def _label_rgba(label: np.ndarray, colors, alpha: float = 0.55) -> np.ndarray:
    out = np.zeros(label.shape + (4,), dtype=float)
    for c, color in enumerate(colors, start=1):
        m = label == c
        out[m] = (*color[:3], alpha)
    return out


def _overlay_panel(ax, image, label, colors, title):
    ax.imshow(image, cmap="gray", interpolation="nearest")
    if label is not None:
        ax.imshow(_label_rgba(label, colors), interpolation="nearest")
    ax.set_title(title)
    ax.axis("off")


def render_case_panel(case_id, image, gt, pred, names, colors, out_path: Path) -> Path:
    fig, axes = plt.subplots(1, 3, figsize=(9, 3.4))
    _overlay_panel(axes[0], image, None, colors, f"{case_id}: image")
    _overlay_panel(axes[1], image, gt, colors, "ground truth")
    _overlay_panel(axes[2], image, pred, colors, "prediction")
    handles = [Patch(color=c, label=n) for n, c in zip(names, colors)]
    fig.legend(handles=handles, loc="lower center", ncol=min(len(names), 5), frameon=False)
    fig.tight_layout(rect=(0, 0.1, 1, 1))
    fig.savefig(out_path)
    plt.close(fig)
    return out_path


def render_summary_chart(report: dict, out_path: Path) -> Path:
    names = report["class_names"]
    values = [report["aggregates"]["per_class"][n]["dsc"] for n in names]
    colors = class_colors(len(names))
    fig, ax = plt.subplots(figsize=(max(4.0, 0.8 * len(names)), 3.2))
    ax.bar(range(len(names)), values, color=colors)
    ax.set_xticks(range(len(names)))
    ax.set_xticklabels(names, rotation=30, ha="right")
    ax.set_ylim(0, 1.0)
    ax.set_ylabel("DSC")
    mean = report["aggregates"]["mean_dsc"]
    ax.set_title(f"per-class DSC (mean {mean:.4f})" if mean is not None else "per-class DSC")
    fig.tight_layout()
    fig.savefig(out_path)
    plt.close(fig)
    return out_path


def render_report_figures(report, out_dir, predictions_path=None) -> FigureSet:
    """Draw figures for an evaluation report.

    `report` is the report dict or a path to report.json; overlays need
    the predictions.h5 written by evaluate (defaults to the report's
    sibling). An empty report produces no files.
    """
    if not isinstance(report, dict):
        report_path = Path(report)
        report = json.loads(report_path.read_text())
        if predictions_path is None:
            candidate = report_path.parent / "predictions.h5"
            predictions_path = candidate if candidate.exists() else None
    out_dir = Path(out_dir)
    if not report.get("cases"):
        return FigureSet(notice="empty report: nothing to draw")
    out_dir.mkdir(parents=True, exist_ok=True)
    names = report["class_names"]
    colors = class_colors(len(names))
    result = FigureSet(legend_entries=list(names))
    if predictions_path is not None:
        with h5py.File(predictions_path, "r") as f:
            for case in report["cases"]:
                cid = case["case_id"]
                if cid not in f:
                    continue
                g = f[cid]
                path = render_case_panel(
                    cid, g["overlay_image"][()], g["overlay_gt"][()], g["overlay_pred"][()],
                    names, colors, out_dir / f"overlay_{cid}.png",
                )
                result.panels.append(path)
    result.summary = render_summary_chart(report, out_dir / "dsc_summary.png")
    return result
