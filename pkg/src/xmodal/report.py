"""Rendering: ablation tables, training-curve figures, saliency graymaps.

Figures are written as PNG files next to the text output; no interactive
backend is touched.
"""

import numpy as np
from matplotlib.figure import Figure

from .errors import ConfigError, DimensionError
from .evaluate import AblationReport
from .trainer import COLLAPSE_THRESHOLD

ARM_LABELS = {
    "random_init": "Random weights",
    "div_only": "Only L_div",
    "cross_only": "Only L_cross",
    "concat": "Concat",
    "full": "Our",
}
ROW_ORDER = ("random_init", "div_only", "cross_only", "concat", "full")
PROBE_COLUMNS = (
    ("shape_class", "rgb"),
    ("shape_class", "sod"),
    ("motion_class", "rgb"),
    ("motion_class", "sod"),
)


def _cell(arm, task, modality) -> str:
    if arm.failed:
        return "failed"
    for p in arm.probes:
        if p.task == task and p.modality == modality:
            return repr(p.accuracy)
    return "-"


def format_ablation_table(report: AblationReport) -> str:
    """Plain-text accuracy table, one row per arm, values verbatim."""
    header = ["arm"] + [f"{t}/{m}" for t, m in PROBE_COLUMNS]
    rows = [header]
    present = {a.arm for a in report.arms}
    for name in ROW_ORDER:
        if name not in present:
            continue
        arm = report.arm(name)
        rows.append([ARM_LABELS[name]]
                    + [_cell(arm, t, m) for t, m in PROBE_COLUMNS])
    for a in report.arms:
        if a.arm not in ARM_LABELS:
            raise ConfigError(f"no table label for arm {a.arm!r}")
    widths = [max(len(r[c]) for r in rows) for c in range(len(header))]
    lines = [
        "  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip()
        for row in rows
    ]
    if report.sweep:
        lines.append("")
        lines.append("loss-weight sweep (shape_class/rgb)")
        for w_cross, w_div, probe in report.sweep:
            lines.append(
                f"w_cross={w_cross!r} w_div={w_div!r} "
                f"accuracy={probe.accuracy!r}"
            )
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# figures

def save_training_curves(records, path) -> None:
    """Four-panel PNG: losses, feature spread, distances, learning rate."""
    if not records:
        raise ConfigError("no metrics records to plot")
    it = [r.iteration for r in records]
    fig = Figure(figsize=(10, 7))
    axes = fig.subplots(2, 2)

    ax = axes[0][0]
    ax.plot(it, [r.loss_total for r in records], label="total")
    ax.plot(it, [r.loss_cross for r in records], label="cross")
    ax.plot(it, [r.loss_div for r in records], label="div")
    ax.set_title("loss")
    ax.set_xlabel("iteration")
    ax.legend()

    ax = axes[0][1]
    ax.plot(it, [r.feature_spread for r in records])
    ax.axhline(COLLAPSE_THRESHOLD, linestyle="--", color="red",
               label="collapse threshold")
    ax.set_title("feature spread")
    ax.set_xlabel("iteration")
    ax.set_ylim(0.0, 2.0)
    ax.legend()

    ax = axes[1][0]
    ax.plot(it, [r.mean_cross_modal_distance for r in records],
            label="cross-modal")
    ax.plot(it, [r.mean_cross_pair_distance_f for r in records],
            label="cross-pair f")
    ax.plot(it, [r.mean_cross_pair_distance_g for r in records],
            label="cross-pair g")
    ax.set_title("batch distances")
    ax.set_xlabel("iteration")
    ax.legend()

    ax = axes[1][1]
    ax.plot(it, [r.lr for r in records])
    ax.set_title("learning rate")
    ax.set_xlabel("iteration")
    ax.set_yscale("log")

    fig.tight_layout()
    fig.savefig(path, format="png", dpi=110)


def save_ablation_chart(report: AblationReport, path) -> None:
    """Grouped accuracy bars per arm; failed arms are skipped."""
    arms = [a for a in report.arms if not a.failed and a.probes]
    if not arms:
        raise ConfigError("no completed arms to plot")
    order = [a for name in ROW_ORDER for a in arms if a.arm == name]
    fig = Figure(figsize=(9, 4.5))
    ax = fig.subplots()
    x = np.arange(len(order), dtype=np.float64)
    width = 0.2
    for j, (task, modality) in enumerate(PROBE_COLUMNS):
        vals = []
        for arm in order:
            acc = [p.accuracy for p in arm.probes
                   if p.task == task and p.modality == modality]
            vals.append(acc[0] if acc else 0.0)
        ax.bar(x + (j - 1.5) * width, vals, width,
               label=f"{task}/{modality}")
    ax.set_xticks(x)
    ax.set_xticklabels([ARM_LABELS.get(a.arm, a.arm) for a in order])
    ax.set_ylabel("probe accuracy")
    ax.set_ylim(0.0, 1.0)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, format="png", dpi=110)


# ---------------------------------------------------------------------------
# saliency output

def write_pgm(gray: np.ndarray, path) -> None:
    """Binary 8-bit graymap; values scaled so the maximum maps to 255.

    Zero input stays zero, so an all-zero map renders all black.
    """
    gray = np.asarray(gray, dtype=np.float64)
    if gray.ndim != 2:
        raise DimensionError(f"graymap needs a 2-d array, got {gray.shape}")
    peak = gray.max()
    scaled = np.zeros_like(gray) if peak <= 0 else gray * (255.0 / peak)
    data = np.clip(np.rint(scaled), 0, 255).astype(np.uint8)
    h, w = data.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def save_saliency(sal: np.ndarray, base_path) -> tuple:
    """Channel-mean graymap plus the raw per-channel map as little-endian
    float64; returns (pgm_path, raw_path)."""
    import pathlib

    base = pathlib.Path(base_path)
    pgm = base.with_suffix(".pgm")
    raw = base.with_suffix(".f64")
    write_pgm(np.asarray(sal, dtype=np.float64).mean(axis=0), pgm)
    np.ascontiguousarray(sal, dtype="<f8").tofile(raw)
    return pgm, raw


def render_report(report: AblationReport, out_dir, records=None) -> list:
    """Write the table and charts into ``out_dir``; returns written paths."""
    import pathlib

    out = pathlib.Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    table = out / "report.txt"
    table.write_text(format_ablation_table(report))
    written.append(table)
    chart = out / "ablation_accuracy.png"
    save_ablation_chart(report, chart)
    written.append(chart)
    if records:
        curves = out / "training_curves.png"
        save_training_curves(records, curves)
        written.append(curves)
    return written
