"""Figure rendering for experiment reports.

Reads the delimited files an experiment run leaves in its output directory
and renders matplotlib figures next to them.  Rendering is headless (Agg)
and byte-deterministic: identical report files produce identical images.
"""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

_SAVE = {"dpi": 110, "metadata": {"Software": None}}
_METHOD_LABELS = {
    "hmtmf": "hierarchical multi-task",
    "egmtl": "homoscedastic multi-task",
    "sk": "single-task kriging",
}
_METHOD_COLORS = {"hmtmf": "tab:blue", "egmtl": "tab:orange", "sk": "tab:green"}


def _read_csv(path: Path) -> tuple[list[str], list[list[str]]]:
    with path.open(newline="") as fh:
        rows = list(csv.reader(fh))
    return rows[0], rows[1:]


def render_curve_figure(out_dir: str | Path, task_id: int) -> Path:
    """Plot one task's truth, fitted means, and uncertainty band to a PNG."""
    out_dir = Path(out_dir)
    header, rows = _read_csv(out_dir / f"curves_task{task_id}.csv")
    col = {name: i for i, name in enumerate(header)}
    x = [float(r[col["x"]]) for r in rows]
    fig, ax = plt.subplots(figsize=(7.0, 4.2))
    ax.plot(
        x, [float(r[col["truth"]]) for r in rows],
        color="black", linewidth=1.2, label="truth",
    )
    for method, label in _METHOD_LABELS.items():
        if f"{method}_mean" not in col:
            continue
        color = _METHOD_COLORS[method]
        ax.plot(
            x, [float(r[col[f"{method}_mean"]]) for r in rows],
            color=color, linewidth=1.0, label=label,
        )
        if method == "hmtmf":
            ax.fill_between(
                x,
                [float(r[col["hmtmf_lo"]]) for r in rows],
                [float(r[col["hmtmf_hi"]]) for r in rows],
                color=color, alpha=0.18, linewidth=0,
                label="mean +/- 2 std",
            )
    points_path = out_dir / "design_points.csv"
    if points_path.exists():
        p_header, p_rows = _read_csv(points_path)
        pc = {name: i for i, name in enumerate(p_header)}
        mine = [r for r in p_rows if int(r[pc["task"]]) == task_id]
        for fidelity, marker in (("high_res", "o"), ("low_res", "s")):
            sel = [r for r in mine if r[pc["fidelity"]] == fidelity]
            if sel:
                ax.scatter(
                    [float(r[pc["x"]]) for r in sel],
                    [float(r[pc["sample_mean"]]) for r in sel],
                    marker=marker, s=28, color="black", zorder=5,
                    facecolors="none" if fidelity == "low_res" else "black",
                    label=fidelity.replace("_", " "),
                )
    ax.set_xlabel("x")
    ax.set_ylabel("response")
    ax.set_title(f"task {task_id}")
    ax.legend(loc="best", fontsize=8)
    fig.tight_layout()
    path = out_dir / f"curves_task{task_id}.png"
    fig.savefig(path, **_SAVE)
    plt.close(fig)
    return path


def render_delta_figure(out_dir: str | Path) -> Path:
    """Bar chart of mean percent improvement per gauge pair and baseline."""
    out_dir = Path(out_dir)
    header, rows = _read_csv(out_dir / "delta_table.csv")
    col = {name: i for i, name in enumerate(header)}
    pairs = []
    for r in rows:
        key = (r[col["pair_high"]], r[col["pair_low"]])
        if key not in pairs:
            pairs.append(key)
    baselines = []
    for r in rows:
        if r[col["baseline"]] not in baselines:
            baselines.append(r[col["baseline"]])
    fig, ax = plt.subplots(figsize=(1.8 + 1.6 * len(pairs), 4.2))
    width = 0.8 / max(len(baselines), 1)
    for b_i, baseline in enumerate(baselines):
        xs, ys, errs = [], [], []
        for p_i, key in enumerate(pairs):
            for r in rows:
                if (r[col["pair_high"]], r[col["pair_low"]]) != key:
                    continue
                if r[col["baseline"]] != baseline:
                    continue
                if r[col["average"]] == "failed":
                    continue
                xs.append(p_i + (b_i - (len(baselines) - 1) / 2.0) * width)
                ys.append(float(r[col["average"]]))
                errs.append(float(r[col["average_std"]]))
        ax.bar(
            xs, ys, width=width * 0.92, yerr=errs, capsize=3,
            color=_METHOD_COLORS.get(baseline, "tab:gray"),
            label=f"vs {_METHOD_LABELS.get(baseline, baseline)}",
        )
    ax.axhline(0.0, color="black", linewidth=0.8)
    ax.set_xticks(range(len(pairs)))
    ax.set_xticklabels(
        [f"({a}, {b})" if a else "benchmark" for a, b in pairs], fontsize=8
    )
    ax.set_xlabel("gauge repeatability pair (% of mean height)")
    ax.set_ylabel("mean RMSE improvement (%)")
    ax.set_title("hierarchical model vs baselines")
    ax.legend(loc="best", fontsize=8)
    fig.tight_layout()
    path = out_dir / "delta_rmse.png"
    fig.savefig(path, **_SAVE)
    plt.close(fig)
    return path


def render_report_figures(out_dir: str | Path) -> list[Path]:
    """Render every figure the report files in ``out_dir`` support."""
    out_dir = Path(out_dir)
    paths = []
    for curve in sorted(out_dir.glob("curves_task*.csv")):
        task_id = int(curve.stem.removeprefix("curves_task"))
        paths.append(render_curve_figure(out_dir, task_id))
    delta = out_dir / "delta_table.csv"
    if delta.exists():
        rows = _read_csv(delta)[1]
        if rows:
            paths.append(render_delta_figure(out_dir))
    return paths
