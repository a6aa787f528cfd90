"""Run metrics and report export.

A ``MetricSeries`` is a flat, append-only table with the CSV layout
``stage,step,layer,metric,value``. The pipeline appends:

* ``train_loss``      — one row per minibatch step (step = global step),
* ``test_accuracy``   — one row per epoch (step = global epoch; the prune
  stage contributes a single pre-fine-tune row at step 0),
* ``wz_distance``     — per layer, one row per outer ADMM iteration,
* ``filter_l1``       — per-filter snapshot at stage boundaries (step =
  filter index; one snapshot per stage).

``export_report`` turns completed runs into per-metric CSVs, a
criterion-by-ratio accuracy table, and static plots; every plotted number is
re-derivable from the CSVs.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from .admm import filter_norms, squared_frobenius
from .errors import ShapeError


@dataclass
class MetricSeries:
    rows: list = field(default_factory=list)
    _last_step: dict = field(default_factory=dict)

    def add(self, stage: str, step: int, layer: str, metric: str, value: float) -> None:
        value = float(value)
        if not np.isfinite(value):
            raise ValueError(f"non-finite metric value for {metric} at step {step}")
        key = (stage, metric, layer)
        last = self._last_step.get(key)
        if last is not None and step <= last:
            raise ValueError(f"step {step} not increasing for {key} (last {last})")
        self._last_step[key] = step
        self.rows.append((stage, int(step), layer, metric, value))

    def values(self, metric: str, stage: str | None = None, layer: str | None = None):
        """(steps, values) filtered by metric and optionally stage/layer."""
        steps, vals = [], []
        for s, st, lay, m, v in self.rows:
            if m != metric:
                continue
            if stage is not None and s != stage:
                continue
            if layer is not None and lay != layer:
                continue
            steps.append(st)
            vals.append(v)
        return steps, vals

    def stages(self) -> list[str]:
        seen = []
        for s, *_ in self.rows:
            if s not in seen:
                seen.append(s)
        return seen

    def to_csv_text(self) -> str:
        lines = ["stage,step,layer,metric,value"]
        for stage, step, layer, metric, value in self.rows:
            lines.append(f"{stage},{step},{layer},{metric},{value!r}")
        return "\n".join(lines) + "\n"

    @staticmethod
    def from_csv_text(text: str) -> "MetricSeries":
        series = MetricSeries()
        lines = text.strip().splitlines()
        for line in lines[1:]:
            stage, step, layer, metric, value = line.split(",")
            series.rows.append((stage, int(step), layer, metric, float(value)))
        return series


def wz_distance_snapshot(model, state, series: MetricSeries | None = None,
                         stage: str = "admm", step: int = 0) -> dict:
    """Per-layer Frobenius distance ||W - Z||_F, optionally appended."""
    out = {}
    for layer in model.conv_layers():
        if layer.name not in state.z:
            raise ShapeError(f"state has no Z for layer {layer.name}")
        out[layer.name] = float(np.sqrt(squared_frobenius(layer.w, state.z[layer.name])))
    if series is not None:
        for name, v in out.items():
            series.add(stage, step, name, "wz_distance", v)
    return out


def l1_snapshot(model, series: MetricSeries | None = None, stage: str = "pretrain") -> dict:
    """Per-layer vector of per-filter l1 norms, optionally appended."""
    out = {}
    for layer in model.conv_layers():
        norms = filter_norms(layer.w, "l1")
        out[layer.name] = norms
        if series is not None:
            for j, v in enumerate(norms):
                series.add(stage, j, layer.name, "filter_l1", float(v))
    return out


# --------------------------------------------------------------- reporting

_STAGE_ORDER = ("pretrain", "vanilla", "admm", "prune", "prune_iter", "finetune")


def _method_label(summary: dict) -> str:
    if summary.get("pipeline") == "iterative_te":
        return "te_extra_ft" if summary.get("extra_finetune") else "te"
    return summary.get("criterion", "?")


def comparison_table(records) -> tuple[list[str], list[list]]:
    """(header, rows): prune ratio down, method label across, accuracy cells."""
    methods = []
    ratios = []
    cells = {}
    for rec in records:
        m = _method_label(rec.summary)
        r = rec.summary.get("prune_rate", 0.0)
        if m not in methods:
            methods.append(m)
        if r not in ratios:
            ratios.append(r)
        cells[(r, m)] = rec.summary.get("final_accuracy")
    ratios.sort()
    header = ["ratio"] + methods
    rows = []
    for r in ratios:
        row = [f"{100 * r:g}%"]
        for m in methods:
            v = cells.get((r, m))
            row.append("" if v is None else f"{v:.4f}")
        rows.append(row)
    return header, rows


def export_report(records, out_dir: str) -> dict:
    """Write the report bundle for completed runs; returns written paths.

    Bundle layout: ``metrics/<metric>.csv`` (with a run_id column),
    ``table.csv``/``table.txt``, and ``plots/*.png``.
    """
    if not records:
        raise ValueError("export_report: no records")
    os.makedirs(out_dir, exist_ok=True)
    metrics_dir = os.path.join(out_dir, "metrics")
    plots_dir = os.path.join(out_dir, "plots")
    os.makedirs(metrics_dir, exist_ok=True)
    os.makedirs(plots_dir, exist_ok=True)
    paths = {}

    metric_names = sorted({row[3] for rec in records for row in rec.series.rows})
    for metric in metric_names:
        lines = ["run_id,stage,step,layer,value"]
        for rec in records:
            for stage, step, layer, m, value in rec.series.rows:
                if m == metric:
                    lines.append(f"{rec.run_id},{stage},{step},{layer},{value!r}")
        path = os.path.join(metrics_dir, f"{metric}.csv")
        with open(path, "w", encoding="utf-8") as f:
            f.write("\n".join(lines) + "\n")
        paths[f"metric:{metric}"] = path

    header, rows = comparison_table(records)
    table_csv = os.path.join(out_dir, "table.csv")
    with open(table_csv, "w", encoding="utf-8") as f:
        f.write(",".join(header) + "\n")
        for row in rows:
            f.write(",".join(row) + "\n")
    paths["table"] = table_csv
    widths = [max(len(str(x)) for x in col) for col in zip(header, *rows)]
    with open(os.path.join(out_dir, "table.txt"), "w", encoding="utf-8") as f:
        for row in [header] + rows:
            f.write("  ".join(str(x).ljust(w) for x, w in zip(row, widths)).rstrip() + "\n")

    _plot_report(records, plots_dir, paths)
    return paths


def _plot_report(records, plots_dir: str, paths: dict) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    # accuracy vs prune ratio, one line per method (only meaningful for sweeps)
    by_method = {}
    for rec in records:
        m = _method_label(rec.summary)
        acc = rec.summary.get("final_accuracy")
        if acc is not None:
            by_method.setdefault(m, []).append((rec.summary.get("prune_rate", 0.0), acc))
    if any(len(v) > 1 for v in by_method.values()):
        fig, ax = plt.subplots(figsize=(5, 4))
        for m, pts in sorted(by_method.items()):
            pts.sort()
            ax.plot([100 * r for r, _ in pts], [100 * a for _, a in pts],
                    marker="o", label=m)
        ax.set_xlabel("pruned filters (%)")
        ax.set_ylabel("final test accuracy (%)")
        ax.legend()
        ax.grid(alpha=0.3)
        path = os.path.join(plots_dir, "accuracy_vs_ratio.png")
        fig.savefig(path, dpi=120, bbox_inches="tight")
        plt.close(fig)
        paths["plot:accuracy_vs_ratio"] = path

    for rec in records:
        layers = sorted({r[2] for r in rec.series.rows if r[3] == "wz_distance"})
        if layers:
            fig, ax = plt.subplots(figsize=(5, 4))
            for layer in layers:
                steps, vals = rec.series.values("wz_distance", layer=layer)
                ax.plot(steps, vals, label=layer)
            ax.set_xlabel("outer iteration")
            ax.set_ylabel("||W - Z||_F")
            ax.set_title(rec.run_id, fontsize=8)
            ax.legend()
            ax.grid(alpha=0.3)
            path = os.path.join(plots_dir, f"{rec.run_id}_wz_distance.png")
            fig.savefig(path, dpi=120, bbox_inches="tight")
            plt.close(fig)
            paths[f"plot:{rec.run_id}:wz"] = path

        snap_stages = [s for s in rec.series.stages()
                       if rec.series.values("filter_l1", stage=s)[1]]
        if snap_stages:
            layers = sorted({r[2] for r in rec.series.rows if r[3] == "filter_l1"})
            fig, axes = plt.subplots(1, len(layers), figsize=(4 * len(layers), 3),
                                     squeeze=False)
            for ax, layer in zip(axes[0], layers):
                for s in snap_stages:
                    _, vals = rec.series.values("filter_l1", stage=s, layer=layer)
                    top = max(vals) if vals and max(vals) > 0 else 1.0
                    ax.hist(vals, bins=np.linspace(0.0, top, 51), alpha=0.5, label=s)
                ax.set_title(layer, fontsize=9)
                ax.set_xlabel("filter l1 norm")
                ax.legend(fontsize=7)
            path = os.path.join(plots_dir, f"{rec.run_id}_l1_hist.png")
            fig.savefig(path, dpi=120, bbox_inches="tight")
            plt.close(fig)
            paths[f"plot:{rec.run_id}:l1"] = path

        acc_rows = [(s, st, v) for s, st, lay, m, v in rec.series.rows
                    if m == "test_accuracy"]
        if acc_rows:
            fig, ax = plt.subplots(figsize=(6, 4))
            offset = 0
            order = [s for s in _STAGE_ORDER if any(r[0] == s for r in acc_rows)]
            for s in order:
                pts = [(st, v) for stage, st, v in acc_rows if stage == s]
                xs = [offset + i for i, _ in enumerate(pts)]
                ax.plot(xs, [100 * v for _, v in pts], marker=".", label=s)
                offset += len(pts)
            ax.set_xlabel("evaluation index (stage order)")
            ax.set_ylabel("test accuracy (%)")
            ax.set_title(rec.run_id, fontsize=8)
            ax.legend()
            ax.grid(alpha=0.3)
            path = os.path.join(plots_dir, f"{rec.run_id}_stage_accuracy.png")
            fig.savefig(path, dpi=120, bbox_inches="tight")
            plt.close(fig)
            paths[f"plot:{rec.run_id}:stages"] = path
