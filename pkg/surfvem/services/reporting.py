"""
Result files: convergence.csv, regularity.csv, log-log error plots,
summary.json and error.json.
"""
import csv
import json
import logging
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
from matplotlib.patches import Polygon  # noqa: E402
import numpy as np  # noqa: E402

from ..models import ConvergenceReport, RegularityRow  # noqa: E402

logger = logging.getLogger(__name__)

CONVERGENCE_COLUMNS = [
    "test_case", "mesh_family", "k", "level", "h", "n_cells", "n_dofs",
    "err_l2", "err_h1", "eoc_l2", "eoc_h1", "cond_estimate", "runtime_ms",
    "config_hash", "mesh_checksum",
]
REGULARITY_COLUMNS = [
    "test_case", "mesh_family", "level", "n_cells", "n_boundary_nodes", "h",
    "rho_estimate", "edge_ratio", "min_edge_over_hP", "all_star_shaped", "mesh_checksum",
]

ORDER_COLORS = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728"]


def _fmt(value: Any, spec: str = ".10e") -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return str(value).lower()
    if isinstance(value, float):
        return format(value, spec)
    if hasattr(value, "value"):
        return str(value.value)
    return str(value)


def write_convergence_csv(reports: Sequence[ConvergenceReport], path: Path) -> Path:
    """One row per (order, level), orders ascending"""
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=CONVERGENCE_COLUMNS, lineterminator="\n")
        writer.writeheader()
        for report in sorted(reports, key=lambda r: r.k):
            for row in report.rows:
                data = row.model_dump()
                writer.writerow({
                    column: _fmt(data[column], ".3e" if column == "cond_estimate" else ".10e")
                    for column in CONVERGENCE_COLUMNS
                })
    logger.info(f"REPORT: Wrote {path}")
    return path


def write_regularity_csv(rows: Sequence[RegularityRow], path: Path) -> Path:
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=REGULARITY_COLUMNS, lineterminator="\n")
        writer.writeheader()
        for row in sorted(rows, key=lambda r: r.level):
            data = row.model_dump()
            writer.writerow({column: _fmt(data[column]) for column in REGULARITY_COLUMNS})
    logger.info(f"REPORT: Wrote {path}")
    return path


def slope_triangle(h: np.ndarray, err: np.ndarray, rate: int, shift: float = 0.5) -> np.ndarray:
    """Corners of an O(h^rate) triangle under the two finest points, right angle at the finest h"""
    h_fine, h_coarse = float(h[-1]), float(h[-2])
    base = shift * float(err[-1])
    return np.array([
        [h_fine, base],
        [h_coarse, base],
        [h_coarse, base * (h_coarse / h_fine) ** rate],
    ])


def plot_convergence(reports: Sequence[ConvergenceReport], norm: str, path: Path) -> Path:
    """Log-log error against h, one line per order, each with a reference slope triangle of the optimal rate"""
    field = "err_l2" if norm == "l2" else "err_h1"
    label = "$L^2$" if norm == "l2" else "$H^1$"
    plt.rcParams["svg.hashsalt"] = "surfvem"
    fig, ax = plt.subplots(figsize=(7, 5))

    for i, report in enumerate(sorted(reports, key=lambda r: r.k)):
        h = np.array([row.h for row in report.rows])
        err = np.array([getattr(row, field) for row in report.rows])
        if h.size == 0 or np.any(err <= 0.0):
            continue
        color = ORDER_COLORS[i % len(ORDER_COLORS)]
        ax.loglog(h, err, "o-", color=color, linewidth=1.5, markersize=5, label=f"k={report.k}")
        if h.size >= 2 and h[-2] > h[-1]:
            rate = report.k + 1 if norm == "l2" else report.k
            corners = slope_triangle(h, err, rate)
            ax.add_patch(Polygon(corners, closed=True, fill=False, edgecolor=color, linewidth=0.8))
            ax.annotate(
                str(rate),
                xy=(corners[1, 0], np.sqrt(corners[1, 1] * corners[2, 1])),
                xytext=(3, 0),
                textcoords="offset points",
                color=color,
                fontsize=8,
                va="center",
            )

    ax.set_xlabel("$h$", fontsize=12)
    ax.set_ylabel(f"{label} error", fontsize=12)
    ax.legend(fontsize=7, loc="lower right")
    ax.grid(True, alpha=0.3, which="both")
    fig.tight_layout()
    fmt = path.suffix.lstrip(".") or "svg"
    # no timestamp so reruns write the same file
    metadata = {"Date": None} if fmt in ("svg", "pdf") else None
    fig.savefig(path, format=fmt, metadata=metadata)
    plt.close(fig)
    logger.info(f"REPORT: Wrote {path}")
    return path


def write_summary(
    reports: Sequence[ConvergenceReport],
    path: Path,
    config: Dict[str, Any],
    config_hash: str,
    metric_bounds: Optional[Dict[str, float]] = None,
) -> Path:
    summary = {
        "config": config,
        "config_hash": config_hash,
        "metric_bounds": metric_bounds,
        "orders": [
            {
                "k": report.k,
                "mesh_family": report.mesh_family.value,
                "stab_kind": report.stab_kind.value,
                "slope_l2": report.slope_l2,
                "slope_h1": report.slope_h1,
                "chart_parameters": report.chart_parameters,
            }
            for report in sorted(reports, key=lambda r: r.k)
        ],
    }
    path.write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    logger.info(f"REPORT: Wrote {path}")
    return path


def write_error_report(error: Dict[str, Any], output_dir: Path) -> Optional[Path]:
    """error.json in the output directory; None when the directory cannot be created"""
    try:
        output_dir.mkdir(parents=True, exist_ok=True)
        path = output_dir / "error.json"
        path.write_text(json.dumps(error, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return path
    except OSError as e:
        logger.error(f"REPORT: Could not write error report to {output_dir}: {e}")
        return None


def write_outputs(
    output_dir: Path,
    reports: List[ConvergenceReport],
    regularity: List[RegularityRow],
    config: Dict[str, Any],
    config_hash: str,
    metric_bounds: Optional[Dict[str, float]] = None,
    plot_format: str = "svg",
) -> Dict[str, Path]:
    output_dir.mkdir(parents=True, exist_ok=True)
    return {
        "convergence": write_convergence_csv(reports, output_dir / "convergence.csv"),
        "regularity": write_regularity_csv(regularity, output_dir / "regularity.csv"),
        "plot_l2": plot_convergence(reports, "l2", output_dir / f"plot_l2.{plot_format}"),
        "plot_h1": plot_convergence(reports, "h1", output_dir / f"plot_h1.{plot_format}"),
        "summary": write_summary(reports, output_dir / "summary.json", config, config_hash, metric_bounds),
    }
