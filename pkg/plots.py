from __future__ import annotations

import logging
from pathlib import Path
from typing import Any, Callable

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from tactile.errors import SchemaError  # noqa: E402

logger = logging.getLogger(__name__)

CURVE_METRICS = ("position", "force_vector", "torsion")
UNITS = {"position": "mm", "force_vector": "N", "force_magnitude": "N", "torsion": "N*m", "depth": "mm"}
DPI = 100
# drop the Software text chunk from PNGs
PNG_METADATA = {"Software": None}


def _need(obj: dict, *keys: str) -> Any:
    cur: Any = obj
    path = []
    for k in keys:
        path.append(k)
        if not isinstance(cur, dict) or k not in cur:
            raise SchemaError(f"report is missing {'.'.join(path)!r}")
        cur = cur[k]
    return cur


def _save(fig, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=DPI, format="png", metadata=PNG_METADATA)
    plt.close(fig)
    return path


def _bin_centers(rows: list[dict]) -> np.ndarray:
    return np.array([(r["lo"] + r["hi"]) / 2.0 for r in rows])


def _series(rows: list[dict], metric: str) -> np.ndarray:
    return np.array([np.nan if r.get(metric) is None else r[metric] for r in rows], dtype=float)


def _force_curves(curves: dict[str, list[dict]], title: str, path: Path) -> Path:
    """Error vs. |f| bin, one panel per metric, one line per labelled curve."""
    fig, axes = plt.subplots(1, len(CURVE_METRICS), figsize=(12, 3.6))
    for ax, metric in zip(axes, CURVE_METRICS):
        for label, rows in curves.items():
            for r in rows:
                if metric not in r:
                    raise SchemaError(f"force bin of {label!r} is missing {metric!r}")
            ax.plot(_bin_centers(rows), _series(rows, metric), marker="o", markersize=3, label=label)
        ax.set_xlabel("|f| (N)")
        ax.set_ylabel(f"{metric} error ({UNITS[metric]})")
    axes[0].legend(fontsize=7)
    fig.suptitle(title)
    fig.tight_layout()
    return _save(fig, path)


def _heatmap(report: dict, metric: str, path: Path, title: str) -> Path:
    grid = np.array(
        [[np.nan if v is None else v for v in row] for row in _need(report, "heatmap", metric)], dtype=float
    )
    n_az, n_ax = grid.shape
    fig, ax = plt.subplots(figsize=(7, 3.6))
    im = ax.imshow(grid.T, origin="lower", aspect="auto", extent=(0.0, 360.0, 0.0, 1.0), cmap="viridis")
    ax.set_xlabel("azimuth (deg)")
    ax.set_ylabel("area fraction (base to apex)")
    ax.set_title(f"{title}: {metric} ({n_az}x{n_ax} bins)")
    fig.colorbar(im, ax=ax, label=f"mean error ({UNITS[metric]})")
    fig.tight_layout()
    return _save(fig, path)


def _learning_curves(report: dict, path: Path) -> Path:
    curves = _need(report, "curves")
    sizes = np.asarray(_need(curves, "train_sizes"), dtype=float)
    fig, axes = plt.subplots(1, len(CURVE_METRICS), figsize=(12, 3.6))
    for ax, metric in zip(axes, CURVE_METRICS):
        for label in ("scratch", "pretrained"):
            points = _need(curves, label)
            mean = np.array([np.nan if p.get(metric) is None else p[metric]["mean"] for p in points], dtype=float)
            std = np.array([np.nan if p.get(metric) is None else p[metric]["std"] for p in points], dtype=float)
            ax.errorbar(sizes, mean, yerr=std, marker="o", markersize=3, capsize=2, label=label)
        ax.set_xlabel("training records")
        ax.set_ylabel(f"{metric} error ({UNITS[metric]})")
    axes[0].legend(fontsize=7)
    fig.suptitle(f"data efficiency (seed {report.get('seed', 0)})")
    fig.tight_layout()
    return _save(fig, path)


def _transfer_curve(report: dict, path: Path) -> Path:
    rows = _need(report, "rows")
    sizes = np.array([_need(r, "finetune_size") for r in rows], dtype=float)
    fig, axes = plt.subplots(1, len(CURVE_METRICS), figsize=(12, 3.6))
    for ax, metric in zip(axes, CURVE_METRICS):
        stats = [_need(r, "summary", metric) for r in rows]
        mean = np.array([np.nan if s["mean"] is None else s["mean"] for s in stats], dtype=float)
        std = np.array([np.nan if s["std"] is None else s["std"] for s in stats], dtype=float)
        ax.errorbar(sizes, mean, yerr=std, marker="o", markersize=3, capsize=2, label="fine-tuned")
        zero = _need(report, "zero_shot", "summary", metric)["mean"]
        if zero is not None:
            ax.axhline(zero, linestyle="--", linewidth=1, color="gray", label="zero-shot")
        ax.set_xlabel("target fine-tune records")
        ax.set_ylabel(f"{metric} error ({UNITS[metric]})")
    axes[0].legend(fontsize=7)
    fig.suptitle(f"transfer to {report.get('target', 'target')}")
    fig.tight_layout()
    return _save(fig, path)


def _plot_sweep(report: dict, stem: str, out_dir: Path) -> list[Path]:
    curves = {_need(r, "config"): _need(r, "force_bins") for r in _need(report, "rows")}
    return [_force_curves(curves, "error vs. |f| per configuration", out_dir / f"{stem}-force-curves.png")]


def _plot_heatmaps(report: dict, stem: str, out_dir: Path) -> list[Path]:
    title = report.get("experiment", "eval")
    out = [_heatmap(report, m, out_dir / f"{stem}-heatmap-{m}.png", title) for m in CURVE_METRICS]
    per = report.get("per_indenter") or {}
    if per:
        curves = {name: _need(body, "force_bins") for name, body in sorted(per.items())}
        out.append(_force_curves(curves, "error vs. |f| per indenter", out_dir / f"{stem}-indenter-curves.png"))
    elif "force_bins" in report:
        out.append(_force_curves({"all": report["force_bins"]}, "error vs. |f|", out_dir / f"{stem}-force-curves.png"))
    return out


_PLOTTERS: dict[str, Callable[[dict, str, Path], list[Path]]] = {
    "config-sweep": _plot_sweep,
    "multi-indenter": _plot_heatmaps,
    "eval": _plot_heatmaps,
    "data-efficiency": lambda r, stem, d: [_learning_curves(r, d / f"{stem}-learning-curves.png")],
    "transfer": lambda r, stem, d: [_transfer_curve(r, d / f"{stem}-transfer.png")],
}


def plot(report: dict, out_dir: Path) -> list[Path]:
    """Write the plot files for one report; files are named `<experiment>-<seed>-<kind>.png`."""
    if not report:
        logger.warning("empty report, nothing to plot")
        return []
    _need(report, "schema_version")
    name = report.get("experiment", "eval")
    if name not in _PLOTTERS:
        raise SchemaError(f"no plots for experiment {name!r}")
    stem = f"{name}-{report.get('seed', 0)}"
    paths = _PLOTTERS[name](report, stem, Path(out_dir))
    logger.info("wrote %d plot(s) for %s", len(paths), stem)
    return paths
