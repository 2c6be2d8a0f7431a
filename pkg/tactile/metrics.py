from __future__ import annotations

import csv
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, Any, Mapping, Optional, Protocol, Sequence

import numpy as np

from .baseline import StateEstimate
from .errors import LeakageError
from .photometric_renderer import TactileImage
from .shell_geometry import ShellGeometry, surface_bin

if TYPE_CHECKING:
    from dataset_forge import LabeledDataset, LabeledRecord

logger = logging.getLogger(__name__)

REPORT_SCHEMA = 1
FORCE_BIN_WIDTH = 0.5  # N
FORCE_MAX = 15.0  # N, sensor max load
HEATMAP_BINS = (24, 12)
METRICS = ("position", "force_vector", "force_magnitude", "torsion", "depth")
HEATMAP_METRICS = ("position", "force_vector", "torsion")


class Estimator(Protocol):
    def estimate(self, ref: TactileImage, img: TactileImage) -> StateEstimate: ...


@dataclass(frozen=True)
class RecordError:
    id: str
    episode_id: str
    indenter: str
    x: tuple[float, float, float]
    force_norm: Optional[float]
    position: float
    force_vector: Optional[float]
    force_magnitude: Optional[float]
    torsion: Optional[float]
    depth: float

    def get(self, metric: str) -> Optional[float]:
        return getattr(self, metric)


def record_error(record: "LabeledRecord", est: StateEstimate) -> RecordError:
    x = np.asarray(record.x)
    pos = float(np.linalg.norm(np.asarray(est.x) - x))
    depth = abs(est.d - record.d)
    if record.f is None or record.tau is None:
        return RecordError(record.id, record.episode_id, record.indenter, record.x, None, pos, None, None, None, depth)
    f = np.asarray(record.f)
    fh = np.asarray(est.f)
    return RecordError(
        id=record.id,
        episode_id=record.episode_id,
        indenter=record.indenter,
        x=record.x,
        force_norm=float(np.linalg.norm(f)),
        position=pos,
        force_vector=float(np.linalg.norm(fh - f)),
        force_magnitude=abs(float(np.linalg.norm(fh)) - float(np.linalg.norm(f))),
        torsion=abs(est.tau - record.tau),
        depth=depth,
    )


def _stats(values: Sequence[float]) -> dict[str, Any]:
    if not values:
        return {"mean": None, "std": None, "count": 0}
    a = np.asarray(values, dtype=float)
    return {"mean": float(a.mean()), "std": float(a.std()), "count": int(a.size)}


def _summary(errors: Sequence[RecordError]) -> dict[str, dict[str, Any]]:
    return {m: _stats([v for v in (e.get(m) for e in errors) if v is not None]) for m in METRICS}


def force_bin_edges() -> np.ndarray:
    n = int(round(FORCE_MAX / FORCE_BIN_WIDTH))
    return np.linspace(0.0, FORCE_MAX, n + 1)


def torsion_sign_summary(pairs: Sequence[tuple[float, float]]) -> dict[str, Any]:
    """Share of (label, estimate) torsion pairs with matching sign.

    Pairs where either side is exactly zero are left out of the count.
    """
    counted = [(t, e) for t, e in pairs if t != 0.0 and e != 0.0]
    hits = sum(1 for t, e in counted if (t > 0.0) == (e > 0.0))
    return {
        "accuracy": hits / len(counted) if counted else None,
        "count": len(counted),
        "zero_estimates": sum(1 for t, e in pairs if t != 0.0 and e == 0.0),
    }


def _force_bins(errors: Sequence[RecordError]) -> list[dict[str, Any]]:
    edges = force_bin_edges()
    rows: list[dict[str, Any]] = []
    with_force = [e for e in errors if e.force_norm is not None]
    for lo, hi in zip(edges[:-1], edges[1:]):
        last = hi == edges[-1]
        members = [e for e in with_force if lo <= e.force_norm < hi or (last and e.force_norm == hi)]  # type: ignore[operator]
        row: dict[str, Any] = {"lo": float(lo), "hi": float(hi), "count": len(members)}
        for m in METRICS:
            vals = [v for v in (e.get(m) for e in members) if v is not None]
            row[m] = float(np.mean(vals)) if vals else None
        rows.append(row)
    over = sum(1 for e in with_force if e.force_norm > FORCE_MAX)  # type: ignore[operator]
    if over:
        logger.warning("%d record(s) above %.1f N fall outside the force bins", over, FORCE_MAX)
    return rows


def _heatmap(errors: Sequence[RecordError], geom: ShellGeometry, bins: tuple[int, int]) -> dict[str, Any]:
    n_az, n_ax = bins
    count = np.zeros((n_az, n_ax), dtype=int)
    sums = {m: np.zeros((n_az, n_ax)) for m in HEATMAP_METRICS}
    counts = {m: np.zeros((n_az, n_ax), dtype=int) for m in HEATMAP_METRICS}
    if errors:
        ia, iz = surface_bin(geom, np.asarray([e.x for e in errors]), bins)
        for e, a, z in zip(errors, ia, iz):
            count[a, z] += 1
            for m in HEATMAP_METRICS:
                v = e.get(m)
                if v is not None:
                    sums[m][a, z] += v
                    counts[m][a, z] += 1
    out: dict[str, Any] = {"bins": [n_az, n_ax], "count": count.tolist()}
    for m in HEATMAP_METRICS:
        grid = [[(float(sums[m][a, z] / counts[m][a, z]) if counts[m][a, z] else None) for z in range(n_ax)] for a in range(n_az)]
        out[m] = grid
    if 0 < len(errors) < n_az * n_ax:
        logger.warning("%d test points for %d heatmap bins; some bins stay empty", len(errors), n_az * n_ax)
    return out


@dataclass
class MetricsReport:
    records: int
    episodes: list[str]
    summary: dict[str, dict[str, Any]]
    force_bins: list[dict[str, Any]]
    heatmap: dict[str, Any]
    per_indenter: dict[str, dict[str, Any]]
    min_depth: float = 0.0
    torsion_sign: dict[str, Any] = field(default_factory=lambda: torsion_sign_summary([]))
    schema_version: int = REPORT_SCHEMA
    skipped: int = 0
    extra: dict[str, Any] = field(default_factory=dict)

    def mean(self, metric: str) -> Optional[float]:
        return self.summary[metric]["mean"]

    def to_dict(self) -> dict[str, Any]:
        return {
            "schema_version": self.schema_version,
            "records": self.records,
            "skipped": self.skipped,
            "min_depth": self.min_depth,
            "episodes": self.episodes,
            "summary": self.summary,
            "force_bins": self.force_bins,
            "heatmap": self.heatmap,
            "per_indenter": self.per_indenter,
            "torsion_sign": self.torsion_sign,
            **({"extra": self.extra} if self.extra else {}),
        }

    def save_json(self, path: Path) -> None:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")

    def save_csv(self, directory: Path, prefix: str = "metrics") -> list[Path]:
        """One row per force bin and one row per surface bin."""
        directory.mkdir(parents=True, exist_ok=True)
        bins_path = directory / f"{prefix}-force-bins.csv"
        with bins_path.open("w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["lo", "hi", "count", *METRICS])
            for row in self.force_bins:
                w.writerow([row["lo"], row["hi"], row["count"], *("" if row[m] is None else f"{row[m]:.6g}" for m in METRICS)])
        heat_path = directory / f"{prefix}-heatmap.csv"
        n_az, n_ax = self.heatmap["bins"]
        with heat_path.open("w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["azimuth_bin", "axial_bin", "count", *HEATMAP_METRICS])
            for a in range(n_az):
                for z in range(n_ax):
                    vals = [self.heatmap[m][a][z] for m in HEATMAP_METRICS]
                    w.writerow([a, z, self.heatmap["count"][a][z], *("" if v is None else f"{v:.6g}" for v in vals)])
        return [bins_path, heat_path]


def score(
    estimates: Mapping[str, StateEstimate],
    dataset: "LabeledDataset",
    min_depth: float = 0.0,
    heatmap_bins: tuple[int, int] = HEATMAP_BINS,
    geom: Optional[ShellGeometry] = None,
) -> MetricsReport:
    """Aggregate per-record errors; records are taken in id order so input order never matters."""
    geom = geom or ShellGeometry()
    scored = sorted((r for r in dataset.records if r.d > 0.0 and r.d >= min_depth), key=lambda r: r.id)
    errors = [record_error(r, estimates[r.id]) for r in scored]

    per_indenter: dict[str, dict[str, Any]] = {}
    for name in sorted({e.indenter for e in errors}):
        group = [e for e in errors if e.indenter == name]
        per_indenter[name] = {"summary": _summary(group), "force_bins": _force_bins(group)}

    return MetricsReport(
        records=len(errors),
        episodes=sorted({r.episode_id for r in scored}),
        summary=_summary(errors),
        force_bins=_force_bins(errors),
        heatmap=_heatmap(errors, geom, heatmap_bins),
        per_indenter=per_indenter,
        min_depth=min_depth,
        torsion_sign=torsion_sign_summary([(r.tau, estimates[r.id].tau) for r in scored if r.tau is not None]),
        skipped=len(dataset.records) - len(scored),
    )


def check_disjoint(estimator: Any, dataset: "LabeledDataset") -> None:
    trained = frozenset(getattr(estimator, "trained_episodes", frozenset()))
    overlap = trained & set(dataset.episode_ids())
    if overlap:
        raise LeakageError(f"{len(overlap)} test episode(s) were seen in training, e.g. {sorted(overlap)[0]}")


def evaluate(
    estimator: Estimator,
    test_dataset: "LabeledDataset",
    min_depth: float = 0.0,
    heatmap_bins: tuple[int, int] = HEATMAP_BINS,
    geom: Optional[ShellGeometry] = None,
    workers: int = 1,
) -> MetricsReport:
    check_disjoint(estimator, test_dataset)
    records = [r for r in test_dataset.records if r.d > 0.0 and r.d >= min_depth]
    refs: dict[str, TactileImage] = {sid: test_dataset.reference(sid) for sid in sorted({r.sensor_id for r in records})}

    def _one(r: "LabeledRecord") -> StateEstimate:
        est = estimator.estimate(refs[r.sensor_id], test_dataset.load_image(r))
        if not all(math.isfinite(v) for v in est.to_vector()):
            logger.warning("non-finite estimate for %s", r.id)
        return est

    if workers > 1 and len(records) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_one, records))
    else:
        results = [_one(r) for r in records]
    estimates = {r.id: est for r, est in zip(records, results)}
    return score(estimates, test_dataset, min_depth, heatmap_bins, geom)
