from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Optional

from dataset_forge import (
    AugmentationConfig,
    DatasetConfig,
    LabeledDataset,
    MANIFEST_NAME,
    SIDECAR_NAME,
    generate,
    load,
    regime_size,
    split,
    take_episodes,
)
from tactile import __version__
from tactile.contact_mechanics import STANDARD_INDENTERS, Indenter
from tactile.errors import ConfigError, LeakageError, ProtocolError
from tactile.metrics import HEATMAP_BINS, MetricsReport, evaluate
from tactile.photometric_renderer import PATTERNS, CameraModel, SensorInstance
from tactile.regressor import RegressorConfig
from tactile.shell_geometry import ShellGeometry
from tactile.training import finetune, pretrain_localization, train

logger = logging.getLogger(__name__)

REPORT_SCHEMA = 1
EXPERIMENTS = ("config-sweep", "multi-indenter", "data-efficiency", "transfer")
SWEEP_CONFIGS: tuple[tuple[str, bool], ...] = tuple((p, m) for m in (True, False) for p in PATTERNS)

# Real-hardware numbers, carried as context only.
HARDWARE_REFERENCE = {
    "config-sweep": {"position_mm": 0.59, "force_N": 0.15, "torsion_Nm": 0.0002, "depth_mm": [0.15, 0.14]},
    "transfer": {"position_mm": [3.49, 0.41], "force_N": [2.06, 0.23], "torsion_Nm": [0.0068, 0.0016]},
}

DEFAULT_TRAIN_SIZES = (0, 500, 1000, 2000, 5000, 10000)
DEFAULT_FINETUNE_SIZES = (0, 250, 500, 1000, 2000)


def _scale(n: int, paper_scale: bool) -> int:
    if paper_scale or n == 0:
        return n
    return max(1, n // 20)


@dataclass(frozen=True)
class TransferSpec:
    sources: int = 3
    finetune_sizes: tuple[int, ...] = DEFAULT_FINETUNE_SIZES
    test_size: int = 600
    pattern: str = "RRRGGGBBB"
    markers: bool = True
    light_jitter: float = 0.1
    source_seeds: tuple[int, ...] = ()
    target_seed: Optional[int] = None
    target_id: str = "target"

    def seeds(self, master: int) -> tuple[tuple[int, ...], int]:
        src = self.source_seeds or tuple(master * 10 + k + 1 for k in range(self.sources))
        tgt = self.target_seed if self.target_seed is not None else master * 10 + 9
        return src, tgt


@dataclass(frozen=True)
class ExperimentSpec:
    name: str
    output_dir: Path
    seed: int = 0
    paper_scale: bool = False
    geometry: ShellGeometry = ShellGeometry()
    camera: CameraModel = CameraModel()
    grid: tuple[int, int] = (256, 128)
    frames: int = 10
    workers: int = 1
    estimator: RegressorConfig = RegressorConfig()
    train_fraction: float = 0.8
    min_depth: float = 0.0
    # explicit record counts per regime, overriding the (scaled) regime sizes
    sizes: dict[str, int] = field(default_factory=dict)
    configs: tuple[tuple[str, bool], ...] = SWEEP_CONFIGS
    depth_model: bool = True
    train_sizes: tuple[int, ...] = DEFAULT_TRAIN_SIZES
    seeds: tuple[int, ...] = ()
    heatmap_bins: tuple[int, int] = HEATMAP_BINS
    transfer: TransferSpec = TransferSpec()

    def __post_init__(self) -> None:
        if self.name not in EXPERIMENTS:
            raise ConfigError(f"experiment must be one of {EXPERIMENTS}, got {self.name!r}")

    def size(self, regime: str) -> int:
        if regime in self.sizes:
            return int(self.sizes[regime])
        return regime_size(regime, self.paper_scale)

    def scaled(self, n: int) -> int:
        return _scale(n, self.paper_scale)

    def run_seeds(self) -> tuple[int, ...]:
        return self.seeds or (self.seed,)

    def to_dict(self) -> dict[str, Any]:
        est = asdict(self.estimator)
        est["outputs"] = list(self.estimator.outputs)
        return {
            "name": self.name,
            "seed": self.seed,
            "paper_scale": self.paper_scale,
            "geometry": asdict(self.geometry),
            "camera": asdict(self.camera),
            "grid": list(self.grid),
            "frames": self.frames,
            "estimator": est,
            "train_fraction": self.train_fraction,
            "min_depth": self.min_depth,
            "sizes": dict(sorted(self.sizes.items())),
            "configs": [[p, m] for p, m in self.configs],
            "depth_model": self.depth_model,
            "train_sizes": list(self.train_sizes),
            "seeds": list(self.run_seeds()),
            "heatmap_bins": list(self.heatmap_bins),
            "transfer": {**asdict(self.transfer), "finetune_sizes": list(self.transfer.finetune_sizes), "source_seeds": list(self.transfer.source_seeds)},
        }


# ----------------------------
# Helpers
# ----------------------------

def ensure_dataset(cfg: DatasetConfig) -> LabeledDataset:
    """Reuse a dataset already on disk when its config snapshot matches, else generate it."""
    root = Path(cfg.output_dir)
    sidecar = root / SIDECAR_NAME
    if (root / MANIFEST_NAME).exists() and sidecar.exists():
        stored = json.loads(sidecar.read_text(encoding="utf-8")).get("config")
        if stored == json.loads(json.dumps(cfg.snapshot())):
            logger.info("reusing dataset %s", root)
            return load(root / MANIFEST_NAME)
    return generate(cfg)


def _dataset_cfg(
    spec: ExperimentSpec,
    name: str,
    sensors: list[SensorInstance],
    indenters: tuple[Indenter, ...],
    records: int,
    seed: int,
    label_mode: str = "full_state",
    augmentation: AugmentationConfig = AugmentationConfig(),
) -> DatasetConfig:
    per = 0 if records <= 0 else max(1, math.ceil(records / (spec.frames * len(indenters))))
    return DatasetConfig(
        name=name,
        output_dir=spec.output_dir / "data" / name,
        sensors=tuple(sensors),
        indenters=indenters,
        episodes_per_indenter=per,
        frames=spec.frames,
        label_mode=label_mode,
        augmentation=augmentation,
        seed=seed,
        geometry=spec.geometry,
        grid=spec.grid,
        workers=spec.workers,
    )


def audit(train: LabeledDataset | frozenset[str], test: LabeledDataset) -> dict[str, int]:
    train_eps = set(train) if isinstance(train, frozenset) else set(train.episode_ids())
    test_eps = set(test.episode_ids())
    overlap = train_eps & test_eps
    if overlap:
        raise LeakageError(f"{len(overlap)} episode(s) appear in both training and test data")
    return {"train_episodes": len(train_eps), "test_episodes": len(test_eps), "overlap": 0}


def _brief(report: MetricsReport) -> dict[str, Any]:
    return {"records": report.records, "summary": report.summary}


def _wrap(spec: ExperimentSpec, body: dict[str, Any], audits: dict[str, Any]) -> dict[str, Any]:
    return {
        "schema_version": REPORT_SCHEMA,
        "experiment": spec.name,
        "seed": spec.seed,
        "version": __version__,
        "spec": spec.to_dict(),
        "audit": audits,
        **body,
    }


# ----------------------------
# Experiments
# ----------------------------

def run_config_sweep(spec: ExperimentSpec) -> dict[str, Any]:
    """Three illuminations with and without markers, single r=3 mm sphere."""
    rows: list[dict[str, Any]] = []
    audits: dict[str, Any] = {}
    for pattern, markers in spec.configs:
        if pattern not in PATTERNS:
            raise ConfigError(f"unknown illumination pattern {pattern!r} in config sweep")
        cid = f"{pattern.lower()}-{'markers' if markers else 'clear'}"
        sensor = SensorInstance.create(cid, pattern, markers, seed=spec.seed, perturb=False, camera=spec.camera)
        ds = ensure_dataset(_dataset_cfg(spec, f"sweep-{cid}", [sensor], (Indenter.sphere(3.0),), spec.size("single-sensor"), spec.seed))
        train_ds, test_ds = split(ds, spec.train_fraction, spec.seed)
        audits[cid] = audit(train_ds, test_ds)

        model = train(train_ds, spec.estimator, spec.geometry)
        report = evaluate(model, test_ds, spec.min_depth, spec.heatmap_bins, spec.geometry)
        row: dict[str, Any] = {
            "config": cid,
            "pattern": pattern,
            "markers": markers,
            **_brief(report),
            "force_bins": report.force_bins,
            "torsion_sign": report.torsion_sign,
        }
        if spec.depth_model:
            depth_model = train(train_ds, replace(spec.estimator, outputs=("d",)), spec.geometry)
            row["depth_model"] = evaluate(depth_model, test_ds, spec.min_depth, spec.heatmap_bins, spec.geometry).summary["depth"]
        rows.append(row)
        print(f"config-sweep: {cid} position={report.mean('position'):.3f} mm")

    comparison = []
    for pattern in PATTERNS:
        by = {r["markers"]: r["summary"]["position"]["mean"] for r in rows if r["pattern"] == pattern}
        if True in by and False in by:
            comparison.append({"pattern": pattern, "markers": by[True], "clear": by[False], "delta": by[True] - by[False]})
    return _wrap(spec, {"rows": rows, "comparison": comparison, "reference": HARDWARE_REFERENCE["config-sweep"]}, audits)


def run_multi_indenter(spec: ExperimentSpec) -> dict[str, Any]:
    sensor = SensorInstance.create("multi", "RRRGGGBBB", True, seed=spec.seed, perturb=False, camera=spec.camera)
    train_ds = ensure_dataset(_dataset_cfg(spec, "multi-train", [sensor], STANDARD_INDENTERS, spec.size("multi-indenter"), spec.seed))
    points = spec.size("test-points")
    test_ds = ensure_dataset(
        _dataset_cfg(spec, "multi-test", [sensor], STANDARD_INDENTERS, points * spec.frames, spec.seed + 1)
    )
    audits = {"multi-indenter": audit(train_ds, test_ds)}
    model = train(train_ds, spec.estimator, spec.geometry)
    report = evaluate(model, test_ds, spec.min_depth, spec.heatmap_bins, spec.geometry)
    n_az, n_ax = spec.heatmap_bins
    warnings = []
    test_points = len(test_ds.episode_ids())
    if test_points < n_az * n_ax:
        warnings.append(f"{test_points} test points for {n_az * n_ax} heatmap bins")
    print(f"multi-indenter: {test_points} test points, position={report.mean('position'):.3f} mm")
    body = {
        "test_points": test_points,
        **_brief(report),
        "heatmap": report.heatmap,
        "per_indenter": report.per_indenter,
        "force_bins": report.force_bins,
        "warnings": warnings,
    }
    return _wrap(spec, body, audits)


def _curve_point(reports: list[Optional[MetricsReport]]) -> dict[str, Any]:
    got = [r for r in reports if r is not None]
    if not got:
        return {"position": None, "force_vector": None, "torsion": None, "seeds": 0}
    point: dict[str, Any] = {"seeds": len(got)}
    for m in ("position", "force_vector", "torsion"):
        means = [r.mean(m) for r in got if r.mean(m) is not None]
        stds = [r.summary[m]["std"] for r in got if r.summary[m]["std"] is not None]
        point[m] = None if not means else {"mean": sum(means) / len(means), "std": sum(stds) / len(stds)}
    return point


def run_data_efficiency(spec: ExperimentSpec) -> dict[str, Any]:
    """Learning curves from scratch and after localization pre-training on sim data."""
    sizes = [spec.scaled(n) for n in spec.train_sizes]
    scratch: dict[int, list[Optional[MetricsReport]]] = {n: [] for n in sizes}
    pretrained: dict[int, list[Optional[MetricsReport]]] = {n: [] for n in sizes}
    audits: dict[str, Any] = {}
    used: dict[int, list[int]] = {n: [] for n in sizes}

    for s in spec.run_seeds():
        sim_sensor = SensorInstance.create("sim", "RRRGGGBBB", True, seed=s, perturb=False, camera=spec.camera)
        real_sensor = SensorInstance.create("real", "RRRGGGBBB", True, seed=s + 1000, perturb=True, camera=spec.camera)
        sim = ensure_dataset(
            _dataset_cfg(spec, f"eff-sim-{s}", [sim_sensor], (Indenter.sphere(3.0),), spec.size("pretrain"), s, label_mode="position_only")
        )
        test_n = spec.size("efficiency-test")
        real = ensure_dataset(
            _dataset_cfg(
                spec, f"eff-real-{s}", [real_sensor], (Indenter.sphere(3.0),), max(sizes) + test_n, s + 1,
                augmentation=AugmentationConfig(enabled=True),
            )
        )
        pool, test = split(real, 1.0 - test_n / max(len(real), 1), s)
        audits[f"seed-{s}"] = audit(pool, test)
        test_eps = set(test.episode_ids())

        base = pretrain_localization(sim, spec.estimator, geometry=spec.geometry)
        for n in sizes:
            subset = take_episodes(pool, n, s)
            used[n].append(len(subset))
            if len(subset) == 0:
                scratch[n].append(None)
            else:
                scratch[n].append(evaluate(train(subset, spec.estimator, spec.geometry), test, spec.min_depth, spec.heatmap_bins, spec.geometry))
            tuned = finetune(base, subset, spec.estimator, test_episodes=test_eps)
            pretrained[n].append(evaluate(tuned, test, spec.min_depth, spec.heatmap_bins, spec.geometry))
            print(f"data-efficiency: seed {s} size {n} done")

    curves = {
        "train_sizes": sizes,
        "records_used": [used[n] for n in sizes],
        "scratch": [_curve_point(scratch[n]) for n in sizes],
        "pretrained": [_curve_point(pretrained[n]) for n in sizes],
    }
    headline = None
    nonzero = [i for i, n in enumerate(sizes) if n > 0]
    if nonzero:
        i = nonzero[0]
        a, b = curves["pretrained"][i]["position"], curves["scratch"][i]["position"]
        if a and b:
            headline = {"train_size": sizes[i], "pretrained": a["mean"], "scratch": b["mean"], "delta": a["mean"] - b["mean"]}
    return _wrap(spec, {"curves": curves, "headline": headline}, audits)


def run_transfer(spec: ExperimentSpec) -> dict[str, Any]:
    """Train on several perturbed sensors, then zero-shot and fine-tune on an unseen one."""
    ts = spec.transfer
    src_seeds, tgt_seed = ts.seeds(spec.seed)
    sources = [
        SensorInstance.create(f"source-{k}", ts.pattern, ts.markers, seed=sd, perturb=True, camera=spec.camera)
        for k, sd in enumerate(src_seeds)
    ]
    target = SensorInstance.create(ts.target_id, ts.pattern, ts.markers, seed=tgt_seed, perturb=True, camera=spec.camera)
    if target.id in {s.id for s in sources} or tgt_seed in src_seeds:
        raise ProtocolError(f"target sensor {target.id} (seed {tgt_seed}) is also a training source")

    aug = AugmentationConfig(enabled=True)
    train_all = ensure_dataset(_dataset_cfg(spec, "transfer-train", sources, (Indenter.sphere(3.0),), spec.size("transfer-train"), spec.seed, augmentation=aug))
    if any(r.sensor_id == target.id for r in train_all.records):
        raise ProtocolError(f"target sensor {target.id} appears in the training data")
    train_ds, held_out = split(train_all, spec.train_fraction, spec.seed)

    sizes = [spec.scaled(n) for n in ts.finetune_sizes]
    test_n = spec.scaled(ts.test_size) if "transfer-target-test" not in spec.sizes else spec.size("transfer-target-test")
    pool = ensure_dataset(_dataset_cfg(spec, "transfer-target-pool", [target], (Indenter.sphere(3.0),), max(sizes), spec.seed + 1, augmentation=aug))
    test = ensure_dataset(_dataset_cfg(spec, "transfer-target-test", [target], (Indenter.sphere(3.0),), test_n, spec.seed + 2, augmentation=aug))
    audits = {"source": audit(train_ds, held_out), "target": audit(pool, test), "source-vs-target": audit(train_ds, test)}

    config = replace(spec.estimator, light_jitter=ts.light_jitter)
    model = train(train_ds, config, spec.geometry)
    in_dist = evaluate(model, held_out, spec.min_depth, spec.heatmap_bins, spec.geometry)
    zero_shot = evaluate(model, test, spec.min_depth, spec.heatmap_bins, spec.geometry)
    test_eps = set(test.episode_ids())

    rows = []
    for n in sizes:
        if n == 0:
            report = zero_shot
            used = 0
        else:
            subset = take_episodes(pool, n, spec.seed)
            used = len(subset)
            report = evaluate(finetune(model, subset, config, test_episodes=test_eps), test, spec.min_depth, spec.heatmap_bins, spec.geometry)
        rows.append({"finetune_size": n, "records_used": used, **_brief(report)})
        print(f"transfer: fine-tune {n} position={report.mean('position'):.3f} mm")

    body = {
        "sources": [s.id for s in sources],
        "target": target.id,
        "in_distribution": _brief(in_dist),
        "zero_shot": _brief(zero_shot),
        "rows": rows,
        "reference": HARDWARE_REFERENCE["transfer"],
    }
    return _wrap(spec, body, audits)


RUNNERS = {
    "config-sweep": run_config_sweep,
    "multi-indenter": run_multi_indenter,
    "data-efficiency": run_data_efficiency,
    "transfer": run_transfer,
}


def run_experiment(spec: ExperimentSpec) -> dict[str, Any]:
    return RUNNERS[spec.name](spec)


def report_path(spec: ExperimentSpec) -> Path:
    return spec.output_dir / f"{spec.name}-{spec.seed}.json"


def save_report(report: dict[str, Any], path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n", encoding="utf-8")
