from __future__ import annotations

import argparse
import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Iterable, Optional, Sequence

import numpy as np

from tactile import __version__
from tactile.contact_mechanics import (
    FXY_RANGE,
    FZ_RANGE,
    MODES,
    TAU_RANGE,
    Indenter,
    Magnitude,
    episode_states,
    make_episode,
    random_episode,
)
from tactile.errors import DatasetError, DomainError, ManifestParseError, SplitError
from tactile.photometric_renderer import (
    SensorInstance,
    TactileImage,
    augment,
    load_png,
    reference_image,
    render_contact,
    save_png,
)
from tactile.shell_geometry import ShellGeometry, sample_surface_uv

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.jsonl"
SIDECAR_NAME = "dataset.json"
FORMAT_VERSION = 1
LABEL_MODES = ("full_state", "position_only")

# Full-scale record counts; desk scale divides by DESK_DIVISOR.
REGIMES = {
    "sim-localization": 18_000,
    "single-sensor": 12_000,
    "multi-indenter": 20_000,
    "transfer-train": 40_000,
    "pretrain": 4_500,
    "efficiency-test": 1_000,
    "transfer-target-pool": 2_300,
    "transfer-target-test": 600,
    "test-points": 1_282,
}
DESK_DIVISOR = 20


def regime_size(name: str, paper_scale: bool = False) -> int:
    if name not in REGIMES:
        raise DomainError(f"unknown regime {name!r}; known: {sorted(REGIMES)}")
    n = REGIMES[name]
    return n if paper_scale else max(1, n // DESK_DIVISOR)


@dataclass(frozen=True)
class AugmentationConfig:
    enabled: bool = False
    noise_sigma: float = 2.0
    light_gain_range: tuple[float, float] = (0.9, 1.1)


@dataclass(frozen=True)
class DatasetConfig:
    """Everything that determines a dataset's bytes.

    Sensors are assigned to episodes round-robin; each record is stacked later
    with its own sensor's reference image.
    """

    name: str
    output_dir: Path
    sensors: tuple[SensorInstance, ...]
    indenters: tuple[Indenter, ...] = (Indenter.sphere(3.0),)
    episodes_per_indenter: int = 10
    frames: int = 10
    label_mode: str = "full_state"
    modes: tuple[str, ...] = MODES
    augmentation: AugmentationConfig = AugmentationConfig()
    seed: int = 0
    geometry: ShellGeometry = ShellGeometry()
    grid: tuple[int, int] = (256, 128)
    min_depth: float = 0.5
    workers: int = 1

    def __post_init__(self) -> None:
        if self.label_mode not in LABEL_MODES:
            raise DomainError(f"label_mode must be one of {LABEL_MODES}, got {self.label_mode!r}")
        if not self.sensors:
            raise DomainError("a dataset needs at least one sensor instance")
        if len({s.id for s in self.sensors}) != len(self.sensors):
            raise DomainError("sensor ids must be unique within a dataset")
        if not self.indenters:
            raise DomainError("a dataset needs at least one indenter")
        if self.episodes_per_indenter < 0:
            raise DomainError(f"episodes_per_indenter must be >= 0, got {self.episodes_per_indenter}")
        if self.frames < 2:
            raise DomainError(f"frames must be >= 2, got {self.frames}")
        bad = [m for m in self.modes if m not in MODES]
        if bad or not self.modes:
            raise DomainError(f"modes must be a non-empty subset of {MODES}, got {self.modes}")

    @property
    def episodes(self) -> int:
        return self.episodes_per_indenter * len(self.indenters)

    @property
    def size(self) -> int:
        return self.episodes * self.frames

    def snapshot(self) -> dict[str, Any]:
        return {
            "name": self.name,
            "sensors": [s.to_dict() for s in self.sensors],
            "indenters": [i.name for i in self.indenters],
            "episodes_per_indenter": self.episodes_per_indenter,
            "frames": self.frames,
            "label_mode": self.label_mode,
            "modes": list(self.modes),
            "augmentation": {
                "enabled": self.augmentation.enabled,
                "noise_sigma": self.augmentation.noise_sigma,
                "light_gain_range": list(self.augmentation.light_gain_range),
            },
            "seed": self.seed,
            "geometry": asdict(self.geometry),
            "grid": list(self.grid),
            "min_depth": self.min_depth,
            "version": __version__,
        }


@dataclass(frozen=True)
class LabeledRecord:
    id: str
    image: str  # relative to the dataset root
    sensor_id: str
    indenter: str
    x: tuple[float, float, float]
    f: Optional[tuple[float, float, float]]
    tau: Optional[float]
    d: float
    episode_id: str
    frame: int
    seed: int
    # episode metadata, enough to rebuild the labels
    uv: tuple[float, float] = (0.0, 0.0)
    mode: str = "press"
    magnitude: dict = field(default_factory=dict)
    frames: int = 2

    def to_json(self) -> str:
        return json.dumps(asdict(self), ensure_ascii=False)

    @classmethod
    def from_dict(cls, raw: dict[str, Any]) -> "LabeledRecord":
        names = {f.name for f in fields(cls)}
        missing = {"id", "image", "sensor_id", "indenter", "x", "d", "episode_id", "frame", "seed"} - set(raw)
        if missing:
            raise KeyError(f"missing keys {sorted(missing)}")
        data = {k: v for k, v in raw.items() if k in names}
        data["x"] = tuple(float(c) for c in data["x"])
        data["f"] = None if data.get("f") is None else tuple(float(c) for c in data["f"])
        data["tau"] = None if data.get("tau") is None else float(data["tau"])
        data["uv"] = tuple(float(c) for c in data.get("uv", (0.0, 0.0)))
        return cls(**data)

    @property
    def has_force(self) -> bool:
        return self.f is not None and self.tau is not None

    def label_vector(self) -> np.ndarray:
        """(x, f, tau, d); missing force/torsion labels are 0."""
        f = self.f if self.f is not None else (0.0, 0.0, 0.0)
        tau = self.tau if self.tau is not None else 0.0
        return np.array([*self.x, *f, tau, self.d], dtype=float)

    def label_present(self) -> np.ndarray:
        present = np.ones(8, dtype=bool)
        if not self.has_force:
            present[3:7] = False
        return present


@dataclass
class LabeledDataset:
    root: Path
    records: list[LabeledRecord]
    references: dict[str, str]
    sensors: dict[str, SensorInstance]
    config: dict[str, Any] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.records)

    @property
    def label_mode(self) -> str:
        return str(self.config.get("label_mode", "full_state"))

    def episode_ids(self) -> list[str]:
        seen: dict[str, None] = {}
        for r in self.records:
            seen.setdefault(r.episode_id, None)
        return list(seen)

    def subset(self, records: Iterable[LabeledRecord]) -> "LabeledDataset":
        return LabeledDataset(root=self.root, records=list(records), references=self.references, sensors=self.sensors, config=self.config)

    def image_path(self, record: LabeledRecord) -> Path:
        return self.root / record.image

    def load_image(self, record: LabeledRecord) -> TactileImage:
        return load_png(self.image_path(record), record.sensor_id)

    def reference(self, sensor_id: str) -> TactileImage:
        if sensor_id not in self.references:
            raise DatasetError(f"no reference image for sensor {sensor_id!r}")
        return load_png(self.root / self.references[sensor_id], sensor_id, source="reference")

    def labels(self) -> np.ndarray:
        return np.stack([r.label_vector() for r in self.records]) if self.records else np.zeros((0, 8))


# ----------------------------
# Generation
# ----------------------------

def _episode_records(cfg: DatasetConfig, index: int, uv: tuple[float, float], root: Path) -> list[LabeledRecord]:
    n_per = cfg.episodes_per_indenter
    indenter = cfg.indenters[index // n_per]
    sensor = cfg.sensors[index % len(cfg.sensors)]
    seed = cfg.seed ^ index
    episode = random_episode(cfg.geometry, indenter, cfg.frames, seed, uv, modes=cfg.modes, min_depth=cfg.min_depth)
    episode_id = f"{cfg.name}/{sensor.id}/{indenter.name}/e{index:05d}"
    magnitude = asdict(episode.magnitude)

    out: list[LabeledRecord] = []
    for k, (spec, state) in enumerate(episode_states(episode, indenter, cfg.geometry)):
        img = render_contact(cfg.geometry, sensor, indenter, spec, grid=cfg.grid)
        if cfg.augmentation.enabled:
            img = augment(img, seed * 1009 + k, cfg.augmentation.noise_sigma, cfg.augmentation.light_gain_range)
        rel = f"images/e{index:05d}/f{k:02d}.png"
        save_png(img, root / rel)
        full = cfg.label_mode == "full_state"
        out.append(
            LabeledRecord(
                id=f"{cfg.name}-e{index:05d}-f{k:02d}",
                image=rel,
                sensor_id=sensor.id,
                indenter=indenter.name,
                x=state.x,
                f=state.f if full else None,
                tau=state.tau if full else None,
                d=spec.depth,
                episode_id=episode_id,
                frame=k,
                seed=seed,
                uv=episode.uv,
                mode=episode.mode,
                magnitude=magnitude,
                frames=cfg.frames,
            )
        )
    return out


def _write_manifest(root: Path, records: Sequence[LabeledRecord]) -> Path:
    path = root / MANIFEST_NAME
    tmp = path.with_suffix(".jsonl.tmp")
    with tmp.open("w", encoding="utf-8", newline="\n") as fh:
        for r in records:
            fh.write(r.to_json() + "\n")
    os.replace(tmp, path)
    return path


def generate(cfg: DatasetConfig) -> LabeledDataset:
    """Simulate, render and persist every episode; the manifest is written last."""
    root = Path(cfg.output_dir)
    try:
        root.mkdir(parents=True, exist_ok=True)
        marker = root / ".write-check"
        marker.write_text("", encoding="utf-8")
        marker.unlink()
    except OSError as e:
        raise DatasetError(f"output directory {root} is not writable: {e}") from e

    references: dict[str, str] = {}
    for sensor in cfg.sensors:
        rel = f"refs/{sensor.id}.png"
        save_png(reference_image(cfg.geometry, sensor), root / rel)
        sensor.save(root / "sensors" / f"{sensor.id}.json")
        references[sensor.id] = rel

    n = cfg.episodes
    if n > 0:
        u, v = sample_surface_uv(cfg.geometry, n, cfg.seed)
        points = [(float(u[i]), float(v[i])) for i in range(n)]
    else:
        points = []

    def _one(i: int) -> list[LabeledRecord]:
        return _episode_records(cfg, i, points[i], root)

    if cfg.workers > 1 and n > 1:
        with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
            chunks = list(pool.map(_one, range(n)))
    else:
        chunks = [_one(i) for i in range(n)]
    records = [r for chunk in chunks for r in chunk]

    sidecar = {
        "format_version": FORMAT_VERSION,
        "manifest": MANIFEST_NAME,
        "count": len(records),
        "references": references,
        "sensors": {s.id: f"sensors/{s.id}.json" for s in cfg.sensors},
        "config": cfg.snapshot(),
    }
    (root / SIDECAR_NAME).write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    _write_manifest(root, records)
    logger.info("dataset %s: %d episodes, %d records in %s", cfg.name, n, len(records), root)
    return LabeledDataset(
        root=root,
        records=records,
        references=references,
        sensors={s.id: s for s in cfg.sensors},
        config=sidecar["config"],
    )


# ----------------------------
# Split / load
# ----------------------------

def split(dataset: LabeledDataset, train_fraction: float, seed: int) -> tuple[LabeledDataset, LabeledDataset]:
    """Episode-level split: no episode contributes frames to both sides."""
    if not (0.0 < train_fraction < 1.0):
        raise SplitError(f"train_fraction must be in (0, 1), got {train_fraction}")
    episodes = sorted(dataset.episode_ids())
    if len(episodes) < 2:
        raise SplitError(f"need at least 2 episodes to split, got {len(episodes)}")
    order = np.random.default_rng(seed).permutation(len(episodes))
    n_train = min(max(int(round(train_fraction * len(episodes))), 1), len(episodes) - 1)
    train_ids = {episodes[i] for i in order[:n_train]}
    train = [r for r in dataset.records if r.episode_id in train_ids]
    test = [r for r in dataset.records if r.episode_id not in train_ids]
    return dataset.subset(train), dataset.subset(test)


def take_episodes(dataset: LabeledDataset, n_records: int, seed: int) -> LabeledDataset:
    """Whole episodes in seeded order until at least `n_records` records are collected."""
    if n_records <= 0:
        return dataset.subset([])
    episodes = sorted(dataset.episode_ids())
    order = np.random.default_rng(seed).permutation(len(episodes))
    chosen: set[str] = set()
    count = 0
    by_episode: dict[str, int] = {}
    for r in dataset.records:
        by_episode[r.episode_id] = by_episode.get(r.episode_id, 0) + 1
    for i in order:
        if count >= n_records:
            break
        chosen.add(episodes[i])
        count += by_episode[episodes[i]]
    return dataset.subset(r for r in dataset.records if r.episode_id in chosen)


def _check_record(root: Path, r: LabeledRecord) -> None:
    if not (root / r.image).exists():
        raise DatasetError(f"record {r.id}: image {r.image} does not exist")
    if len(r.x) != 3 or not np.all(np.isfinite(r.x)):
        raise DatasetError(f"record {r.id}: position label must be 3 finite values")
    if not (0.0 <= r.d <= 3.0):
        raise DatasetError(f"record {r.id}: depth {r.d} mm out of range")
    if r.f is not None:
        fx, fy, fz = r.f
        if not (FZ_RANGE[0] <= fz <= FZ_RANGE[1]):
            raise DatasetError(f"record {r.id}: f_z = {fz} N outside {FZ_RANGE}")
        if not (FXY_RANGE[0] <= fx <= FXY_RANGE[1] and FXY_RANGE[0] <= fy <= FXY_RANGE[1]):
            raise DatasetError(f"record {r.id}: tangential force ({fx}, {fy}) N outside {FXY_RANGE}")
    if r.tau is not None and not (TAU_RANGE[0] <= r.tau <= TAU_RANGE[1]):
        raise DatasetError(f"record {r.id}: torsion {r.tau} N*m outside {TAU_RANGE}")


def load(manifest_path: Path) -> LabeledDataset:
    """Parse and validate a manifest; fails on the first bad record."""
    manifest_path = Path(manifest_path)
    if not manifest_path.exists():
        raise DatasetError(f"manifest not found: {manifest_path}")
    root = manifest_path.parent
    sidecar_path = root / SIDECAR_NAME
    sidecar: dict[str, Any] = {}
    if sidecar_path.exists():
        sidecar = json.loads(sidecar_path.read_text(encoding="utf-8"))

    records: list[LabeledRecord] = []
    seen: set[str] = set()
    with manifest_path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = LabeledRecord.from_dict(json.loads(line))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
                raise ManifestParseError(f"{manifest_path}:{lineno}: {e}") from e
            if rec.id in seen:
                raise DatasetError(f"duplicate record id {rec.id} at line {lineno}")
            seen.add(rec.id)
            _check_record(root, rec)
            records.append(rec)

    sensors = {
        sid: SensorInstance.load(root / rel) for sid, rel in sorted(sidecar.get("sensors", {}).items())
    }
    return LabeledDataset(
        root=root,
        records=records,
        references=dict(sidecar.get("references", {})),
        sensors=sensors,
        config=dict(sidecar.get("config", {})),
    )


def rederive_labels(
    record: LabeledRecord,
    geom: Optional[ShellGeometry] = None,
) -> tuple[tuple[float, float, float], Optional[tuple[float, float, float]], Optional[float], float]:
    """Rebuild (x, f, tau, d) for a record from its stored episode metadata."""
    indenter = Indenter.from_name(record.indenter)
    episode = make_episode(record.uv, record.mode, Magnitude(**record.magnitude), record.frames, record.seed, indenter)
    spec, state = episode_states(episode, indenter, geom)[record.frame]
    if record.f is None:
        return state.x, None, None, spec.depth
    return state.x, state.f, state.tau, spec.depth


def main(manifest: str) -> None:
    ds = load(Path(manifest))
    print(f"manifest ok: {len(ds)} records, {len(ds.episode_ids())} episodes, sensors={sorted(ds.references)}")


if __name__ == "__main__":
    ap = argparse.ArgumentParser(description="Validate a dataset manifest")
    ap.add_argument("manifest")
    args = ap.parse_args()

    main(args.manifest)
