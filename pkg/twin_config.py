from __future__ import annotations

import math
import os
from dataclasses import dataclass, fields, replace
from pathlib import Path
from typing import Any, Optional

import yaml

from dataset_forge import AugmentationConfig, DatasetConfig, regime_size
from experiments import EXPERIMENTS, ExperimentSpec, TransferSpec
from tactile.contact_mechanics import MODES, Indenter
from tactile.errors import ConfigError, TwinError
from tactile.markers import MarkerLayout
from tactile.photometric_renderer import CameraModel, SensorInstance
from tactile.regressor import RegressorConfig
from tactile.shell_geometry import ShellGeometry

DEFAULT_CFG = "twin.yml"
DEFAULT_SENSOR = {"id": "s0", "pattern": "RRRGGGBBB", "markers": True, "perturb": False}


@dataclass
class Cfg:
    output_root: Path
    seed: int
    paper_scale: bool
    geometry: dict
    grid: tuple[int, int]
    camera: dict
    sensors: list[dict]
    dataset: dict
    estimator: dict
    experiment: dict
    workers: int = 1
    source: Optional[Path] = None


def _section(raw: dict, key: str) -> dict:
    value = raw.get(key) or {}
    if not isinstance(value, dict):
        raise ConfigError(f"config section {key!r} must be a mapping, got {type(value).__name__}")
    return value


def _int(value: Any, key: str) -> int:
    try:
        return int(value)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{key} must be an integer, got {value!r}") from e


def _flag(value: Any) -> bool:
    if isinstance(value, str):
        return value.strip().lower() in ("1", "true", "yes", "on")
    return bool(value)


def _pair(value: Any, key: str) -> tuple[int, int]:
    if not isinstance(value, (list, tuple)) or len(value) != 2:
        raise ConfigError(f"{key} must be a pair of integers, got {value!r}")
    return _int(value[0], key), _int(value[1], key)


def load_cfg(path: Optional[str] = None) -> Cfg:
    """Read a YAML (or JSON) config; environment variables win over the file.

    Without a path, `twin.yml` in the working directory is used when present and
    built-in defaults otherwise.
    """
    if path is None:
        p = Path(DEFAULT_CFG)
        raw = yaml.safe_load(p.read_text(encoding="utf-8")) if p.exists() else {}
        source = p if p.exists() else None
    else:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file not found: {p}")
        try:
            raw = yaml.safe_load(p.read_text(encoding="utf-8"))
        except yaml.YAMLError as e:
            raise ConfigError(f"{p}: {e}") from e
        source = p
    raw = raw or {}
    if not isinstance(raw, dict):
        raise ConfigError(f"config root must be a mapping, got {type(raw).__name__}")

    output_root = Path(os.getenv("TWIN_OUTPUT_ROOT") or raw.get("output_root") or "out")
    seed = _int(os.getenv("TWIN_SEED") or raw.get("seed") or 0, "seed")
    env_scale = os.getenv("TWIN_PAPER_SCALE")
    paper_scale = _flag(env_scale) if env_scale is not None else _flag(raw.get("paper_scale", False))

    sensors = raw.get("sensors") or [dict(DEFAULT_SENSOR)]
    if not isinstance(sensors, list) or not all(isinstance(s, dict) for s in sensors):
        raise ConfigError("sensors must be a list of mappings")

    return Cfg(
        output_root=output_root,
        seed=seed,
        paper_scale=paper_scale,
        geometry=_section(raw, "geometry"),
        grid=_pair(raw.get("grid", (256, 128)), "grid"),
        camera=_section(raw, "camera"),
        sensors=sensors,
        dataset=_section(raw, "dataset"),
        estimator=_section(raw, "estimator"),
        experiment=_section(raw, "experiment"),
        workers=_int(raw.get("workers", 1), "workers"),
        source=source,
    )


def apply_overrides(cfg: Cfg, seed: Optional[int] = None, paper_scale: Optional[bool] = None) -> Cfg:
    """CLI flags win over the file and the environment."""
    if seed is not None:
        cfg = replace(cfg, seed=seed)
    if paper_scale:
        cfg = replace(cfg, paper_scale=True)
    return cfg


# ----------------------------
# Builders
# ----------------------------

def _build(cls, data: dict, what: str, **extra):
    names = {f.name for f in fields(cls)}
    kwargs = {k: v for k, v in data.items() if k in names}
    kwargs.update(extra)
    try:
        return cls(**kwargs)
    except (TypeError, ValueError, TwinError) as e:
        if isinstance(e, ConfigError):
            raise
        raise ConfigError(f"invalid {what}: {e}") from e


def geometry_from_cfg(cfg: Cfg) -> ShellGeometry:
    return _build(ShellGeometry, cfg.geometry, "geometry")


def camera_from_cfg(cfg: Cfg) -> CameraModel:
    return _build(CameraModel, cfg.camera, "camera")


def _markers(value: Any) -> MarkerLayout | bool:
    if isinstance(value, dict):
        data = dict(value)
        for key in ("rings", "counts"):
            if key in data:
                data[key] = tuple(data[key])
        return _build(MarkerLayout, data, "marker layout")
    return bool(value)


def sensor_from_cfg(cfg: Cfg, entry: dict, index: int = 0) -> SensorInstance:
    """One sensor instance; `path` loads a saved instance, otherwise one is created from its seed."""
    if entry.get("path"):
        p = Path(entry["path"])
        if cfg.source is not None and not p.is_absolute():
            p = cfg.source.parent / p
        if not p.exists():
            raise ConfigError(f"sensor file not found: {p}")
        return SensorInstance.load(p)
    sid = str(entry.get("id") or f"s{index}")
    seed = _int(entry.get("seed", cfg.seed + index), f"sensors[{index}].seed")
    try:
        return SensorInstance.create(
            sid,
            pattern=str(entry.get("pattern", "RRRGGGBBB")),
            markers=_markers(entry.get("markers", True)),
            seed=seed,
            perturb=_flag(entry.get("perturb", False)),
            camera=camera_from_cfg(cfg),
        )
    except TwinError as e:
        raise ConfigError(f"invalid sensor {sid!r}: {e}") from e


def sensors_from_cfg(cfg: Cfg) -> list[SensorInstance]:
    return [sensor_from_cfg(cfg, entry, i) for i, entry in enumerate(cfg.sensors)]


def _indenters(names: Any) -> tuple[Indenter, ...]:
    if isinstance(names, str):
        names = [names]
    try:
        return tuple(Indenter.from_name(str(n)) for n in names)
    except TwinError as e:
        raise ConfigError(str(e)) from e


def dataset_config_from_cfg(cfg: Cfg, name: Optional[str] = None, output_dir: Optional[Path] = None) -> DatasetConfig:
    """The `dataset` section; `regime` sizes the set from the named record count."""
    ds = cfg.dataset
    name = name or str(ds.get("name", "dataset"))
    indenters = _indenters(ds.get("indenters", ["sphere-3"]))
    frames = _int(ds.get("frames", 10), "dataset.frames")
    if "regime" in ds:
        try:
            records = regime_size(str(ds["regime"]), cfg.paper_scale)
        except TwinError as e:
            raise ConfigError(str(e)) from e
        per = max(1, math.ceil(records / (max(frames, 1) * max(len(indenters), 1))))
    else:
        per = _int(ds.get("episodes_per_indenter", 10), "dataset.episodes_per_indenter")
    aug = _build(
        AugmentationConfig,
        {k: (tuple(v) if k == "light_gain_range" else v) for k, v in _section(ds, "augmentation").items()},
        "augmentation",
    )
    return _build(
        DatasetConfig,
        {},
        "dataset",
        name=name,
        output_dir=Path(output_dir) if output_dir is not None else cfg.output_root / "data" / name,
        sensors=tuple(sensors_from_cfg(cfg)),
        indenters=indenters,
        episodes_per_indenter=per,
        frames=frames,
        label_mode=str(ds.get("label_mode", "full_state")),
        modes=tuple(ds.get("modes", MODES)),
        augmentation=aug,
        seed=_int(ds.get("seed", cfg.seed), "dataset.seed"),
        geometry=geometry_from_cfg(cfg),
        grid=cfg.grid,
        min_depth=float(ds.get("min_depth", 0.5)),
        workers=_int(ds.get("workers", cfg.workers), "dataset.workers"),
    )


def regressor_config_from_cfg(cfg: Cfg) -> RegressorConfig:
    data = dict(cfg.estimator)
    if "outputs" in data:
        data["outputs"] = tuple(data["outputs"])
    data.setdefault("seed", cfg.seed)
    return _build(RegressorConfig, data, "estimator")


def transfer_from_cfg(cfg: Cfg) -> TransferSpec:
    data = dict(_section(cfg.experiment, "transfer"))
    for key in ("finetune_sizes", "source_seeds"):
        if key in data:
            data[key] = tuple(_int(v, f"transfer.{key}") for v in data[key])
    spec = _build(TransferSpec, data, "transfer")
    if spec.sources < 1:
        raise ConfigError(f"transfer needs at least one source sensor, got {spec.sources}")
    return spec


def experiment_from_cfg(cfg: Cfg, name: str) -> ExperimentSpec:
    if name not in EXPERIMENTS:
        raise ConfigError(f"experiment must be one of {EXPERIMENTS}, got {name!r}")
    ex = cfg.experiment
    data: dict[str, Any] = {}
    if "configs" in ex:
        data["configs"] = tuple((str(p), _flag(m)) for p, m in ex["configs"])
    if "train_sizes" in ex:
        data["train_sizes"] = tuple(_int(v, "experiment.train_sizes") for v in ex["train_sizes"])
    if "seeds" in ex:
        data["seeds"] = tuple(_int(v, "experiment.seeds") for v in ex["seeds"])
    if "heatmap_bins" in ex:
        data["heatmap_bins"] = _pair(ex["heatmap_bins"], "experiment.heatmap_bins")
    if "sizes" in ex:
        sizes = _section(ex, "sizes")
        data["sizes"] = {str(k): _int(v, f"experiment.sizes.{k}") for k, v in sizes.items()}
    for key in ("frames", "workers"):
        if key in ex:
            data[key] = _int(ex[key], f"experiment.{key}")
    for key in ("train_fraction", "min_depth"):
        if key in ex:
            data[key] = float(ex[key])
    if "depth_model" in ex:
        data["depth_model"] = _flag(ex["depth_model"])
    data.setdefault("workers", cfg.workers)

    spec = _build(
        ExperimentSpec,
        data,
        "experiment",
        name=name,
        output_dir=cfg.output_root,
        seed=cfg.seed,
        paper_scale=cfg.paper_scale,
        geometry=geometry_from_cfg(cfg),
        camera=camera_from_cfg(cfg),
        grid=cfg.grid,
        estimator=regressor_config_from_cfg(cfg),
        transfer=transfer_from_cfg(cfg),
    )
    if not (0.0 < spec.train_fraction < 1.0):
        raise ConfigError(f"train_fraction must be in (0, 1), got {spec.train_fraction}")
    if spec.frames < 2:
        raise ConfigError(f"frames must be >= 2, got {spec.frames}")
    return spec
