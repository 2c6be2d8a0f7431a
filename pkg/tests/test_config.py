from __future__ import annotations

from pathlib import Path

import pytest

import twin_config
from tactile.errors import ConfigError
from tactile.photometric_renderer import SensorInstance

ROOT = Path(__file__).resolve().parents[1]


def _write(tmp_path: Path, text: str) -> Path:
    p = tmp_path / "twin.yml"
    p.write_text(text, encoding="utf-8")
    return p


@pytest.fixture(autouse=True)
def clean_env(monkeypatch: pytest.MonkeyPatch) -> None:
    for key in ("TWIN_OUTPUT_ROOT", "TWIN_SEED", "TWIN_PAPER_SCALE"):
        monkeypatch.delenv(key, raising=False)


def test_defaults_without_a_file(tmp_path: Path, monkeypatch: pytest.MonkeyPatch) -> None:
    monkeypatch.chdir(tmp_path)
    cfg = twin_config.load_cfg()
    assert cfg.source is None
    assert cfg.output_root == Path("out")
    assert cfg.seed == 0 and cfg.paper_scale is False
    assert cfg.grid == (256, 128)
    assert [s["id"] for s in cfg.sensors] == ["s0"]


def test_example_config_builds_everything() -> None:
    cfg = twin_config.load_cfg(str(ROOT / "twin.yml"))
    assert twin_config.geometry_from_cfg(cfg).apex_height == pytest.approx(26.0)
    assert twin_config.camera_from_cfg(cfg).image_size == 480
    ds = twin_config.dataset_config_from_cfg(cfg)
    assert ds.name == "sphere3"
    assert ds.episodes_per_indenter == 20
    assert ds.output_dir == Path("out") / "data" / "sphere3"
    assert twin_config.regressor_config_from_cfg(cfg).outputs == ("x", "f", "tau", "d")
    spec = twin_config.experiment_from_cfg(cfg, "transfer")
    assert spec.seeds == (0, 1, 2)
    assert spec.transfer.finetune_sizes == (0, 250, 500, 1000, 2000)


def test_environment_wins_over_file(tmp_path: Path, monkeypatch: pytest.MonkeyPatch) -> None:
    p = _write(tmp_path, "output_root: from-file\nseed: 3\npaper_scale: false\n")
    monkeypatch.setenv("TWIN_OUTPUT_ROOT", str(tmp_path / "env"))
    monkeypatch.setenv("TWIN_SEED", "11")
    monkeypatch.setenv("TWIN_PAPER_SCALE", "yes")
    cfg = twin_config.load_cfg(str(p))
    assert cfg.output_root == tmp_path / "env"
    assert cfg.seed == 11
    assert cfg.paper_scale is True
    assert cfg.source == p


def test_cli_overrides_win_over_environment(tmp_path: Path, monkeypatch: pytest.MonkeyPatch) -> None:
    monkeypatch.setenv("TWIN_SEED", "11")
    cfg = twin_config.apply_overrides(twin_config.load_cfg(str(_write(tmp_path, "seed: 2\n"))), seed=5, paper_scale=True)
    assert cfg.seed == 5 and cfg.paper_scale is True
    assert twin_config.regressor_config_from_cfg(cfg).seed == 5


@pytest.mark.parametrize(
    "text",
    [
        "seed: [1, 2\n",
        "- just\n- a list\n",
        "seed: abc\n",
        "grid: [256]\n",
        "camera: 5\n",
        "sensors: [s0]\n",
    ],
)
def test_bad_files_raise_config_error(tmp_path: Path, text: str) -> None:
    with pytest.raises(ConfigError):
        twin_config.load_cfg(str(_write(tmp_path, text)))


def test_missing_file(tmp_path: Path) -> None:
    with pytest.raises(ConfigError, match="not found"):
        twin_config.load_cfg(str(tmp_path / "nope.yml"))


def _dataset(cfg):
    return twin_config.dataset_config_from_cfg(cfg)


def _experiment(cfg):
    return twin_config.experiment_from_cfg(cfg, "transfer")


@pytest.mark.parametrize(
    "text,build",
    [
        ("geometry: {cyl_radius: 12, cyl_height: 14, hemisphere_radius: 10}\n", _dataset),
        ("camera: {position_z: 1.0}\n", _dataset),
        ("sensors: [{id: a, pattern: Rainbow}]\n", _dataset),
        ("dataset: {indenters: [cone-3]}\n", _dataset),
        ("dataset: {regime: everything}\n", _dataset),
        ("dataset: {label_mode: forces}\n", _dataset),
        ("estimator: {backbone: vgg}\n", _experiment),
        ("experiment: {train_fraction: 1.5}\n", _experiment),
        ("experiment: {transfer: {sources: 0}}\n", _experiment),
    ],
)
def test_invalid_sections_raise_config_error(tmp_path: Path, text: str, build) -> None:
    cfg = twin_config.load_cfg(str(_write(tmp_path, text)))
    with pytest.raises(ConfigError):
        build(cfg)


def test_regime_sizes_the_dataset(tmp_path: Path) -> None:
    cfg = twin_config.load_cfg(str(_write(tmp_path, "dataset: {regime: pretrain, frames: 5, indenters: [sphere-3]}\n")))
    assert twin_config.dataset_config_from_cfg(cfg).episodes_per_indenter == 45


def test_sensor_from_saved_instance(tmp_path: Path) -> None:
    inst = SensorInstance.create("saved", "RGBRGBRGB", False, seed=4)
    inst.save(tmp_path / "sensors" / "saved.json")
    cfg = twin_config.load_cfg(str(_write(tmp_path, "sensors:\n  - path: sensors/saved.json\n")))
    (loaded,) = twin_config.sensors_from_cfg(cfg)
    assert loaded.to_dict() == inst.to_dict()

    cfg = twin_config.load_cfg(str(_write(tmp_path, "sensors:\n  - path: sensors/other.json\n")))
    with pytest.raises(ConfigError):
        twin_config.sensors_from_cfg(cfg)


def test_unknown_experiment_name(tmp_path: Path) -> None:
    cfg = twin_config.load_cfg(str(_write(tmp_path, "seed: 1\n")))
    with pytest.raises(ConfigError):
        twin_config.experiment_from_cfg(cfg, "ablation")
