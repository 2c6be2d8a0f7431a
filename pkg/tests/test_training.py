from __future__ import annotations

import logging
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest
import torch

from dataset_forge import DatasetConfig, LabeledDataset, generate, split
from tactile.contact_mechanics import Indenter
from tactile.errors import LeakageError, ModeError, SchemaError, UninitializedModelError
from tactile.metrics import evaluate
from tactile.photometric_renderer import CameraModel, SensorInstance
from tactile.regressor import RegressorConfig, TactileRegressor, select_columns
from tactile.shell_geometry import ShellGeometry, project_points
from tactile.training import (
    dataset_loss,
    finetune,
    gradient_check,
    light_jitter,
    load_model,
    new_model,
    predict,
    pretrain_localization,
    save_model,
    train,
    weights_checksum,
)

FAST = RegressorConfig(backbone="conv2", epochs=2, batch_size=8, lr=1e-2, input_size=32, seed=5)


def _position_only(ds: LabeledDataset) -> LabeledDataset:
    records = [replace(r, f=None, tau=None) for r in ds.records]
    return LabeledDataset(root=ds.root, records=records, references=ds.references, sensors=ds.sensors, config={**ds.config, "label_mode": "position_only"})


@pytest.fixture(scope="module")
def trained(tiny_dataset: LabeledDataset):
    return train(tiny_dataset, FAST)


def test_training_is_deterministic(tiny_dataset: LabeledDataset, trained) -> None:
    again = train(tiny_dataset, FAST)
    assert weights_checksum(again) == weights_checksum(trained)
    other = train(tiny_dataset, replace(FAST, seed=6))
    assert weights_checksum(other) != weights_checksum(trained)


def test_training_records_history(trained, tiny_dataset: LabeledDataset) -> None:
    assert trained.initialized
    assert trained.trained_columns.all()
    assert trained.trained_episodes == frozenset(tiny_dataset.episode_ids())
    (entry,) = trained.history
    assert entry["phase"] == "finetune"
    assert entry["records"] == len(tiny_dataset)
    assert len(entry["epoch_losses"]) == 2


def test_loss_goes_down(tiny_dataset: LabeledDataset) -> None:
    model = train(tiny_dataset, replace(FAST, epochs=25))
    entry = model.history[-1]
    assert entry["final_loss"] < entry["initial_loss"]
    assert dataset_loss(model, tiny_dataset) == pytest.approx(entry["final_loss"])


def test_prediction_lies_on_the_membrane(trained, tiny_dataset: LabeledDataset, geom: ShellGeometry) -> None:
    r = tiny_dataset.records[3]
    est = predict(trained, tiny_dataset.reference(r.sensor_id), tiny_dataset.load_image(r))
    pos = np.asarray(est.x)
    np.testing.assert_allclose(project_points(geom, pos[None, :])[0], pos, atol=1e-9)
    assert est.d >= 0.0
    assert trained.estimate(tiny_dataset.reference(r.sensor_id), tiny_dataset.load_image(r)) == est


def test_untrained_model_refuses_to_predict(tiny_dataset: LabeledDataset) -> None:
    r = tiny_dataset.records[0]
    with pytest.raises(UninitializedModelError):
        predict(new_model(FAST), tiny_dataset.reference(r.sensor_id), tiny_dataset.load_image(r))


def test_checkpoint_round_trip(tmp_path: Path, trained, tiny_dataset: LabeledDataset) -> None:
    save_model(trained, tmp_path / "m.pt")
    back = load_model(tmp_path / "m.pt")
    assert weights_checksum(back) == weights_checksum(trained)
    assert back.config == trained.config
    assert back.trained_episodes == trained.trained_episodes
    r = tiny_dataset.records[5]
    ref, img = tiny_dataset.reference(r.sensor_id), tiny_dataset.load_image(r)
    assert predict(back, ref, img) == predict(trained, ref, img)


def test_checkpoint_version_is_checked(tmp_path: Path) -> None:
    torch.save({"format_version": 99}, tmp_path / "old.pt")
    with pytest.raises(SchemaError):
        load_model(tmp_path / "old.pt")


def test_pretraining_trains_position_only(tiny_dataset: LabeledDataset) -> None:
    model = pretrain_localization(_position_only(tiny_dataset), FAST, strict=True)
    assert model.trained_columns.tolist() == select_columns(("x",)).tolist()
    r = tiny_dataset.records[2]
    est = predict(model, tiny_dataset.reference(r.sensor_id), tiny_dataset.load_image(r))
    assert est.f == (0.0, 0.0, 0.0) and est.tau == 0.0 and est.d == 0.0


def test_pretraining_on_full_state_data(tiny_dataset: LabeledDataset, caplog: pytest.LogCaptureFixture) -> None:
    with pytest.raises(ModeError):
        pretrain_localization(tiny_dataset, FAST, strict=True)
    with caplog.at_level(logging.WARNING):
        model = pretrain_localization(tiny_dataset, FAST)
    assert "full_state" in caplog.text
    assert model.trained_columns.sum() == 3
    with pytest.raises(ModeError):
        pretrain_localization(tiny_dataset.subset([]), FAST)


def test_finetune_copies_and_checks_leakage(tiny_dataset: LabeledDataset) -> None:
    train_ds, test_ds = split(tiny_dataset, 0.5, seed=1)
    base = pretrain_localization(_position_only(train_ds), FAST)
    before = weights_checksum(base)

    assert finetune(base, train_ds.subset([]), FAST) is base
    tuned = finetune(base, train_ds, FAST, test_episodes=set(test_ds.episode_ids()))
    assert tuned is not base
    assert weights_checksum(base) == before
    assert tuned.trained_columns.all()
    assert [h["phase"] for h in tuned.history] == ["pretrain", "finetune"]

    with pytest.raises(LeakageError):
        finetune(base, test_ds, FAST, test_episodes=set(test_ds.episode_ids()))
    with pytest.raises(LeakageError):
        finetune(base, train_ds.subset([]), FAST, test_episodes=set(train_ds.episode_ids()))
    with pytest.raises(ModeError):
        finetune(base, _position_only(train_ds), FAST)


def test_light_jitter_scales_both_halves_alike() -> None:
    x = torch.full((4, 6, 8, 8), 0.5)
    out = light_jitter(x, 0.2, torch.Generator().manual_seed(0))
    torch.testing.assert_close(out[:, :3], out[:, 3:])
    assert not torch.equal(out, x)
    assert light_jitter(x, 0.0, torch.Generator()) is x


def test_gradients_match_finite_differences() -> None:
    torch.manual_seed(0)
    net = TactileRegressor("conv2")
    x = torch.rand(3, 6, 32, 32)
    target = torch.rand(3, 8)
    weight = torch.ones(3, 8)
    weight[0, :3] = 0.0
    assert gradient_check(net, x, target, weight) < 1e-3


def _single_sensor(root: Path, name: str, sensor: SensorInstance, episodes: int, frames: int, seed: int, label_mode: str = "full_state") -> LabeledDataset:
    return generate(
        DatasetConfig(
            name=name,
            output_dir=root / name,
            sensors=(sensor,),
            indenters=(Indenter.sphere(4.0),),
            episodes_per_indenter=episodes,
            frames=frames,
            label_mode=label_mode,
            seed=seed,
        )
    )


@pytest.mark.slow
def test_regressor_fits_a_hundred_samples(tmp_path: Path) -> None:
    sensor = SensorInstance.create("fit", "RRRGGGBBB", True, seed=0, perturb=False, camera=CameraModel(image_size=128))
    ds = _single_sensor(tmp_path, "fit", sensor, episodes=50, frames=2, seed=3)
    assert len(ds) == 100
    model = train(ds, RegressorConfig(backbone="conv4", epochs=300, batch_size=10, lr=1e-2, input_size=64, seed=0))
    errors = [
        float(np.linalg.norm(np.asarray(predict(model, ds.reference(r.sensor_id), ds.load_image(r)).x) - np.asarray(r.x)))
        for r in ds.records
        if r.d > 0.0
    ]
    assert float(np.mean(errors)) <= 1.0


@pytest.mark.slow
def test_finetuning_beats_zero_shot(tmp_path: Path) -> None:
    camera = CameraModel(image_size=96)
    sim = SensorInstance.create("sim", "White", True, seed=0, perturb=False, camera=camera)
    real = SensorInstance.create("real", "RGBRGBRGB", True, seed=1, perturb=True, camera=camera)
    sim_ds = _single_sensor(tmp_path, "sim", sim, episodes=60, frames=3, seed=1, label_mode="position_only")
    real_ds = _single_sensor(tmp_path, "real", real, episodes=60, frames=3, seed=2)
    train_ds, test_ds = split(real_ds, 0.7, seed=0)
    config = RegressorConfig(backbone="conv2", epochs=30, batch_size=16, lr=1e-2, input_size=48, seed=0)

    base = pretrain_localization(sim_ds, config)
    zero_shot = evaluate(base, test_ds)
    tuned = finetune(base, train_ds, config, test_episodes=set(test_ds.episode_ids()))
    assert evaluate(tuned, test_ds).mean("position") < zero_shot.mean("position")
