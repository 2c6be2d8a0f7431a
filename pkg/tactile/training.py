from __future__ import annotations

import copy
import hashlib
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, Optional

import numpy as np
import torch
from torch.utils.data import DataLoader, Dataset

from .baseline import StateEstimate
from .errors import LeakageError, ModeError, SchemaError, UninitializedModelError
from .photometric_renderer import TactileImage
from .regressor import (
    OUTPUT_SLICES,
    OUTPUT_WIDTH,
    Normalizer,
    RegressorConfig,
    TactileRegressor,
    label_weights,
    masked_mse,
    preprocess,
    select_columns,
)
from .shell_geometry import ShellGeometry, project_to_surface

if TYPE_CHECKING:
    from dataset_forge import LabeledDataset

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


@dataclass
class TrainedModel:
    net: TactileRegressor
    config: RegressorConfig
    normalizer: Normalizer = field(default_factory=Normalizer)
    trained_columns: np.ndarray = field(default_factory=lambda: np.zeros(OUTPUT_WIDTH, dtype=bool))
    trained_episodes: frozenset[str] = frozenset()
    history: list[dict] = field(default_factory=list)
    geometry: ShellGeometry = field(default_factory=ShellGeometry)

    @property
    def initialized(self) -> bool:
        return bool(self.trained_columns.any())

    def estimate(self, ref: TactileImage, img: TactileImage) -> StateEstimate:
        return predict(self, ref, img)


def new_model(config: RegressorConfig, geometry: Optional[ShellGeometry] = None) -> TrainedModel:
    torch.manual_seed(config.seed)
    net = TactileRegressor(config.backbone)
    return TrainedModel(net=net, config=config, geometry=geometry or ShellGeometry())


# ----------------------------
# Data
# ----------------------------

class PairDataset(Dataset):
    """(stacked input, normalised target, loss weight) per record; images read lazily."""

    def __init__(self, dataset: "LabeledDataset", normalizer: Normalizer, columns: np.ndarray, size: int) -> None:
        self.dataset = dataset
        self.size = size
        y = dataset.labels()
        present = np.stack([r.label_present() for r in dataset.records]) if dataset.records else np.zeros((0, OUTPUT_WIDTH), dtype=bool)
        self.targets = torch.from_numpy(normalizer.normalize(y).astype(np.float32)) if len(y) else torch.zeros((0, OUTPUT_WIDTH))
        self.weights = torch.from_numpy(label_weights(y, columns, present).astype(np.float32))
        self._refs: dict[str, TactileImage] = {}

    def __len__(self) -> int:
        return len(self.dataset.records)

    def _ref(self, sensor_id: str) -> TactileImage:
        if sensor_id not in self._refs:
            self._refs[sensor_id] = self.dataset.reference(sensor_id)
        return self._refs[sensor_id]

    def __getitem__(self, i: int):
        r = self.dataset.records[i]
        x = preprocess(self._ref(r.sensor_id), self.dataset.load_image(r), self.size)
        return torch.from_numpy(x), self.targets[i], self.weights[i]


def light_jitter(x: torch.Tensor, amount: float, generator: torch.Generator) -> torch.Tensor:
    """Same random per-channel gain on the reference and the contact half of each sample."""
    if amount <= 0.0:
        return x
    gain = 1.0 + (torch.rand((x.shape[0], 3, 1, 1), generator=generator) * 2.0 - 1.0) * amount
    gain = torch.cat([gain, gain], dim=1).to(x.dtype)
    return (x * gain).clamp(0.0, 1.0)


def dataset_loss(model: TrainedModel, dataset: "LabeledDataset", columns: Optional[np.ndarray] = None) -> float:
    """Eval-mode masked loss over a dataset (normalised units)."""
    cols = model.trained_columns if columns is None else columns
    data = PairDataset(dataset, model.normalizer, cols, model.config.input_size)
    if len(data) == 0:
        return 0.0
    model.net.eval()
    total = 0.0
    with torch.no_grad():
        for x, y, w in DataLoader(data, batch_size=model.config.batch_size, shuffle=False, num_workers=0):
            total += float(masked_mse(model.net(x), y, w)) * x.shape[0]
    return total / len(data)


def _fit(model: TrainedModel, dataset: "LabeledDataset", config: RegressorConfig, columns: np.ndarray, phase: str) -> TrainedModel:
    y = dataset.labels()
    present = np.stack([r.label_present() for r in dataset.records])
    fit_cols = columns & present.all(axis=0)
    model.normalizer.fit(y, dataset.episode_ids(), columns=fit_cols)

    torch.manual_seed(config.seed)
    gen = torch.Generator().manual_seed(config.seed)
    jitter_gen = torch.Generator().manual_seed(config.seed + 1)
    data = PairDataset(dataset, model.normalizer, columns, config.input_size)
    loader = DataLoader(data, batch_size=config.batch_size, shuffle=True, generator=gen, num_workers=0)
    optim = torch.optim.SGD(model.net.parameters(), lr=config.lr, momentum=config.momentum)

    initial = dataset_loss(model, dataset, columns)
    epochs: list[float] = []
    for epoch in range(config.epochs):
        model.net.train()
        running = 0.0
        for x, target, w in loader:
            x = light_jitter(x, config.light_jitter, jitter_gen)
            optim.zero_grad()
            loss = masked_mse(model.net(x), target, w)
            loss.backward()
            optim.step()
            running += float(loss.detach()) * x.shape[0]
        epochs.append(running / len(data))
        logger.info("%s epoch %d/%d: loss=%.5f", phase, epoch + 1, config.epochs, epochs[-1])
    final = dataset_loss(model, dataset, columns)

    model.trained_columns = model.trained_columns | columns
    model.trained_episodes = model.trained_episodes | frozenset(dataset.episode_ids())
    model.history.append(
        {"phase": phase, "records": len(data), "initial_loss": initial, "final_loss": final, "epoch_losses": epochs}
    )
    model.net.eval()
    return model


def pretrain_localization(
    sim_dataset: "LabeledDataset",
    config: RegressorConfig,
    strict: bool = False,
    geometry: Optional[ShellGeometry] = None,
) -> TrainedModel:
    """Train the encoder and the position outputs only."""
    if sim_dataset.label_mode != "position_only":
        if strict:
            raise ModeError(f"pre-training expects a position_only dataset, got {sim_dataset.label_mode}")
        logger.warning("pre-training on a %s dataset; only position labels are used", sim_dataset.label_mode)
    if len(sim_dataset) == 0:
        raise ModeError("pre-training needs at least one record")
    model = new_model(config, geometry)
    return _fit(model, sim_dataset, config, select_columns(["x"]), "pretrain")


def finetune(
    model: TrainedModel,
    full_dataset: "LabeledDataset",
    config: RegressorConfig,
    test_episodes: Optional[set[str]] = None,
) -> TrainedModel:
    """Train every configured output on full-state data; returns a new model.

    An empty dataset returns `model` itself (zero-shot passthrough).
    """
    if test_episodes:
        seen = model.normalizer.source_episodes | frozenset(full_dataset.episode_ids())
        overlap = seen & set(test_episodes)
        if overlap:
            raise LeakageError(f"normalizer or training data touches {len(overlap)} test episode(s), e.g. {sorted(overlap)[0]}")
    if len(full_dataset) == 0:
        return model
    if any(not r.has_force for r in full_dataset.records):
        raise ModeError("fine-tuning needs full_state labels")
    tuned = copy.deepcopy(model)
    tuned.config = config
    return _fit(tuned, full_dataset, config, config.output_mask(), "finetune")


def train(dataset: "LabeledDataset", config: RegressorConfig, geometry: Optional[ShellGeometry] = None) -> TrainedModel:
    """From-scratch training on full-state data."""
    return finetune(new_model(config, geometry), dataset, config)


def predict(model: TrainedModel, ref: TactileImage, img: TactileImage) -> StateEstimate:
    if not model.initialized:
        raise UninitializedModelError("model has not been trained")
    x = torch.from_numpy(preprocess(ref, img, model.config.input_size))
    model.net.eval()
    with torch.no_grad():
        z = model.net(x).double().numpy()[0]
    y = np.where(model.trained_columns, model.normalizer.denormalize(z), 0.0)
    y = np.where(np.isfinite(y), y, 0.0)
    pos = project_to_surface(model.geometry, y[OUTPUT_SLICES["x"]]).position
    y[OUTPUT_SLICES["x"]] = pos
    y[7] = max(y[7], 0.0)
    return StateEstimate.from_vector(y)


# ----------------------------
# Checks and persistence
# ----------------------------

def weights_checksum(model: TrainedModel | torch.nn.Module) -> str:
    net = model.net if isinstance(model, TrainedModel) else model
    h = hashlib.sha256()
    for key, tensor in net.state_dict().items():
        h.update(key.encode("utf-8"))
        h.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def gradient_check(
    net: torch.nn.Module,
    x: torch.Tensor,
    target: torch.Tensor,
    weight: Optional[torch.Tensor] = None,
    eps: float = 1e-6,
    samples_per_tensor: int = 8,
    seed: int = 0,
) -> float:
    """Largest relative gap between autograd and central-difference parameter gradients."""
    net = copy.deepcopy(net).double().eval()
    x = x.double()
    target = target.double()
    weight = torch.ones_like(target) if weight is None else weight.double()

    net.zero_grad()
    masked_mse(net(x), target, weight).backward()
    rng = np.random.default_rng(seed)
    worst = 0.0
    with torch.no_grad():
        for p in net.parameters():
            flat = p.view(-1)
            grad = p.grad.view(-1)
            picks = rng.choice(flat.numel(), size=min(samples_per_tensor, flat.numel()), replace=False)
            for i in picks:
                old = float(flat[i])
                flat[i] = old + eps
                up = float(masked_mse(net(x), target, weight))
                flat[i] = old - eps
                down = float(masked_mse(net(x), target, weight))
                flat[i] = old
                numeric = (up - down) / (2.0 * eps)
                analytic = float(grad[i])
                scale = max(abs(numeric), abs(analytic), 1e-6)
                worst = max(worst, abs(numeric - analytic) / scale)
    return worst


def save_model(model: TrainedModel, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    cfg = asdict(model.config)
    cfg["outputs"] = list(model.config.outputs)
    torch.save(
        {
            "format_version": CHECKPOINT_VERSION,
            "config": cfg,
            "normalizer": model.normalizer.to_dict(),
            "trained_columns": model.trained_columns.tolist(),
            "trained_episodes": sorted(model.trained_episodes),
            "history": model.history,
            "geometry": asdict(model.geometry),
            "state_dict": model.net.state_dict(),
        },
        path,
    )


def load_model(path: Path) -> TrainedModel:
    raw = torch.load(path, map_location="cpu", weights_only=True)
    version = raw.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise SchemaError(f"checkpoint {path} has format_version {version!r}, expected {CHECKPOINT_VERSION}")
    cfg_raw = dict(raw["config"])
    cfg_raw["outputs"] = tuple(cfg_raw["outputs"])
    config = RegressorConfig(**cfg_raw)
    net = TactileRegressor(config.backbone)
    net.load_state_dict(raw["state_dict"])
    net.eval()
    return TrainedModel(
        net=net,
        config=config,
        normalizer=Normalizer.from_dict(raw["normalizer"]),
        trained_columns=np.asarray(raw["trained_columns"], dtype=bool),
        trained_episodes=frozenset(raw["trained_episodes"]),
        history=list(raw["history"]),
        geometry=ShellGeometry(**raw["geometry"]),
    )
