from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import cv2
import numpy as np
import torch
import torch.nn as nn
import torchvision.models as models

from .errors import ConfigError, DomainError, PairingError
from .photometric_renderer import TactileImage

logger = logging.getLogger(__name__)

INPUT_SIZE = 224
HEAD_WIDTHS = (512, 256)
OUTPUT_WIDTH = 8
# output ordering: x (3), f (3), tau (1), d (1)
OUTPUT_SLICES = {"x": slice(0, 3), "f": slice(3, 6), "tau": slice(6, 7), "d": slice(7, 8)}
OUTPUT_GROUPS = tuple(OUTPUT_SLICES)
BACKBONES = ("conv4", "conv2", "resnet18")


@dataclass(frozen=True)
class RegressorConfig:
    backbone: str = "conv4"
    epochs: int = 20
    batch_size: int = 32
    lr: float = 1e-3
    momentum: float = 0.9
    seed: int = 0
    # trained output groups; ("d",) reproduces a separately trained depth model
    outputs: tuple[str, ...] = OUTPUT_GROUPS
    # per-channel lighting gain jitter during training: gain ~ U[1 - j, 1 + j]
    light_jitter: float = 0.0
    input_size: int = INPUT_SIZE

    def __post_init__(self) -> None:
        if self.backbone not in BACKBONES:
            raise ConfigError(f"backbone must be one of {BACKBONES}, got {self.backbone!r}")
        bad = [o for o in self.outputs if o not in OUTPUT_SLICES]
        if bad or not self.outputs:
            raise ConfigError(f"outputs must be a non-empty subset of {OUTPUT_GROUPS}, got {self.outputs}")
        if self.epochs < 0 or self.batch_size < 1 or self.lr <= 0.0:
            raise ConfigError("epochs >= 0, batch_size >= 1 and lr > 0 are required")
        if not (0.0 <= self.light_jitter < 1.0):
            raise ConfigError(f"light_jitter must be in [0, 1), got {self.light_jitter}")

    def output_mask(self) -> np.ndarray:
        return select_columns(self.outputs)


# ----------------------------
# Input
# ----------------------------

def preprocess(ref: TactileImage, img: TactileImage, size: int = INPUT_SIZE) -> np.ndarray:
    """Stack reference and contact frames into a (6, size, size) float32 array in [0, 1]."""
    if ref.instance_id != img.instance_id:
        raise PairingError(f"reference from {ref.instance_id!r} paired with image from {img.instance_id!r}")
    if ref.pixels.shape != img.pixels.shape:
        raise PairingError(f"image shapes differ: {ref.pixels.shape} vs {img.pixels.shape}")

    def _down(px: np.ndarray) -> np.ndarray:
        if px.shape[0] == size:
            return px
        return cv2.resize(px, (size, size), interpolation=cv2.INTER_AREA)

    stacked = np.concatenate([_down(ref.pixels), _down(img.pixels)], axis=2)
    return np.ascontiguousarray(stacked.transpose(2, 0, 1), dtype=np.float32) / np.float32(255.0)


# ----------------------------
# Normaliser
# ----------------------------

@dataclass
class Normalizer:
    """Per-output min-max scaling to [0, 1], fitted on training labels only."""

    lo: np.ndarray = field(default_factory=lambda: np.zeros(OUTPUT_WIDTH))
    hi: np.ndarray = field(default_factory=lambda: np.ones(OUTPUT_WIDTH))
    fitted: np.ndarray = field(default_factory=lambda: np.zeros(OUTPUT_WIDTH, dtype=bool))
    source_episodes: frozenset[str] = frozenset()

    def fit(self, y: np.ndarray, episodes: Iterable[str], columns: Optional[np.ndarray] = None, refit: bool = False) -> "Normalizer":
        """Fit the selected columns; already-fitted columns are kept unless `refit`."""
        y = np.asarray(y, dtype=float).reshape(-1, OUTPUT_WIDTH)
        cols = np.ones(OUTPUT_WIDTH, dtype=bool) if columns is None else np.asarray(columns, dtype=bool)
        if not refit:
            cols = cols & ~self.fitted
        if y.shape[0] == 0 or not cols.any():
            return self
        lo = y.min(axis=0)
        hi = y.max(axis=0)
        self.lo = np.where(cols, lo, self.lo)
        self.hi = np.where(cols, hi, self.hi)
        self.fitted = self.fitted | cols
        self.source_episodes = self.source_episodes | frozenset(episodes)
        return self

    @property
    def scale(self) -> np.ndarray:
        span = self.hi - self.lo
        return np.where(span > 0.0, span, 1.0)

    def normalize(self, y: np.ndarray) -> np.ndarray:
        return (np.asarray(y, dtype=float) - self.lo) / self.scale

    def denormalize(self, z: np.ndarray) -> np.ndarray:
        return np.asarray(z, dtype=float) * self.scale + self.lo

    def to_dict(self) -> dict:
        return {
            "lo": self.lo.tolist(),
            "hi": self.hi.tolist(),
            "fitted": self.fitted.tolist(),
            "source_episodes": sorted(self.source_episodes),
        }

    @classmethod
    def from_dict(cls, raw: dict) -> "Normalizer":
        return cls(
            lo=np.asarray(raw["lo"], dtype=float),
            hi=np.asarray(raw["hi"], dtype=float),
            fitted=np.asarray(raw["fitted"], dtype=bool),
            source_episodes=frozenset(raw.get("source_episodes", ())),
        )


# ----------------------------
# Network
# ----------------------------

class ConvBlock(nn.Module):
    """Strided conv -> batch norm -> ReLU."""

    def __init__(self, in_channels: int, out_channels: int, stride: int = 2, kernel_size: int = 3) -> None:
        super().__init__()
        self.block = nn.Sequential(
            nn.Conv2d(in_channels, out_channels, kernel_size=kernel_size, stride=stride, padding=kernel_size // 2, bias=False),
            nn.BatchNorm2d(out_channels),
            nn.ReLU(inplace=True),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.block(x)


def _conv4_encoder() -> tuple[nn.Module, int]:
    enc = nn.Sequential(
        ConvBlock(6, 32),      # -> (B, 32, 112, 112)
        ConvBlock(32, 64),     # -> (B, 64, 56, 56)
        ConvBlock(64, 128),    # -> (B, 128, 28, 28)
        ConvBlock(128, 128),   # -> (B, 128, 14, 14)
        nn.AdaptiveAvgPool2d((4, 4)),
        nn.Flatten(),
    )
    return enc, 128 * 4 * 4


def _conv2_encoder() -> tuple[nn.Module, int]:
    enc = nn.Sequential(
        ConvBlock(6, 8, stride=4),
        ConvBlock(8, 16, stride=4),
        nn.AdaptiveAvgPool2d((2, 2)),
        nn.Flatten(),
    )
    return enc, 16 * 2 * 2


def _resnet18_encoder() -> tuple[nn.Module, int]:
    net = models.resnet18(weights=None)
    net.conv1 = nn.Conv2d(6, 64, kernel_size=7, stride=2, padding=3, bias=False)
    width = net.fc.in_features
    net.fc = nn.Identity()
    return net, width


_ENCODERS = {"conv4": _conv4_encoder, "conv2": _conv2_encoder, "resnet18": _resnet18_encoder}


class TactileRegressor(nn.Module):
    """Encoder over the stacked pair, then a 512-256 MLP head with 8 outputs."""

    def __init__(self, backbone: str = "conv4") -> None:
        super().__init__()
        if backbone not in _ENCODERS:
            raise ConfigError(f"unknown backbone {backbone!r}")
        self.backbone = backbone
        self.encoder, width = _ENCODERS[backbone]()
        self.head = nn.Sequential(
            nn.Linear(width, HEAD_WIDTHS[0]),
            nn.ReLU(inplace=True),
            nn.Linear(HEAD_WIDTHS[0], HEAD_WIDTHS[1]),
            nn.ReLU(inplace=True),
            nn.Linear(HEAD_WIDTHS[1], OUTPUT_WIDTH),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() == 3:
            x = x.unsqueeze(0)
        if x.shape[1] != 6:
            raise DomainError(f"expected 6 input channels, got {x.shape[1]}")
        return self.head(self.encoder(x))


def masked_mse(pred: torch.Tensor, target: torch.Tensor, weight: torch.Tensor) -> torch.Tensor:
    """Mean squared error over entries with weight 1; per-output terms summed, batch averaged."""
    sq = (pred - target) ** 2 * weight
    count = weight.sum(dim=0).clamp(min=1.0)
    return (sq.sum(dim=0) / count).sum()


def label_weights(y: np.ndarray, mask: np.ndarray, label_present: Optional[np.ndarray] = None) -> np.ndarray:
    """Loss weights: configured outputs only, position skipped at rest (d = 0)."""
    y = np.asarray(y, dtype=float).reshape(-1, OUTPUT_WIDTH)
    w = np.broadcast_to(mask.astype(float), y.shape).copy()
    at_rest = y[:, 7] <= 0.0
    w[at_rest, OUTPUT_SLICES["x"]] = 0.0
    if label_present is not None:
        w = w * np.asarray(label_present, dtype=float).reshape(-1, OUTPUT_WIDTH)
    return w


def select_columns(names: Sequence[str]) -> np.ndarray:
    mask = np.zeros(OUTPUT_WIDTH, dtype=bool)
    for n in names:
        mask[OUTPUT_SLICES[n]] = True
    return mask
