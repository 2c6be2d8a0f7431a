from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import TYPE_CHECKING

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .errors import UnsupportedConfigError
from .shell_geometry import ShellGeometry, contact_frame, project_points, surface_point, surface_points

if TYPE_CHECKING:
    from .photometric_renderer import SensorInstance, TactileImage

logger = logging.getLogger(__name__)

# Detection tuning (pixels at 480 px; scaled with image size).
BACKGROUND_WINDOW = 21
DARK_RATIO = 0.4
MIN_BACKGROUND = 12.0
MIN_BLOB_PX = 4
MATCH_RADIUS = 16.0


@dataclass(frozen=True)
class MarkerLayout:
    """Sparse dots printed on the elastomer.

    Rings are given by their axial parameter, outermost last; one extra dot sits
    on the apex. Default: 6 + 8 + 10 + 12 + 1 = 37 dots, spaced about 7 mm apart
    along the meridian down to the lower wall.
    """

    enabled: bool = True
    rings: tuple[float, ...] = (0.78, 0.56, 0.35, 0.14)
    counts: tuple[int, ...] = (6, 8, 10, 12)
    apex_dot: bool = True
    dot_radius: float = 0.5
    albedo: float = 0.15

    @property
    def count(self) -> int:
        if not self.enabled:
            return 0
        return sum(self.counts) + (1 if self.apex_dot else 0)

    def uv(self) -> tuple[np.ndarray, np.ndarray]:
        if not self.enabled:
            return np.zeros(0), np.zeros(0)
        us: list[float] = []
        vs: list[float] = []
        if self.apex_dot:
            us.append(0.0)
            vs.append(1.0)
        for k, (v, n) in enumerate(zip(self.rings, self.counts)):
            # alternate rings are offset by half a step
            offset = 0.5 * (k % 2)
            for i in range(n):
                us.append(2.0 * np.pi * (i + offset) / n)
                vs.append(v)
        return np.array(us), np.array(vs)


def marker_positions(geom: ShellGeometry, layout: MarkerLayout, jitter: np.ndarray | None = None) -> np.ndarray:
    """3D dot centers on the undeformed membrane, with optional tangential jitter (mm)."""
    u, v = layout.uv()
    if u.size == 0:
        return np.zeros((0, 3))
    pos, _ = surface_points(geom, u, v)
    if jitter is None or not np.any(jitter):
        return pos
    out = np.empty_like(pos)
    for i in range(len(u)):
        frame = contact_frame(surface_point(geom, (float(u[i]), float(v[i]))))
        moved = pos[i] + jitter[i, 0] * frame.x_axis + jitter[i, 1] * frame.y_axis
        out[i] = project_points(geom, moved)
    return out


def _background(gray: np.ndarray, window: int) -> np.ndarray:
    return ndimage.uniform_filter(ndimage.maximum_filter(gray, size=window), size=window // 2 + 1)


def marker_centroids(image: "TactileImage", instance: "SensorInstance") -> list[tuple[float, float]]:
    """Dark-blob centroids (px, py), intensity weighted, ordered by row then column."""
    if not instance.markers.enabled:
        raise UnsupportedConfigError(f"sensor {instance.id} has no markers")
    size = image.pixels.shape[0]
    scale = size / 480.0
    window = max(5, int(round(BACKGROUND_WINDOW * scale)) | 1)

    gray = image.pixels.astype(float).mean(axis=2)
    bg = _background(gray, window)
    ratio = gray / np.maximum(bg, 1e-6)

    yy, xx = np.mgrid[0:size, 0:size]
    c = (size - 1) / 2.0
    inner = np.hypot(xx - c, yy - c) <= size / 2.0 - window
    valid = inner & (bg >= MIN_BACKGROUND)
    dark = valid & (ratio < DARK_RATIO)

    labels, n = ndimage.label(dark)
    if n == 0:
        return []
    idx = np.arange(1, n + 1)
    sizes = ndimage.sum(np.ones_like(gray), labels, idx)
    keep = idx[sizes >= max(2, int(MIN_BLOB_PX * scale * scale))]
    if keep.size == 0:
        return []

    # grow each core by its soft edge before weighting
    grown = ndimage.grey_dilation(np.where(np.isin(labels, keep), labels, 0), size=3)
    weights = np.where(valid, np.clip(1.0 - ratio, 0.0, 1.0), 0.0)
    centers = ndimage.center_of_mass(weights, grown, keep)
    out = [(float(cx), float(cy)) for cy, cx in centers]
    out.sort(key=lambda p: (round(p[1], 3), p[0]))
    return out


def match_markers(
    reference: list[tuple[float, float]],
    current: list[tuple[float, float]],
    max_dist: float = MATCH_RADIUS,
) -> tuple[np.ndarray, np.ndarray]:
    """Nearest-neighbour pairing; returns (reference_points, flow) for matched dots."""
    if not reference or not current:
        return np.zeros((0, 2)), np.zeros((0, 2))
    ref = np.asarray(reference, dtype=float)
    cur = np.asarray(current, dtype=float)
    dist, j = cKDTree(cur).query(ref, k=1, distance_upper_bound=max_dist)
    ok = np.isfinite(dist)
    return ref[ok], cur[j[ok]] - ref[ok]

