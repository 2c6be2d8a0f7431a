from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional

import numpy as np
from scipy import ndimage

from .contact_mechanics import MAX_DEPTH, ContactSpec, Indenter, contact_load, displacement_at
from .errors import UnsupportedConfigError
from .markers import MATCH_RADIUS, marker_centroids, match_markers
from .photometric_renderer import (
    SensorInstance,
    TactileImage,
    pixel_to_surface,
    project_to_pixels,
    reference_image,
    render_contact,
)
from .shell_geometry import (
    ShellGeometry,
    project_to_surface,
    sample_surface_uv,
    surface_points,
    uv_from_positions,
)

logger = logging.getLogger(__name__)

THRESHOLD_SIGMAS = 3.0
MIN_DIFF = 2.0  # 8-bit levels; below this a pixel never counts as contact
MIN_BLOB_PX = 6
FLOW_REACH = 10.0  # mm, dots farther from the contact are not fitted
MIN_FLOW_PX = 0.15  # at 480 px; scaled with image size
SLIP_STEP = 0.1  # mm
TWIST_STEP = 0.01  # rad
TWIST_SPAN = 0.3  # rad, largest twist the episodes apply
CALIBRATION_PRESSES = 50


@dataclass(frozen=True)
class StateEstimate:
    x: tuple[float, float, float]
    f: tuple[float, float, float]
    tau: float
    d: float

    @classmethod
    def zero(cls) -> "StateEstimate":
        return cls(x=(0.0, 0.0, 0.0), f=(0.0, 0.0, 0.0), tau=0.0, d=0.0)

    @classmethod
    def from_vector(cls, y) -> "StateEstimate":
        y = [float(v) for v in y]
        return cls(x=(y[0], y[1], y[2]), f=(y[3], y[4], y[5]), tau=y[6], d=y[7])

    def to_vector(self) -> np.ndarray:
        return np.array([*self.x, *self.f, self.tau, self.d], dtype=float)

    @property
    def is_contact(self) -> bool:
        return self.d > 0.0


@dataclass(frozen=True)
class DepthCalibration:
    """log(d) = slope * log(signal) + intercept, fitted on rendered presses."""

    slope: float
    intercept: float
    indenter: str
    sensor_id: str
    presses: int

    def depth(self, signal: float) -> float:
        if signal <= 0.0:
            return 0.0
        return float(min(math.exp(self.slope * math.log(signal) + self.intercept), MAX_DEPTH))

    def save(self, path: Path) -> None:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: Path) -> "DepthCalibration":
        return cls(**json.loads(path.read_text(encoding="utf-8")))


@dataclass(frozen=True)
class ContactBlob:
    pixel: tuple[float, float]  # (px, py)
    point: np.ndarray
    area_px: int
    signal: float


def find_contact(
    geom: ShellGeometry,
    instance: SensorInstance,
    ref: TactileImage,
    img: TactileImage,
) -> Optional[ContactBlob]:
    """Largest above-threshold blob of |I - I_ref|, or None when nothing stands out."""
    diff = np.abs(img.pixels.astype(float) - ref.pixels.astype(float)).mean(axis=2)
    mask = instance.camera.mask()
    values = diff[mask]
    threshold = max(float(values.mean() + THRESHOLD_SIGMAS * values.std()), MIN_DIFF)
    labels, n = ndimage.label((diff > threshold) & mask)
    if n == 0:
        return None
    sizes = ndimage.sum(np.ones_like(diff), labels, np.arange(1, n + 1))
    best = int(np.argmax(sizes)) + 1
    if sizes[best - 1] < MIN_BLOB_PX:
        return None
    cy, cx = ndimage.center_of_mass(diff, labels, best)
    point = pixel_to_surface(geom, instance, cx, cy)
    if point is None:
        return None
    point = project_to_surface(geom, point).position

    # each pixel covers roughly (range / f_theta)^2 of membrane
    dist = float(np.linalg.norm(point - instance.camera.position))
    signal = float(diff[labels == best].sum()) * (dist / instance.f_theta) ** 2
    return ContactBlob(pixel=(float(cx), float(cy)), point=point, area_px=int(sizes[best - 1]), signal=signal)


def calibrate_baseline(
    geom: ShellGeometry,
    instance: SensorInstance,
    indenter: Indenter,
    presses: int = CALIBRATION_PRESSES,
    seed: int = 0,
    grid: tuple[int, int] = (256, 128),
) -> DepthCalibration:
    """Fit the depth curve on `presses` rendered presses at area-uniform points."""
    ref = reference_image(geom, instance)
    u, v = sample_surface_uv(geom, presses, seed)
    depths = np.random.default_rng([seed, 2]).uniform(0.3, min(indenter.depth_limit(), 2.0), presses)
    xs: list[float] = []
    ys: list[float] = []
    for i in range(presses):
        spec = ContactSpec(uv=(float(u[i]), float(v[i])), depth=float(depths[i]))
        blob = find_contact(geom, instance, ref, render_contact(geom, instance, indenter, spec, grid=grid))
        if blob is None or blob.signal <= 0.0:
            continue
        xs.append(math.log(blob.signal))
        ys.append(math.log(spec.depth))
    if len(xs) < 2:
        raise UnsupportedConfigError(f"depth calibration for {instance.id} found fewer than 2 usable presses")
    slope, intercept = np.polyfit(xs, ys, 1)
    logger.info("depth calibration %s/%s: slope=%.3f intercept=%.3f over %d presses", instance.id, indenter.name, slope, intercept, len(xs))
    return DepthCalibration(slope=float(slope), intercept=float(intercept), indenter=indenter.name, sensor_id=instance.id, presses=len(xs))


def _marker_motion(
    geom: ShellGeometry,
    instance: SensorInstance,
    ref: TactileImage,
    img: TactileImage,
    blob: ContactBlob,
    indenter: Indenter,
    depth: float,
) -> tuple[tuple[float, float], float]:
    """Tangential stick (mm, contact frame) and twist (rad) fitted to the marker flow near the blob.

    The flow a plain press at `depth` would cause is predicted and removed; the rest
    is solved for slip and twist through the tangential field's response at each dot.
    Returns zeros when no nearby dot moved.
    """
    scale = instance.camera.image_size / 480.0
    points, flow = match_markers(
        marker_centroids(ref, instance), marker_centroids(img, instance), max_dist=MATCH_RADIUS * scale
    )
    if len(points) == 0 or depth <= 0.0:
        return (0.0, 0.0), 0.0

    sp = project_to_surface(geom, blob.point)
    hits = [pixel_to_surface(geom, instance, px, py) for px, py in points]
    near = np.array([h is not None and float(np.linalg.norm(h - sp.position)) <= FLOW_REACH for h in hits])
    if not near.any():
        return (0.0, 0.0), 0.0
    if float(np.linalg.norm(flow[near], axis=1).max()) < MIN_FLOW_PX * scale:
        return (0.0, 0.0), 0.0

    surface = np.array([h for h, ok in zip(hits, near) if ok])
    u, v = uv_from_positions(geom, surface)
    pos, nrm = surface_points(geom, u, v)
    press = ContactSpec(uv=sp.uv, depth=depth)
    pushed, _ = displacement_at(geom, indenter, press, pos)
    base = pos - pushed[:, None] * nrm
    base_px = project_to_pixels(instance, base)

    columns = []
    for nudged, step in (
        (ContactSpec(uv=sp.uv, depth=depth, slip=(SLIP_STEP, 0.0)), SLIP_STEP),
        (ContactSpec(uv=sp.uv, depth=depth, slip=(0.0, SLIP_STEP)), SLIP_STEP),
        (ContactSpec(uv=sp.uv, depth=depth, twist=TWIST_STEP), TWIST_STEP),
    ):
        _, moved = displacement_at(geom, indenter, nudged, pos)
        columns.append((project_to_pixels(instance, base + moved) - base_px) / step)
    residual = (points[near] + flow[near] - base_px).ravel()

    # twist is observable only when some dot would visibly turn with it
    turn = np.linalg.norm(columns[2], axis=1).max() * TWIST_SPAN
    if len(surface) < 2 or turn < MIN_FLOW_PX * scale:
        a = np.stack([c.ravel() for c in columns[:2]], axis=1)
        sol, *_ = np.linalg.lstsq(a, residual, rcond=None)
        return (float(sol[0]), float(sol[1])), 0.0
    a = np.stack([c.ravel() for c in columns], axis=1)
    sol, *_ = np.linalg.lstsq(a, residual, rcond=None)
    return (float(sol[0]), float(sol[1])), float(sol[2])


def baseline_estimate(
    ref: TactileImage,
    img: TactileImage,
    instance: SensorInstance,
    geom: ShellGeometry,
    calibration: Optional[DepthCalibration] = None,
    indenter: Optional[Indenter] = None,
) -> StateEstimate:
    """Training-free estimate from the difference image and marker flow."""
    indenter = indenter or Indenter.sphere(4.0)
    blob = find_contact(geom, instance, ref, img)
    if blob is None:
        return StateEstimate.zero()
    if calibration is None:
        key = ("calibration", geom, indenter.name)
        calibration = instance._cache.get(key)
        if calibration is None:
            calibration = calibrate_baseline(geom, instance, indenter)
            instance._cache[key] = calibration
    depth = calibration.depth(blob.signal)

    slip, twist = (0.0, 0.0), 0.0
    if instance.markers.enabled:
        slip, twist = _marker_motion(geom, instance, ref, img, blob, indenter, depth)

    sp = project_to_surface(geom, blob.point)
    f, tau = contact_load(indenter, ContactSpec(uv=sp.uv, depth=depth, slip=slip, twist=twist))
    x = tuple(float(c) for c in sp.position)
    return StateEstimate(x=x, f=f, tau=tau, d=depth)  # type: ignore[arg-type]


class BaselineEstimator:
    """Adapts `baseline_estimate` to the evaluation interface."""

    trained_episodes: frozenset[str] = frozenset()

    def __init__(
        self,
        geom: ShellGeometry,
        instances: dict[str, SensorInstance],
        indenter: Optional[Indenter] = None,
        calibrations: Optional[dict[str, DepthCalibration]] = None,
    ) -> None:
        self.geom = geom
        self.instances = instances
        self.indenter = indenter or Indenter.sphere(4.0)
        self.calibrations = dict(calibrations or {})

    def calibration(self, sensor_id: str) -> DepthCalibration:
        if sensor_id not in self.calibrations:
            self.calibrations[sensor_id] = calibrate_baseline(self.geom, self.instances[sensor_id], self.indenter)
        return self.calibrations[sensor_id]

    def estimate(self, ref: TactileImage, img: TactileImage) -> StateEstimate:
        instance = self.instances[img.instance_id]
        return baseline_estimate(ref, img, instance, self.geom, self.calibration(img.instance_id), self.indenter)
