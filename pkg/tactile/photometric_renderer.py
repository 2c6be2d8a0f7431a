from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Optional

import cv2
import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .contact_mechanics import ContactSpec, DisplacementField, Indenter, displacement_field
from .errors import DatasetError, DomainError, ResolutionError
from .markers import MarkerLayout, marker_positions
from .shell_geometry import TWO_PI, ShellGeometry, surface_points

logger = logging.getLogger(__name__)

PATTERNS = ("White", "RRRGGGBBB", "RGBRGBRGB")
LED_COUNT = 9
MIN_GRID = (256, 128)

SPECULAR_EXPONENT = 32.0
SPECULAR_WEIGHT = 0.2
MARKER_EDGE = 0.08  # mm, half width of the printed dot's soft edge
FIXED_POINT_ITERATIONS = 4

_CHANNEL = {"R": (1.0, 0.0, 0.0), "G": (0.0, 1.0, 0.0), "B": (0.0, 0.0, 1.0)}


@dataclass(frozen=True)
class CameraModel:
    """Equidistant fisheye on the sensor axis, looking toward the apex.

    The 640x480 raw frame is not materialised; rendering goes straight into the
    square, circularly masked frame.
    """

    position_z: float = -2.0
    fov_deg: float = 160.0
    image_size: int = 480

    def __post_init__(self) -> None:
        if self.image_size < 16:
            raise DomainError(f"image_size must be >= 16, got {self.image_size}")
        if not (0.0 < self.fov_deg < 180.0):
            raise DomainError(f"fov_deg must be in (0, 180), got {self.fov_deg}")
        if self.position_z >= 0.0:
            raise DomainError("camera must sit below the membrane base (position_z < 0)")

    @property
    def position(self) -> np.ndarray:
        return np.array([0.0, 0.0, self.position_z])

    @property
    def mask_radius(self) -> float:
        return self.image_size / 2.0

    @property
    def center(self) -> float:
        return (self.image_size - 1) / 2.0

    @property
    def f_theta(self) -> float:
        """px/rad; 171.9 at 480 px so the 80 degree half-field lands on the mask edge."""
        return self.mask_radius / math.radians(self.fov_deg / 2.0)

    def mask(self) -> np.ndarray:
        yy, xx = np.mgrid[0 : self.image_size, 0 : self.image_size]
        return np.hypot(xx - self.center, yy - self.center) <= self.mask_radius


@dataclass(frozen=True)
class LedConfig:
    pattern: str = "RRRGGGBBB"
    count: int = LED_COUNT
    ring_radius: float = 13.5
    ring_z: float = -1.0
    intensity: float = 120.0
    beam_exponent: float = 8.0
    aim_z: Optional[float] = None  # default: half the cylinder height

    def __post_init__(self) -> None:
        if self.pattern not in PATTERNS:
            raise DomainError(f"pattern must be one of {PATTERNS}, got {self.pattern!r}")
        if self.count != LED_COUNT:
            raise DomainError(f"the ring carries exactly {LED_COUNT} LEDs, got {self.count}")

    def positions(self) -> np.ndarray:
        a = np.arange(self.count) * (TWO_PI / self.count)
        return np.stack([self.ring_radius * np.cos(a), self.ring_radius * np.sin(a), np.full_like(a, self.ring_z)], axis=1)

    def axes(self, geom: ShellGeometry) -> np.ndarray:
        aim = np.array([0.0, 0.0, geom.cyl_height / 2.0 if self.aim_z is None else self.aim_z])
        d = aim - self.positions()
        return d / np.linalg.norm(d, axis=1, keepdims=True)

    def colors(self) -> np.ndarray:
        if self.pattern == "White":
            return np.ones((self.count, 3))
        cols = np.array([_CHANNEL[ch] for ch in self.pattern])
        # equalise channel energy: each channel sums to the White level
        per_channel = cols.sum(axis=0)
        return cols * (self.count / np.maximum(per_channel, 1.0))


@dataclass(frozen=True)
class Perturbations:
    led_gains: tuple[float, ...]
    rgb_balance: tuple[float, float, float]
    coating_albedo: float
    marker_jitter: tuple[tuple[float, float], ...]
    center_offset: tuple[float, float]
    f_scale: float

    @classmethod
    def nominal(cls, n_markers: int) -> "Perturbations":
        return cls(
            led_gains=(1.0,) * LED_COUNT,
            rgb_balance=(1.0, 1.0, 1.0),
            coating_albedo=0.9,
            marker_jitter=((0.0, 0.0),) * n_markers,
            center_offset=(0.0, 0.0),
            f_scale=1.0,
        )

    @classmethod
    def sample(cls, seed: int, n_markers: int) -> "Perturbations":
        rng = np.random.default_rng(seed)
        gains = rng.uniform(0.85, 1.15, LED_COUNT)
        balance = rng.uniform(0.9, 1.1, 3)
        albedo = rng.uniform(0.8, 1.0)
        jitter = rng.normal(0.0, 0.2, (n_markers, 2))
        r = 3.0 * math.sqrt(rng.random())
        a = rng.uniform(0.0, TWO_PI)
        f_scale = rng.uniform(0.98, 1.02)
        return cls(
            led_gains=tuple(float(g) for g in gains),
            rgb_balance=(float(balance[0]), float(balance[1]), float(balance[2])),
            coating_albedo=float(albedo),
            marker_jitter=tuple((float(j[0]), float(j[1])) for j in jitter),
            center_offset=(r * math.cos(a), r * math.sin(a)),
            f_scale=float(f_scale),
        )


@dataclass(eq=False)
class SensorInstance:
    """One fabricated sensor: lighting, markers and frozen perturbations."""

    id: str
    led: LedConfig
    markers: MarkerLayout
    perturbations: Perturbations
    seed: int
    camera: CameraModel = field(default_factory=CameraModel)
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    @classmethod
    def create(
        cls,
        sensor_id: str,
        pattern: str = "RRRGGGBBB",
        markers: MarkerLayout | bool = True,
        seed: int = 0,
        perturb: bool = True,
        camera: CameraModel | None = None,
    ) -> "SensorInstance":
        if isinstance(markers, bool):
            markers = MarkerLayout(enabled=markers)
        n = markers.count
        p = Perturbations.sample(seed, n) if perturb else Perturbations.nominal(n)
        return cls(id=sensor_id, led=LedConfig(pattern=pattern), markers=markers, perturbations=p, seed=seed, camera=camera or CameraModel())

    def to_dict(self) -> dict[str, Any]:
        markers = asdict(self.markers)
        markers["rings"] = list(self.markers.rings)
        markers["counts"] = list(self.markers.counts)
        pert = asdict(self.perturbations)
        pert = {k: (json.loads(json.dumps(v)) if isinstance(v, tuple) else v) for k, v in pert.items()}
        return {
            "id": self.id,
            "seed": self.seed,
            "camera": asdict(self.camera),
            "led": asdict(self.led),
            "markers": markers,
            "perturbations": pert,
        }

    @classmethod
    def from_dict(cls, raw: dict[str, Any]) -> "SensorInstance":
        m = dict(raw["markers"])
        m["rings"] = tuple(m["rings"])
        m["counts"] = tuple(m["counts"])
        p = raw["perturbations"]
        return cls(
            id=str(raw["id"]),
            seed=int(raw["seed"]),
            camera=CameraModel(**raw["camera"]),
            led=LedConfig(**raw["led"]),
            markers=MarkerLayout(**m),
            perturbations=Perturbations(
                led_gains=tuple(float(g) for g in p["led_gains"]),
                rgb_balance=tuple(float(g) for g in p["rgb_balance"]),  # type: ignore[arg-type]
                coating_albedo=float(p["coating_albedo"]),
                marker_jitter=tuple((float(a), float(b)) for a, b in p["marker_jitter"]),
                center_offset=(float(p["center_offset"][0]), float(p["center_offset"][1])),
                f_scale=float(p["f_scale"]),
            ),
        )

    def save(self, path: Path) -> None:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: Path) -> "SensorInstance":
        return cls.from_dict(json.loads(path.read_text(encoding="utf-8")))

    @property
    def f_theta(self) -> float:
        return self.camera.f_theta * self.perturbations.f_scale

    @property
    def optical_center(self) -> tuple[float, float]:
        c = self.camera.center
        ox, oy = self.perturbations.center_offset
        return c + ox, c + oy


@dataclass(eq=False)
class TactileImage:
    pixels: np.ndarray  # (S, S, 3) uint8, RGB
    instance_id: str
    source: Optional[str] = None

    def __post_init__(self) -> None:
        if self.pixels.dtype != np.uint8 or self.pixels.ndim != 3 or self.pixels.shape[2] != 3:
            raise DomainError(f"expected an (S, S, 3) uint8 image, got {self.pixels.dtype} {self.pixels.shape}")

    @property
    def size(self) -> int:
        return int(self.pixels.shape[0])


# ----------------------------
# Rays
# ----------------------------

def ray_hits(geom: ShellGeometry, camera_z: float, theta: np.ndarray, psi: np.ndarray):
    """Undeformed-membrane hit of camera rays (polar angle theta, azimuth psi).

    Returns (u, v, hit, points). Rays leaving through the open base miss.
    """
    R = geom.cyl_radius
    H = geom.cyl_height
    hc = geom.seam_axial
    st, ct = np.sin(theta), np.cos(theta)

    wall_ok = st > 1e-12
    t_wall = np.where(wall_ok, R / np.where(wall_ok, st, 1.0), np.inf)
    z_wall = camera_z + t_wall * ct
    on_wall = wall_ok & (z_wall <= H)

    b = ct * (camera_z - H)
    c = (camera_z - H) ** 2 - R * R
    t_sph = -b + np.sqrt(np.maximum(b * b - c, 0.0))
    z_sph = camera_z + t_sph * ct
    rho_sph = t_sph * st

    t = np.where(on_wall, t_wall, t_sph)
    z = np.where(on_wall, z_wall, z_sph)
    hit = np.where(on_wall, z_wall >= 0.0, True)

    alpha = np.arctan2(np.maximum(z_sph - H, 0.0), rho_sph)
    v = np.where(on_wall, np.clip(z_wall, 0.0, H) / H * hc, hc + (1.0 - hc) * alpha / (0.5 * math.pi))
    u = np.mod(psi, TWO_PI)
    u = np.where(u >= TWO_PI, 0.0, u)

    t = np.where(np.isfinite(t), t, 0.0)
    pts = np.stack([t * st * np.cos(psi), t * st * np.sin(psi), camera_z + t * ct], axis=-1)
    return u, np.clip(v, 0.0, 1.0), hit, pts


def _pixel_rays(instance: SensorInstance) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(mask, theta, psi) for every pixel inside the circular mask."""
    cached = instance._cache.get("rays")
    if cached is not None:
        return cached
    cam = instance.camera
    mask = cam.mask()
    yy, xx = np.nonzero(mask)
    cx, cy = instance.optical_center
    dx = xx - cx
    dy = yy - cy
    theta = np.hypot(dx, dy) / instance.f_theta
    psi = np.arctan2(dy, dx)
    out = (mask, theta, psi)
    instance._cache["rays"] = out
    return out


def pixel_to_surface(geom: ShellGeometry, instance: SensorInstance, px: float, py: float) -> Optional[np.ndarray]:
    """Back-project one pixel onto the undeformed membrane; None when the ray misses."""
    cx, cy = instance.optical_center
    theta = np.array([math.hypot(px - cx, py - cy) / instance.f_theta])
    psi = np.array([math.atan2(py - cy, px - cx)])
    _, _, hit, pts = ray_hits(geom, instance.camera.position_z, theta, psi)
    if not bool(hit[0]):
        return None
    return pts[0]


def project_to_pixels(instance: SensorInstance, points: np.ndarray) -> np.ndarray:
    """Forward fisheye projection of sensor-frame points -> (N, 2) pixel coordinates (px, py)."""
    p = np.asarray(points, dtype=float).reshape(-1, 3)
    rho = np.hypot(p[:, 0], p[:, 1])
    theta = np.arctan2(rho, p[:, 2] - instance.camera.position_z)
    psi = np.arctan2(p[:, 1], p[:, 0])
    r = instance.f_theta * theta
    cx, cy = instance.optical_center
    return np.stack([cx + r * np.cos(psi), cy + r * np.sin(psi)], axis=1)


def instance_marker_positions(geom: ShellGeometry, instance: SensorInstance) -> np.ndarray:
    key = ("markers", geom)
    if key not in instance._cache:
        jitter = np.asarray(instance.perturbations.marker_jitter, dtype=float).reshape(-1, 2)
        instance._cache[key] = marker_positions(geom, instance.markers, jitter)
    return instance._cache[key]


# ----------------------------
# Field sampling
# ----------------------------

class _FieldSampler:
    """Bilinear lookup of displacement fields at arbitrary (u, v), azimuth wrapping."""

    def __init__(self, geom: ShellGeometry, fld: DisplacementField) -> None:
        n_u, n_v = fld.shape
        self.n_u, self.n_v = n_u, n_v
        self.normal = self._wrap(fld.normal)
        self.tangential = [self._wrap(fld.tangential[..., k]) for k in range(3)]
        grad = _surface_gradient(geom, fld.normal)
        self.gradient = [self._wrap(grad[..., k]) for k in range(3)]

    @staticmethod
    def _wrap(a: np.ndarray) -> np.ndarray:
        return np.concatenate([a, a[:1]], axis=0)

    def _coords(self, u: np.ndarray, v: np.ndarray) -> np.ndarray:
        return np.stack([u / TWO_PI * self.n_u, v * (self.n_v - 1)])

    def sample(self, grid: np.ndarray, u: np.ndarray, v: np.ndarray) -> np.ndarray:
        return ndimage.map_coordinates(grid, self._coords(u, v), order=1, mode="nearest")

    def sample_vec(self, grids: list[np.ndarray], u: np.ndarray, v: np.ndarray) -> np.ndarray:
        coords = self._coords(u, v)
        return np.stack([ndimage.map_coordinates(g, coords, order=1, mode="nearest") for g in grids], axis=-1)


def _surface_gradient(geom: ShellGeometry, f: np.ndarray) -> np.ndarray:
    """Surface gradient of a scalar uv-grid field as sensor-frame vectors (n_u, n_v, 3)."""
    n_u, n_v = f.shape
    du = TWO_PI / n_u
    dv = 1.0 / (n_v - 1)
    df_du = (np.roll(f, -1, axis=0) - np.roll(f, 1, axis=0)) / (2.0 * du)
    df_dv = np.gradient(f, dv, axis=1)

    u = np.arange(n_u) * du
    v = np.linspace(0.0, 1.0, n_v)
    pos, nrm = surface_points(geom, u[:, None], v[None, :])
    t_az = np.stack([-np.sin(u), np.cos(u), np.zeros_like(u)], axis=-1)[:, None, :]
    t_az = np.broadcast_to(t_az, nrm.shape)
    t_mer = np.cross(nrm, t_az)
    rho = np.hypot(pos[..., 0], pos[..., 1])
    az = np.where(rho > 1e-9, df_du / np.maximum(rho, 1e-9), 0.0)
    grad = (df_dv / geom.meridian_length)[..., None] * t_mer + az[..., None] * t_az
    # the apex row is a single point
    grad[:, -1, :] = grad[:, -1, :].mean(axis=0)
    return grad


def _check_grid(fld: DisplacementField) -> None:
    n_u, n_v = fld.shape
    if n_u < MIN_GRID[0] or n_v < MIN_GRID[1]:
        raise ResolutionError(f"displacement grid {n_u}x{n_v} is coarser than {MIN_GRID[0]}x{MIN_GRID[1]}")


# ----------------------------
# Shading
# ----------------------------

def _marker_albedo(geom: ShellGeometry, instance: SensorInstance, material: np.ndarray) -> np.ndarray:
    base = instance.perturbations.coating_albedo
    albedo = np.full(material.shape[0], base)
    layout = instance.markers
    if not layout.enabled:
        return albedo
    centers = instance_marker_positions(geom, instance)
    reach = layout.dot_radius + MARKER_EDGE
    dist, _ = cKDTree(centers).query(material, k=1, distance_upper_bound=reach)
    near = np.isfinite(dist)
    cover = np.clip((reach - dist[near]) / (2.0 * MARKER_EDGE), 0.0, 1.0)
    albedo[near] = base * (1.0 - cover) + layout.albedo * cover
    return albedo


def _shade(
    geom: ShellGeometry,
    instance: SensorInstance,
    points: np.ndarray,
    normals_in: np.ndarray,
    albedo: np.ndarray,
) -> np.ndarray:
    led = instance.led
    gains = np.asarray(instance.perturbations.led_gains)
    colors = led.colors()
    led_pos = led.positions()
    led_axes = led.axes(geom)

    view = instance.camera.position - points
    view /= np.linalg.norm(view, axis=1, keepdims=True)

    rgb = np.zeros((points.shape[0], 3))
    for i in range(led.count):
        to_led = led_pos[i] - points
        dist2 = np.einsum("ij,ij->i", to_led, to_led)
        l = to_led / np.sqrt(dist2)[:, None]
        ndl = np.maximum(np.einsum("ij,ij->i", normals_in, l), 0.0)
        beam = np.maximum(-(l @ led_axes[i]), 0.0) ** led.beam_exponent
        irradiance = led.intensity * gains[i] * beam / dist2
        h = l + view
        h /= np.maximum(np.linalg.norm(h, axis=1, keepdims=True), 1e-12)
        spec = np.where(ndl > 0.0, np.maximum(np.einsum("ij,ij->i", normals_in, h), 0.0) ** SPECULAR_EXPONENT, 0.0)
        rgb += ((albedo * ndl + SPECULAR_WEIGHT * spec) * irradiance)[:, None] * colors[i]
    return rgb * np.asarray(instance.perturbations.rgb_balance)


def _quantize(values: np.ndarray) -> np.ndarray:
    # round half away from zero on non-negative values
    return np.clip(np.floor(values * 255.0 + 0.5), 0, 255).astype(np.uint8)


# ----------------------------
# Operations
# ----------------------------

def render(
    geom: ShellGeometry,
    instance: SensorInstance,
    fld: DisplacementField,
    spec: Optional[ContactSpec] = None,
) -> TactileImage:
    """Ray-cast the deformed membrane through the fisheye and shade it under the LED ring.

    `spec` only labels the log line; the image is fully determined by the field.
    """
    _check_grid(fld)
    mask, theta, psi = _pixel_rays(instance)
    cam_z = instance.camera.position_z
    u0, v0, hit, _ = ray_hits(geom, cam_z, theta, psi)

    u = u0[hit]
    v = v0[hit]
    if fld.is_zero:
        pos, nrm = surface_points(geom, u, v)
        deformed = pos
        n_def = nrm
    else:
        sampler = _FieldSampler(geom, fld)
        tu, tv = u.copy(), v.copy()
        for _ in range(FIXED_POINT_ITERATIONS):
            pos, nrm = surface_points(geom, u, v)
            d = pos - sampler.sample(sampler.normal, u, v)[:, None] * nrm + sampler.sample_vec(sampler.tangential, u, v)
            th = np.arctan2(np.hypot(d[:, 0], d[:, 1]), d[:, 2] - cam_z)
            ps = np.arctan2(d[:, 1], d[:, 0])
            uh, vh, _, _ = ray_hits(geom, cam_z, th, ps)
            du = np.mod(tu - uh + math.pi, TWO_PI) - math.pi
            u = np.mod(u + du, TWO_PI)
            v = np.clip(v + (tv - vh), 0.0, 1.0)
        pos, nrm = surface_points(geom, u, v)
        deformed = pos - sampler.sample(sampler.normal, u, v)[:, None] * nrm + sampler.sample_vec(sampler.tangential, u, v)
        n_def = nrm + sampler.sample_vec(sampler.gradient, u, v)
        n_def /= np.linalg.norm(n_def, axis=1, keepdims=True)

    albedo = _marker_albedo(geom, instance, pos)
    rgb = _shade(geom, instance, deformed, -n_def, albedo)

    size = instance.camera.image_size
    out = np.zeros((size, size, 3), dtype=np.uint8)
    yy, xx = np.nonzero(mask)
    out[yy[hit], xx[hit]] = _quantize(rgb)
    if spec is not None:
        logger.debug("rendered %s at uv=(%.3f, %.3f) d=%.3f", instance.id, spec.uv[0], spec.uv[1], spec.depth)
    return TactileImage(pixels=out, instance_id=instance.id, source="render")


def reference_image(geom: ShellGeometry, instance: SensorInstance) -> TactileImage:
    key = ("reference", geom)
    ref = instance._cache.get(key)
    if ref is None:
        ref = render(geom, instance, DisplacementField.zeros(*MIN_GRID))
        ref.source = "reference"
        instance._cache[key] = ref
    return TactileImage(pixels=ref.pixels.copy(), instance_id=ref.instance_id, source="reference")


def render_contact(
    geom: ShellGeometry,
    instance: SensorInstance,
    indenter: Indenter,
    spec: ContactSpec,
    grid: tuple[int, int] = MIN_GRID,
) -> TactileImage:
    if spec.depth == 0.0:
        return reference_image(geom, instance)
    return render(geom, instance, displacement_field(geom, indenter, spec, grid=grid), spec)


def augment(
    image: TactileImage,
    seed: int,
    noise_sigma: float = 2.0,
    light_gain_range: tuple[float, float] = (0.9, 1.1),
) -> TactileImage:
    """Global light gain plus additive Gaussian noise (in 8-bit units); masked pixels stay 0."""
    if noise_sigma < 0.0:
        raise DomainError(f"noise_sigma must be >= 0, got {noise_sigma}")
    lo, hi = light_gain_range
    if lo > hi:
        raise DomainError(f"light_gain_range must be (low, high), got {light_gain_range}")
    rng = np.random.default_rng(seed)
    gain = float(rng.uniform(lo, hi)) if hi > lo else float(lo)
    px = image.pixels.astype(float) * gain
    if noise_sigma > 0.0:
        px = px + rng.normal(0.0, noise_sigma, px.shape)
    out = np.clip(np.floor(px + 0.5), 0, 255).astype(np.uint8)
    size = image.size
    yy, xx = np.mgrid[0:size, 0:size]
    c = (size - 1) / 2.0
    out[np.hypot(xx - c, yy - c) > size / 2.0] = 0
    return TactileImage(pixels=out, instance_id=image.instance_id, source="augmented")


# ----------------------------
# PNG I/O
# ----------------------------

def save_png(image: TactileImage, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    ok = cv2.imwrite(str(path), cv2.cvtColor(image.pixels, cv2.COLOR_RGB2BGR), [cv2.IMWRITE_PNG_COMPRESSION, 3])
    if not ok:
        raise DatasetError(f"could not write image {path}")


def load_png(path: Path, instance_id: str, source: Optional[str] = None) -> TactileImage:
    bgr = cv2.imread(str(path), cv2.IMREAD_COLOR)
    if bgr is None:
        raise DatasetError(f"missing or unreadable image {path}")
    return TactileImage(pixels=cv2.cvtColor(bgr, cv2.COLOR_BGR2RGB), instance_id=instance_id, source=source or str(path))
