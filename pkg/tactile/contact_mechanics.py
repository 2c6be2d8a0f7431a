from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Literal, Optional, Sequence

import numpy as np

from .errors import DomainError, RangeError
from .shell_geometry import (
    ShellGeometry,
    contact_frame,
    surface_point,
    surface_points,
    uv_from_positions,
    uv_grid,
)

logger = logging.getLogger(__name__)

# Load law constants (N, mm, rad).
K_N = 2.45  # N * mm^-2, Hertz-style normal stiffness
K_T = 1.2  # N * mm^-2, tangential stick stiffness
K_TAU = 0.042  # N*m * rad^-1 * mm^-2
MU = 1.0
SKIRT_SIGMA = 1.5  # mm
SUPPORT_SIGMAS = 5.0
SHEAR_TAPER_SIGMAS = 4.0

MAX_DEPTH = 3.0
DEFAULT_D_MAX = 2.0

# Label ranges of generated data.
FZ_RANGE = (-12.0, 0.8)
FXY_RANGE = (-5.0, 5.0)
TAU_RANGE = (-0.05, 0.05)

MODES = ("press", "tilt", "twist")
Mode = Literal["press", "tilt", "twist"]
Shape = Literal["sphere", "square", "hexagon", "ellipse"]


# ----------------------------
# Models
# ----------------------------

@dataclass(frozen=True)
class Indenter:
    """Rigid indenter presented tip-first along the inward contact normal.

    dims: sphere (radius,), square (edge,), hexagon (edge,), ellipse (semi_a, semi_b).
    """

    shape: Shape
    dims: tuple[float, ...]

    def __post_init__(self) -> None:
        expected = {"sphere": 1, "square": 1, "hexagon": 1, "ellipse": 2}
        if self.shape not in expected:
            raise DomainError(f"unknown indenter shape: {self.shape}")
        if len(self.dims) != expected[self.shape]:
            raise DomainError(f"{self.shape} needs {expected[self.shape]} dimension(s), got {self.dims}")
        if any(not d > 0 for d in self.dims):
            raise DomainError(f"indenter dimensions must be > 0: {self.dims}")

    @classmethod
    def sphere(cls, radius: float) -> "Indenter":
        return cls("sphere", (float(radius),))

    @classmethod
    def square(cls, edge: float) -> "Indenter":
        return cls("square", (float(edge),))

    @classmethod
    def hexagon(cls, edge: float) -> "Indenter":
        return cls("hexagon", (float(edge),))

    @classmethod
    def ellipse(cls, semi_a: float, semi_b: float) -> "Indenter":
        return cls("ellipse", (float(semi_a), float(semi_b)))

    @property
    def name(self) -> str:
        return f"{self.shape}-" + "x".join(f"{d:g}" for d in self.dims)

    @classmethod
    def from_name(cls, name: str) -> "Indenter":
        try:
            shape, dims = name.split("-", 1)
            return cls(shape, tuple(float(x) for x in dims.split("x")))  # type: ignore[arg-type]
        except (ValueError, TypeError) as e:
            raise DomainError(f"bad indenter descriptor: {name!r}") from e

    @property
    def area(self) -> float:
        if self.shape == "sphere":
            return math.pi * self.dims[0] ** 2
        if self.shape == "square":
            return self.dims[0] ** 2
        if self.shape == "hexagon":
            return 1.5 * math.sqrt(3.0) * self.dims[0] ** 2
        return math.pi * self.dims[0] * self.dims[1]

    @property
    def effective_radius(self) -> float:
        """Sphere: its radius. Flat heads: radius of the equal-area circle."""
        if self.shape == "sphere":
            return self.dims[0]
        return math.sqrt(self.area / math.pi)

    @property
    def max_extent(self) -> float:
        """Largest distance from the tip center to the outline."""
        if self.shape == "sphere":
            return self.dims[0]
        if self.shape == "square":
            return self.dims[0] / math.sqrt(2.0)
        if self.shape == "hexagon":
            return self.dims[0]
        return max(self.dims)

    def footprint_radius(self, depth: float) -> float:
        """Contact radius at the undeformed-surface level (flat heads: equal-area radius)."""
        if depth <= 0.0:
            return 0.0
        if self.shape == "sphere":
            r = self.dims[0]
            d = min(depth, r)
            return math.sqrt(2.0 * r * d - d * d)
        return self.effective_radius

    def depth_limit(self) -> float:
        """Largest depth whose normal load stays inside the generated f_z range."""
        cap = (-FZ_RANGE[0] / (K_N * math.sqrt(self.effective_radius))) ** (2.0 / 3.0)
        return min(cap, MAX_DEPTH)


# The set used for data collection: spheres r=3,4,5; square edge 6; hexagon edge 3;
# ellipse with 8 mm and 4 mm axes.
STANDARD_INDENTERS: tuple[Indenter, ...] = (
    Indenter.sphere(3.0),
    Indenter.sphere(4.0),
    Indenter.sphere(5.0),
    Indenter.square(6.0),
    Indenter.hexagon(3.0),
    Indenter.ellipse(4.0, 2.0),
)


@dataclass(frozen=True)
class ContactSpec:
    uv: tuple[float, float]
    depth: float
    slip: tuple[float, float] = (0.0, 0.0)
    twist: float = 0.0

    def __post_init__(self) -> None:
        if not (0.0 <= self.depth <= MAX_DEPTH):
            raise DomainError(f"depth must be in [0, {MAX_DEPTH}] mm, got {self.depth}")


@dataclass(frozen=True)
class ContactState:
    x: tuple[float, float, float]
    f: tuple[float, float, float]
    tau: float

    def in_range(self) -> bool:
        fx, fy, fz = self.f
        return (
            FZ_RANGE[0] <= fz <= FZ_RANGE[1]
            and FXY_RANGE[0] <= fx <= FXY_RANGE[1]
            and FXY_RANGE[0] <= fy <= FXY_RANGE[1]
            and TAU_RANGE[0] <= self.tau <= TAU_RANGE[1]
        )


@dataclass(frozen=True)
class Magnitude:
    depth: float
    slip: float = 0.0  # mm, peak tangential stick displacement (tilt)
    twist: float = 0.0  # rad, peak twist (sign kept)


@dataclass(frozen=True)
class Episode:
    uv: tuple[float, float]
    mode: Mode
    magnitude: Magnitude
    seed: int
    specs: tuple[ContactSpec, ...] = field(repr=False)

    @property
    def frames(self) -> int:
        return len(self.specs)


@dataclass(frozen=True, eq=False)
class DisplacementField:
    """Fields over the uv-grid, indexed [azimuth, axial].

    normal: inward displacement (mm). tangential: material displacement tangent
    to the surface, sensor frame (mm). footprint: grid nodes inside the tip outline.
    """

    normal: np.ndarray
    tangential: np.ndarray
    footprint: np.ndarray
    clipped: bool = False

    @property
    def shape(self) -> tuple[int, int]:
        return self.normal.shape  # type: ignore[return-value]

    @classmethod
    def zeros(cls, n_u: int, n_v: int) -> "DisplacementField":
        return cls(
            normal=np.zeros((n_u, n_v)),
            tangential=np.zeros((n_u, n_v, 3)),
            footprint=np.zeros((n_u, n_v), dtype=bool),
        )

    @property
    def is_zero(self) -> bool:
        return not (self.normal.any() or self.tangential.any())


# ----------------------------
# Tip geometry (local contact plane)
# ----------------------------

def _outline_sdf(indenter: Indenter, xi: np.ndarray, eta: np.ndarray, depth: float) -> np.ndarray:
    """Signed distance to the tip outline at the undeformed-surface level (negative inside)."""
    if indenter.shape == "sphere":
        return np.hypot(xi, eta) - indenter.footprint_radius(depth)
    if indenter.shape == "square":
        h = indenter.dims[0] / 2.0
        qx = np.abs(xi) - h
        qy = np.abs(eta) - h
        outside = np.hypot(np.maximum(qx, 0.0), np.maximum(qy, 0.0))
        return outside + np.minimum(np.maximum(qx, qy), 0.0)
    if indenter.shape == "hexagon":
        # flat-top regular hexagon, circumradius = edge
        apothem = indenter.dims[0] * math.sqrt(3.0) / 2.0
        kx, ky, kz = -math.sqrt(3.0) / 2.0, 0.5, math.tan(math.pi / 6.0)
        px, py = np.abs(xi), np.abs(eta)
        dot = np.minimum(kx * px + ky * py, 0.0)
        px = px - 2.0 * dot * kx
        py = py - 2.0 * dot * ky
        px = px - np.clip(px, -kz * apothem, kz * apothem)
        py = py - apothem
        return np.hypot(px, py) * np.sign(py)
    a, b = indenter.dims
    k0 = np.hypot(xi / a, eta / b)
    k1 = np.hypot(xi / (a * a), eta / (b * b))
    safe = np.where(k1 > 0.0, k1, 1.0)
    return np.where(k1 > 0.0, k0 * (k0 - 1.0) / safe, -min(a, b))


def _tip_height(indenter: Indenter, rho: np.ndarray) -> np.ndarray:
    """Tip surface height above the tip point (flat heads are 0 on the face)."""
    if indenter.shape == "sphere":
        r = indenter.dims[0]
        return r - np.sqrt(np.maximum(r * r - rho * rho, 0.0))
    return np.zeros_like(rho)


def _nearest_outline_point(indenter: Indenter, xi: np.ndarray, eta: np.ndarray, sdf: np.ndarray, depth: float):
    """Radial pull-back of outside points onto the outline (exact for the disk)."""
    rho = np.hypot(xi, eta)
    safe = np.where(rho > 0.0, rho, 1.0)
    target = np.maximum(rho - np.maximum(sdf, 0.0), 0.0)
    scale = np.where(rho > 0.0, target / safe, 0.0)
    return xi * scale, eta * scale


# ----------------------------
# Operations
# ----------------------------

def _fields_at(
    geom: ShellGeometry,
    indenter: Indenter,
    spec: ContactSpec,
    pos: np.ndarray,
    nrm: np.ndarray,
    sigma: float,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(normal, tangential, inside) at membrane points `pos` with outward normals `nrm`.

    Local coordinates are geodesic-polar around the contact center: the in-plane
    direction is the tangent-plane direction and the radius is the chord length.
    """
    sp = surface_point(geom, spec.uv)
    frame = contact_frame(sp)

    local = frame.to_local(pos)
    chord = np.linalg.norm(pos - frame.origin, axis=-1)
    t_len = np.hypot(local[..., 0], local[..., 1])
    has_dir = t_len > 1e-12
    safe_t = np.where(has_dir, t_len, 1.0)
    xi = np.where(has_dir, local[..., 0] / safe_t * chord, chord)
    eta = np.where(has_dir, local[..., 1] / safe_t * chord, 0.0)
    zeta = local[..., 2]

    # twist rotates the tip outline about the normal
    c, s = math.cos(spec.twist), math.sin(spec.twist)
    xr = c * xi + s * eta
    er = -s * xi + c * eta

    d = spec.depth
    same_side = (nrm @ frame.z_axis) > 0.0
    sdf = _outline_sdf(indenter, xr, er, d)
    inside = (sdf <= 0.0) & same_side
    g = np.maximum(sdf, 0.0)

    rho = np.hypot(xi, eta)
    pen = np.maximum(d + zeta - _tip_height(indenter, rho), 0.0)
    ox, oe = _nearest_outline_point(indenter, xi, eta, sdf, d)
    rim = np.maximum(d + zeta - _tip_height(indenter, np.hypot(ox, oe)), 0.0)

    support = same_side & (g <= SUPPORT_SIGMAS * sigma)
    skirt = rim * np.exp(-((g / sigma) ** 2))
    normal = np.where(inside, pen, np.where(support, skirt, 0.0))

    # tangential stick displacement: rigid inside, elastic decay outside
    a = max(indenter.footprint_radius(d), 1e-9)
    ratio = np.where(rho > a, a / np.maximum(rho, 1e-12), 1.0)
    taper = np.where(same_side, np.exp(-((g / (SHEAR_TAPER_SIGMAS * sigma)) ** 2)), 0.0)
    slip_w = np.where(inside, 1.0, ratio * taper)
    twist_w = np.where(inside, 1.0, ratio * ratio * taper)
    tx = spec.slip[0] * slip_w + ((c - 1.0) * xi - s * eta) * twist_w
    ty = spec.slip[1] * slip_w + (s * xi + (c - 1.0) * eta) * twist_w
    tangential = tx[..., None] * frame.x_axis + ty[..., None] * frame.y_axis
    # keep the displacement tangent to the local surface
    tangential = tangential - (tangential * nrm).sum(axis=-1, keepdims=True) * nrm
    tangential = np.where(same_side[..., None], tangential, 0.0)
    return normal, tangential, inside


def displacement_field(
    geom: ShellGeometry,
    indenter: Indenter,
    spec: ContactSpec,
    grid: tuple[int, int] = (256, 128),
    sigma: float = SKIRT_SIGMA,
) -> DisplacementField:
    """Inward displacement (and tangential stick displacement) over a uv-grid."""
    n_u, n_v = grid
    if spec.depth <= 0.0:
        return DisplacementField.zeros(n_u, n_v)

    u, v = uv_grid(n_u, n_v)
    pos, nrm = surface_points(geom, u[:, None], v[None, :])
    normal, tangential, inside = _fields_at(geom, indenter, spec, pos, nrm, sigma)

    sp = surface_point(geom, spec.uv)
    clipped = bool(sp.position[2] - indenter.max_extent < 0.0)
    if clipped:
        logger.warning(
            "footprint of %s at uv=(%.3f, %.3f) crosses the membrane base; field clipped",
            indenter.name, spec.uv[0], spec.uv[1],
        )
    return DisplacementField(normal=normal, tangential=tangential, footprint=inside, clipped=clipped)


def displacement_at(
    geom: ShellGeometry,
    indenter: Indenter,
    spec: ContactSpec,
    points: np.ndarray,
    sigma: float = SKIRT_SIGMA,
) -> tuple[np.ndarray, np.ndarray]:
    """Inward (N,) and tangential (N, 3) displacement at membrane points (N, 3)."""
    u, v = uv_from_positions(geom, np.asarray(points, dtype=float).reshape(-1, 3))
    pos, nrm = surface_points(geom, u, v)
    if spec.depth <= 0.0:
        return np.zeros(len(pos)), np.zeros_like(pos)
    normal, tangential, _ = _fields_at(geom, indenter, spec, pos, nrm, sigma)
    return normal, tangential


def contact_load(indenter: Indenter, spec: ContactSpec) -> tuple[tuple[float, float, float], float]:
    """Force (contact frame, N) and torsion about the normal (N*m)."""
    d = spec.depth
    if d < 0.0:
        raise DomainError(f"depth must be >= 0, got {d}")
    if d == 0.0:
        return (0.0, 0.0, 0.0), 0.0

    fz_mag = K_N * math.sqrt(indenter.effective_radius) * d**1.5
    cap = MU * fz_mag

    fx = K_T * spec.slip[0] * d
    fy = K_T * spec.slip[1] * d
    mag = math.hypot(fx, fy)
    if mag > cap:
        fx *= cap / mag
        fy *= cap / mag

    a = indenter.footprint_radius(d)
    tau_cap = (2.0 / 3.0) * MU * fz_mag * a / 1000.0
    tau = K_TAU * spec.twist * d * d
    tau = min(max(tau, -tau_cap), tau_cap)
    return (fx, fy, -fz_mag), tau


def check_magnitude(mode: str, magnitude: Magnitude, indenter: Optional[Indenter] = None) -> None:
    """Reject magnitudes whose loads can leave the generated label ranges."""
    if mode not in MODES:
        raise DomainError(f"mode must be one of {MODES}, got {mode!r}")
    d = magnitude.depth
    if not (0.0 < d <= MAX_DEPTH):
        raise RangeError(f"depth {d} mm outside (0, {MAX_DEPTH}]")
    if indenter is not None and d > indenter.depth_limit() + 1e-12:
        raise RangeError(
            f"depth {d:.4f} mm would push |f_z| past {-FZ_RANGE[0]} N for {indenter.name} "
            f"(limit {indenter.depth_limit():.4f} mm)"
        )
    if K_T * abs(magnitude.slip) * d > FXY_RANGE[1]:
        raise RangeError(f"slip {magnitude.slip} mm at depth {d} mm exceeds the {FXY_RANGE[1]} N tangential range")
    if abs(K_TAU * magnitude.twist * d * d) > TAU_RANGE[1]:
        raise RangeError(f"twist {magnitude.twist} rad at depth {d} mm exceeds the {TAU_RANGE[1]} N*m torsion range")


def sample_magnitude(mode: str, indenter: Indenter, rng: np.random.Generator, min_depth: float = 0.5) -> Magnitude:
    """Draw a magnitude whose loads stay inside the label ranges."""
    d_hi = min(indenter.depth_limit(), DEFAULT_D_MAX) * 0.999
    d = float(rng.uniform(min(min_depth, d_hi), d_hi))
    slip = 0.0
    twist = 0.0
    if mode == "tilt":
        slip_cap = FXY_RANGE[1] * 0.99 / (K_T * d)
        slip = float(rng.uniform(0.2, min(1.5, slip_cap)))
    elif mode == "twist":
        twist_cap = TAU_RANGE[1] * 0.99 / (K_TAU * d * d)
        twist = float(rng.uniform(0.05, min(0.3, twist_cap))) * (1.0 if rng.random() < 0.5 else -1.0)
    return Magnitude(depth=d, slip=slip, twist=twist)


def _approach_frames(frames: int) -> int:
    return max(1, (frames - 1) // 3)


def make_episode(
    uv: tuple[float, float],
    mode: str,
    magnitude: Magnitude,
    frames: int,
    seed: int,
    indenter: Optional[Indenter] = None,
) -> Episode:
    """Frame schedule of one contact interaction.

    Frame 0 is at rest; depth ramps to its peak over the approach frames. Tilt and
    twist then hold the peak depth and swing slip / twist through one sine period.
    """
    if frames < 2:
        raise DomainError(f"an episode needs at least 2 frames, got {frames}")
    check_magnitude(mode, magnitude, indenter)
    uv = (float(uv[0]), float(uv[1]))

    rng = np.random.default_rng(seed)
    heading = float(rng.uniform(0.0, 2.0 * math.pi))
    direction = (math.cos(heading), math.sin(heading))

    specs: list[ContactSpec] = []
    if mode == "press":
        for k in range(frames):
            specs.append(ContactSpec(uv=uv, depth=magnitude.depth * k / (frames - 1)))
    else:
        n_app = _approach_frames(frames)
        for k in range(n_app + 1):
            specs.append(ContactSpec(uv=uv, depth=magnitude.depth * k / n_app))
        hold = frames - n_app - 1
        for j in range(1, hold + 1):
            w = math.sin(2.0 * math.pi * j / (hold + 1))
            if mode == "tilt":
                specs.append(
                    ContactSpec(
                        uv=uv,
                        depth=magnitude.depth,
                        slip=(magnitude.slip * w * direction[0], magnitude.slip * w * direction[1]),
                    )
                )
            else:
                specs.append(ContactSpec(uv=uv, depth=magnitude.depth, twist=magnitude.twist * w))
    return Episode(uv=uv, mode=mode, magnitude=magnitude, seed=seed, specs=tuple(specs))  # type: ignore[arg-type]


def episode_states(
    episode: Episode,
    indenter: Indenter,
    geom: Optional[ShellGeometry] = None,
) -> list[tuple[ContactSpec, ContactState]]:
    geom = geom or ShellGeometry()
    x = tuple(float(c) for c in surface_point(geom, episode.uv).position)
    out: list[tuple[ContactSpec, ContactState]] = []
    for spec in episode.specs:
        f, tau = contact_load(indenter, spec)
        out.append((spec, ContactState(x=x, f=f, tau=tau)))  # type: ignore[arg-type]
    return out


def random_episode(
    geom: ShellGeometry,
    indenter: Indenter,
    frames: int,
    seed: int,
    uv: tuple[float, float],
    modes: Sequence[str] = MODES,
    min_depth: float = 0.5,
) -> Episode:
    """Episode at `uv` with mode and magnitude drawn from `seed`."""
    rng = np.random.default_rng([seed, 1])
    mode = modes[int(rng.integers(len(modes)))]
    magnitude = sample_magnitude(mode, indenter, rng, min_depth=min_depth)
    return make_episode(uv, mode, magnitude, frames, seed, indenter=indenter)
