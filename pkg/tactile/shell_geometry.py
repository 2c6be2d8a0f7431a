from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError, EmptyRequestError

# Sensor frame: origin at the membrane base center, +z along the sensor axis
# toward the apex. All lengths in mm.

TWO_PI = 2.0 * math.pi

DEFAULT_BINS = (36, 18)


@dataclass(frozen=True)
class ShellGeometry:
    """Cylinder wall of height `cyl_height` capped by a hemisphere.

    The axial surface parameter runs 0 -> 1 from the base rim to the apex and is
    proportional to meridian arc length, so the seam sits at `seam_axial`.
    """

    cyl_radius: float = 12.0
    cyl_height: float = 14.0
    hemisphere_radius: float = 12.0

    def __post_init__(self) -> None:
        for name in ("cyl_radius", "cyl_height", "hemisphere_radius"):
            if not getattr(self, name) > 0:
                raise DomainError(f"{name} must be > 0, got {getattr(self, name)}")
        if not math.isclose(self.hemisphere_radius, self.cyl_radius, rel_tol=0.0, abs_tol=1e-12):
            raise DomainError(
                f"hemisphere_radius ({self.hemisphere_radius}) must equal cyl_radius ({self.cyl_radius})"
            )

    @property
    def radius(self) -> float:
        return self.cyl_radius

    @property
    def apex_height(self) -> float:
        return self.cyl_height + self.hemisphere_radius

    @property
    def meridian_length(self) -> float:
        return self.cyl_height + 0.5 * math.pi * self.hemisphere_radius

    @property
    def seam_axial(self) -> float:
        return self.cyl_height / self.meridian_length

    @property
    def cylinder_area(self) -> float:
        return TWO_PI * self.cyl_radius * self.cyl_height

    @property
    def hemisphere_area(self) -> float:
        return TWO_PI * self.hemisphere_radius**2

    @property
    def total_area(self) -> float:
        return self.cylinder_area + self.hemisphere_area


@dataclass(frozen=True, eq=False)
class SurfacePoint:
    position: np.ndarray
    normal: np.ndarray
    uv: tuple[float, float]


@dataclass(frozen=True, eq=False)
class ContactFrame:
    origin: np.ndarray
    # columns are the x, y, z axes expressed in the sensor frame
    axes: np.ndarray = field(repr=False)

    @property
    def x_axis(self) -> np.ndarray:
        return self.axes[:, 0]

    @property
    def y_axis(self) -> np.ndarray:
        return self.axes[:, 1]

    @property
    def z_axis(self) -> np.ndarray:
        return self.axes[:, 2]

    def to_local(self, points: np.ndarray) -> np.ndarray:
        """Sensor-frame points (..., 3) -> local coordinates (..., 3)."""
        return (np.asarray(points, dtype=float) - self.origin) @ self.axes


# ----------------------------
# Parameterisation
# ----------------------------

def surface_points(geom: ShellGeometry, u, v) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised surface map: azimuth u, axial v -> (positions, outward normals)."""
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    u, v = np.broadcast_arrays(u, v)
    R = geom.cyl_radius
    H = geom.cyl_height
    hc = geom.seam_axial

    cu, su = np.cos(u), np.sin(u)
    on_cyl = v < hc
    z_cyl = np.where(on_cyl, v / hc, 0.0) * H
    alpha = np.where(on_cyl, 0.0, (v - hc) / (1.0 - hc)) * (0.5 * math.pi)
    ca, sa = np.cos(alpha), np.sin(alpha)

    radial = np.where(on_cyl, 1.0, ca)
    nz = np.where(on_cyl, 0.0, sa)
    z = np.where(on_cyl, z_cyl, H + R * sa)

    positions = np.stack([R * radial * cu, R * radial * su, z], axis=-1)
    normals = np.stack([radial * cu, radial * su, nz], axis=-1)
    return positions, normals


def surface_point(geom: ShellGeometry, uv: tuple[float, float]) -> SurfacePoint:
    u, v = float(uv[0]), float(uv[1])
    if not (0.0 <= u < TWO_PI):
        raise DomainError(f"azimuth must be in [0, 2pi), got {u}")
    if not (0.0 <= v <= 1.0):
        raise DomainError(f"axial parameter must be in [0, 1], got {v}")
    pos, nrm = surface_points(geom, u, v)
    return SurfacePoint(position=pos, normal=nrm, uv=(u, v))


def axial_from_height(geom: ShellGeometry, z) -> np.ndarray:
    """Axial parameter of the surface parallel at height z (clipped to the membrane)."""
    z = np.clip(np.asarray(z, dtype=float), 0.0, geom.apex_height)
    H = geom.cyl_height
    hc = geom.seam_axial
    s = np.clip((z - H) / geom.hemisphere_radius, -1.0, 1.0)
    alpha = np.arcsin(np.maximum(s, 0.0))
    return np.where(z <= H, z / H * hc, hc + (1.0 - hc) * alpha / (0.5 * math.pi))


def height_from_axial(geom: ShellGeometry, v) -> np.ndarray:
    _, _, z = np.moveaxis(surface_points(geom, 0.0, np.clip(np.asarray(v, dtype=float), 0.0, 1.0))[0], -1, 0)
    return z


def grid_cell_areas(geom: ShellGeometry, n_u: int, n_v: int) -> np.ndarray:
    """Surface area (mm^2) represented by each node of the uv-grid, shape (n_u, n_v)."""
    _, v = uv_grid(n_u, n_v)
    half = 0.5 / (n_v - 1)
    z_lo = height_from_axial(geom, v - half)
    z_hi = height_from_axial(geom, v + half)
    band = TWO_PI * geom.cyl_radius * (z_hi - z_lo)
    return np.broadcast_to(band / n_u, (n_u, n_v)).copy()


def uv_from_positions(geom: ShellGeometry, positions) -> tuple[np.ndarray, np.ndarray]:
    """(u, v) of points lying on (or radially projected onto) the undeformed surface."""
    p = np.asarray(positions, dtype=float)
    x, y, z = p[..., 0], p[..., 1], p[..., 2]
    rho = np.hypot(x, y)
    u = np.mod(np.arctan2(y, x), TWO_PI)
    u = np.where(u >= TWO_PI, 0.0, u)
    H = geom.cyl_height
    hc = geom.seam_axial
    alpha = np.arctan2(z - H, rho)
    v = np.where(z <= H, np.clip(z, 0.0, H) / H * hc, hc + (1.0 - hc) * np.clip(alpha, 0.0, 0.5 * math.pi) / (0.5 * math.pi))
    return u, np.clip(v, 0.0, 1.0)


def uv_grid(n_u: int, n_v: int) -> tuple[np.ndarray, np.ndarray]:
    """Azimuth samples (periodic, endpoint excluded) and axial samples (0 and 1 included)."""
    u = np.arange(n_u, dtype=float) * (TWO_PI / n_u)
    v = np.linspace(0.0, 1.0, n_v)
    return u, v


# ----------------------------
# Nearest point
# ----------------------------

def project_points(geom: ShellGeometry, points) -> np.ndarray:
    """Nearest undeformed-surface point for each query (..., 3).

    On the symmetry axis below the hemisphere center the azimuth is taken as 0.
    """
    p = np.asarray(points, dtype=float)
    R = geom.cyl_radius
    H = geom.cyl_height
    x, y, z = p[..., 0], p[..., 1], p[..., 2]
    rho = np.hypot(x, y)
    on_axis = rho == 0.0
    safe_rho = np.where(on_axis, 1.0, rho)
    cu = np.where(on_axis, 1.0, x / safe_rho)
    su = np.where(on_axis, 0.0, y / safe_rho)

    # cylinder wall candidate
    zc = np.clip(z, 0.0, H)
    cyl = np.stack([R * cu, R * su, zc], axis=-1)
    d_cyl = np.hypot(rho - R, z - zc)

    # hemisphere candidate (equator point when below the center plane)
    qz = z - H
    qn = np.hypot(rho, qz)
    above = (qz >= 0.0) & (qn > 0.0)
    safe_qn = np.where(qn > 0.0, qn, 1.0)
    hr = np.where(above, R * rho / safe_qn, R)
    hz = np.where(above, H + R * qz / safe_qn, H)
    hemi = np.stack([hr * cu, hr * su, hz], axis=-1)
    d_hemi = np.hypot(rho - hr, z - hz)

    use_hemi = (d_hemi < d_cyl)[..., None]
    return np.where(use_hemi, hemi, cyl)


def project_to_surface(geom: ShellGeometry, p) -> SurfacePoint:
    q = project_points(geom, np.asarray(p, dtype=float).reshape(3))
    u, v = uv_from_positions(geom, q)
    _, n = surface_points(geom, u, v)
    return SurfacePoint(position=q, normal=n, uv=(float(u), float(v)))


# ----------------------------
# Frames
# ----------------------------

def contact_frame(sp: SurfacePoint) -> ContactFrame:
    """z = outward normal, x = azimuthal tangent, y = z cross x (right-handed)."""
    n = np.asarray(sp.normal, dtype=float)
    n = n / np.linalg.norm(n)
    u = sp.uv[0]
    x = np.array([-math.sin(u), math.cos(u), 0.0])
    x = x - n * float(x @ n)
    x = x / np.linalg.norm(x)
    y = np.cross(n, x)
    return ContactFrame(origin=np.asarray(sp.position, dtype=float), axes=np.stack([x, y, n], axis=1))


# ----------------------------
# Area-uniform sampling
# ----------------------------

def area_fraction(geom: ShellGeometry, positions) -> np.ndarray:
    """Cumulative area fraction from the base rim.

    The zone area of a sphere equals 2*pi*R*height, so on this shell the
    fraction is simply z / apex_height.
    """
    p = np.asarray(positions, dtype=float)
    return np.clip(p[..., 2] / geom.apex_height, 0.0, 1.0)


def surface_bin(geom: ShellGeometry, positions, bins: tuple[int, int] = DEFAULT_BINS) -> tuple[np.ndarray, np.ndarray]:
    """Equal-area bin indices (azimuth, axial) of surface points."""
    n_az, n_ax = bins
    p = np.asarray(positions, dtype=float)
    az = np.mod(np.arctan2(p[..., 1], p[..., 0]), TWO_PI)
    ia = np.minimum((az / TWO_PI * n_az).astype(int), n_az - 1)
    iz = np.minimum((area_fraction(geom, p) * n_ax).astype(int), n_ax - 1)
    return ia, iz


def sample_surface_uv(
    geom: ShellGeometry,
    n: int,
    seed: int,
    bins: tuple[int, int] = DEFAULT_BINS,
) -> tuple[np.ndarray, np.ndarray]:
    """Area-uniform (u, v) samples, stratified over equal-area bins.

    Bins are visited in seeded random permutation order (reshuffled every full
    pass); each sample is uniform inside its bin.
    """
    if n < 1:
        raise EmptyRequestError("sample_surface needs n >= 1")
    n_az, n_ax = bins
    n_bins = n_az * n_ax
    rng = np.random.default_rng(seed)
    passes = -(-n // n_bins)
    order = np.concatenate([rng.permutation(n_bins) for _ in range(passes)])[:n]
    ia, iz = np.divmod(order, n_ax)
    jitter = rng.random((n, 2))
    u = (ia + jitter[:, 0]) * (TWO_PI / n_az)
    u = np.where(u >= TWO_PI, 0.0, u)
    z = (iz + jitter[:, 1]) / n_ax * geom.apex_height
    return u, axial_from_height(geom, z)


def sample_surface(
    geom: ShellGeometry,
    n: int,
    seed: int,
    bins: tuple[int, int] = DEFAULT_BINS,
) -> list[SurfacePoint]:
    u, v = sample_surface_uv(geom, n, seed, bins)
    pos, nrm = surface_points(geom, u, v)
    return [SurfacePoint(position=pos[i], normal=nrm[i], uv=(float(u[i]), float(v[i]))) for i in range(n)]
