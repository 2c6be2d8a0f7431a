from __future__ import annotations

import math
import time

import numpy as np
import pytest
from scipy.spatial import cKDTree

from tactile.errors import DomainError, EmptyRequestError
from tactile.shell_geometry import (
    TWO_PI,
    ShellGeometry,
    area_fraction,
    contact_frame,
    grid_cell_areas,
    project_points,
    project_to_surface,
    sample_surface,
    sample_surface_uv,
    surface_bin,
    surface_point,
    surface_points,
    uv_from_positions,
)


def test_default_shell_dimensions(geom: ShellGeometry) -> None:
    assert geom.apex_height == pytest.approx(26.0)
    assert geom.total_area == pytest.approx(2 * math.pi * 12 * 14 + 2 * math.pi * 144)
    assert 0.0 < geom.seam_axial < 1.0


def test_mismatched_radii_are_rejected() -> None:
    with pytest.raises(DomainError):
        ShellGeometry(cyl_radius=12.0, cyl_height=14.0, hemisphere_radius=11.0)
    with pytest.raises(DomainError):
        ShellGeometry(cyl_radius=0.0, cyl_height=14.0, hemisphere_radius=0.0)


def test_surface_point_landmarks(geom: ShellGeometry) -> None:
    apex = surface_point(geom, (0.0, 1.0))
    np.testing.assert_allclose(apex.position, [0.0, 0.0, 26.0], atol=1e-9)
    np.testing.assert_allclose(apex.normal, [0.0, 0.0, 1.0], atol=1e-9)

    rim = surface_point(geom, (math.pi / 2, 0.0))
    np.testing.assert_allclose(rim.position, [0.0, 12.0, 0.0], atol=1e-9)
    np.testing.assert_allclose(rim.normal, [0.0, 1.0, 0.0], atol=1e-9)

    seam = surface_point(geom, (0.0, geom.seam_axial))
    np.testing.assert_allclose(seam.position, [12.0, 0.0, 14.0], atol=1e-9)


@pytest.mark.parametrize("uv", [(-0.1, 0.5), (TWO_PI, 0.5), (0.0, -0.01), (0.0, 1.01)])
def test_surface_point_rejects_out_of_domain(geom: ShellGeometry, uv) -> None:
    with pytest.raises(DomainError):
        surface_point(geom, uv)


def test_normals_are_unit_and_points_on_surface(geom: ShellGeometry) -> None:
    rng = np.random.default_rng(0)
    u = rng.uniform(0, TWO_PI, 500)
    v = rng.uniform(0, 1, 500)
    pos, nrm = surface_points(geom, u, v)
    np.testing.assert_allclose(np.linalg.norm(nrm, axis=1), 1.0, atol=1e-12)
    np.testing.assert_allclose(project_points(geom, pos), pos, atol=1e-9)
    u2, v2 = uv_from_positions(geom, pos)
    np.testing.assert_allclose(v2, v, atol=1e-9)
    np.testing.assert_allclose(np.cos(u2 - u), 1.0, atol=1e-9)


def test_projection_of_offset_points_returns_foot(geom: ShellGeometry) -> None:
    rng = np.random.default_rng(1)
    sps = sample_surface(geom, 200, seed=3)
    for sp in sps:
        offset = rng.uniform(-2.0, 2.0)
        q = project_to_surface(geom, sp.position + offset * sp.normal)
        np.testing.assert_allclose(q.position, sp.position, atol=1e-9)


def test_projection_on_axis_below_center_picks_azimuth_zero(geom: ShellGeometry) -> None:
    q = project_to_surface(geom, [0.0, 0.0, 5.0])
    assert q.uv[0] == 0.0
    np.testing.assert_allclose(np.linalg.norm(q.position - [0.0, 0.0, 5.0]), 12.0, atol=1e-9)


@pytest.mark.slow
def test_projection_matches_brute_force_search(geom: ShellGeometry) -> None:
    # dense surface cloud, ~1e6 points
    n_u, n_v = 2000, 500
    u = np.arange(n_u) * (TWO_PI / n_u)
    v = np.linspace(0.0, 1.0, n_v)
    cloud, _ = surface_points(geom, u[:, None], v[None, :])
    tree = cKDTree(cloud.reshape(-1, 3))

    rng = np.random.default_rng(11)
    queries = rng.uniform([-16, -16, -2], [16, 16, 30], (1000, 3))
    start = time.perf_counter()
    proj = project_points(geom, queries)
    elapsed = time.perf_counter() - start
    assert elapsed < 10.0

    d_ours = np.linalg.norm(proj - queries, axis=1)
    d_brute, _ = tree.query(queries)
    # the cloud spacing bounds how far above the true distance the brute force can be
    spacing = max(TWO_PI * 12 / n_u, geom.meridian_length / (n_v - 1))
    assert np.all(d_ours <= d_brute + 1e-3)
    assert np.all(d_brute - d_ours <= spacing)


def test_contact_frame_is_right_handed(geom: ShellGeometry) -> None:
    for sp in sample_surface(geom, 50, seed=5):
        fr = contact_frame(sp)
        np.testing.assert_allclose(fr.axes.T @ fr.axes, np.eye(3), atol=1e-12)
        assert np.linalg.det(fr.axes) == pytest.approx(1.0)
        np.testing.assert_allclose(fr.z_axis, sp.normal, atol=1e-12)
        np.testing.assert_allclose(fr.to_local(sp.position), 0.0, atol=1e-12)


def test_area_fraction_is_linear_in_height(geom: ShellGeometry) -> None:
    assert area_fraction(geom, [12.0, 0.0, 0.0]) == pytest.approx(0.0)
    assert area_fraction(geom, [0.0, 0.0, 26.0]) == pytest.approx(1.0)
    # cylinder band of height 14 over the whole shell area
    assert area_fraction(geom, [12.0, 0.0, 14.0]) == pytest.approx(geom.cylinder_area / geom.total_area)


def test_grid_cell_areas_sum_to_total(geom: ShellGeometry) -> None:
    assert grid_cell_areas(geom, 64, 65).sum() == pytest.approx(geom.total_area, rel=1e-9)


def test_sampling_is_deterministic_and_covers_every_bin(geom: ShellGeometry) -> None:
    a = sample_surface_uv(geom, 648, seed=9)
    b = sample_surface_uv(geom, 648, seed=9)
    np.testing.assert_array_equal(a[0], b[0])
    np.testing.assert_array_equal(a[1], b[1])

    pos, _ = surface_points(geom, *a)
    ia, iz = surface_bin(geom, pos)
    counts = np.zeros((36, 18), dtype=int)
    np.add.at(counts, (ia, iz), 1)
    assert counts.min() == 1 and counts.max() == 1


def test_sampling_is_area_uniform_over_the_cap(geom: ShellGeometry) -> None:
    u, v = sample_surface_uv(geom, 20_000, seed=2)
    pos, _ = surface_points(geom, u, v)
    on_cap = pos[:, 2] > geom.cyl_height
    assert on_cap.mean() == pytest.approx(geom.hemisphere_area / geom.total_area, abs=0.01)


def test_empty_sampling_request(geom: ShellGeometry) -> None:
    with pytest.raises(EmptyRequestError):
        sample_surface(geom, 0, seed=0)
